//! Plot-ready summary tables of a run directory. Sections whose source
//! artifacts are absent are written as missing-section markers.

use std::path::Path;

use crate::error::CliError;
use crate::formats::{num, Table};

pub const REPORT_DIR: &str = "report";

struct Section {
    name: &'static str,
    /// Command producing the sources.
    command: &'static str,
    build: fn(&Path) -> Result<Option<Table>, CliError>,
}

const SECTIONS: [Section; 8] = [
    Section { name: "errors", command: "solve", build: errors },
    Section { name: "norms", command: "solve", build: |d| copy(d, "norms.csv") },
    Section { name: "norm_ordering", command: "solve", build: |d| copy(d, "norm_ordering.csv") },
    Section { name: "j_history", command: "solve", build: j_history },
    Section { name: "spectra", command: "build-kl", build: spectra },
    Section { name: "kl_decay", command: "build-kl", build: kl_decay },
    Section { name: "posterior", command: "identify-bayes", build: |d| copy(d, "posterior_summary.csv") },
    Section { name: "audit", command: "identify-bayes", build: |d| copy(d, "audit.csv") },
];

pub fn section_names() -> impl Iterator<Item = &'static str> {
    SECTIONS.iter().map(|s| s.name)
}

fn read(dir: &Path, file: &str) -> Result<Option<Table>, CliError> {
    let path = dir.join(file);
    if path.exists() {
        Table::read(&path).map(Some)
    } else {
        Ok(None)
    }
}

fn copy(dir: &Path, file: &str) -> Result<Option<Table>, CliError> {
    read(dir, file)
}

fn parse(path: &Path, v: &str) -> Result<f64, CliError> {
    v.parse().map_err(|_| CliError::format(path, format!("`{v}` is not a number")))
}

fn errors(dir: &Path) -> Result<Option<Table>, CliError> {
    let Some(solve) = read(dir, "solve_errors.csv")? else { return Ok(None) };
    let mut t = Table::new(&["source", "quantity", "value"]);
    let (e, r) = (solve.column("energy_error"), solve.column("relative_error"));
    for row in &solve.rows {
        let solver = row.first().cloned().unwrap_or_default();
        if let Some(i) = e {
            t.push(vec![format!("solve:{solver}"), "energy_error".into(), row[i].clone()]);
        }
        if let Some(i) = r {
            t.push(vec![format!("solve:{solver}"), "relative_error".into(), row[i].clone()]);
        }
    }
    if let Some(audit) = read(dir, "audit.csv")? {
        let path = dir.join("audit.csv");
        let col = audit.column("relative_error").ok_or_else(|| CliError::format(&path, "no relative_error column"))?;
        let mut worst = 0.0f64;
        for row in &audit.rows {
            worst = worst.max(parse(&path, &row[col])?);
        }
        t.push(vec!["audit".into(), "max_relative_error".into(), num(worst)]);
        if let Some(b) = audit.column("bound").and_then(|b| audit.rows.first().map(|r| r[b].clone())) {
            t.push(vec!["audit".into(), "bound".into(), b]);
        }
    }
    Ok(Some(t))
}

fn j_history(dir: &Path) -> Result<Option<Table>, CliError> {
    let mut t = Table::new(&["source", "step", "j"]);
    let mut any = false;
    for (file, source) in [("j_history.csv", "build-map"), ("solve_j_history.csv", "solve")] {
        if let Some(src) = read(dir, file)? {
            any = true;
            for row in &src.rows {
                t.push(vec![source.into(), row[0].clone(), row[1].clone()]);
            }
        }
    }
    Ok(any.then_some(t))
}

fn sigmas(dir: &Path) -> Result<Option<Vec<f64>>, CliError> {
    let Some(src) = read(dir, "kl_spectrum.csv")? else { return Ok(None) };
    let path = dir.join("kl_spectrum.csv");
    let col = src.column("sigma").ok_or_else(|| CliError::format(&path, "no sigma column"))?;
    let mut s = src.rows.iter().map(|r| parse(&path, &r[col])).collect::<Result<Vec<_>, _>>()?;
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(Some(s))
}

fn spectra(dir: &Path) -> Result<Option<Table>, CliError> {
    Ok(sigmas(dir)?.map(|s| {
        let mut t = Table::new(&["index", "sigma"]);
        for (i, v) in s.iter().enumerate() {
            t.push(vec![(i + 1).to_string(), num(*v)]);
        }
        t
    }))
}

fn kl_decay(dir: &Path) -> Result<Option<Table>, CliError> {
    Ok(sigmas(dir)?.map(|s| {
        let mut t = Table::new(&["index", "ratio_to_first", "share_of_listed"]);
        let total: f64 = s.iter().sum();
        let mut cum = 0.0;
        for (i, v) in s.iter().enumerate() {
            cum += v;
            t.push(vec![(i + 1).to_string(), num(v / s[0]), num(cum / total)]);
        }
        t
    }))
}

/// Writes `report/<section>.csv` for every section plus `report/index.csv`.
pub fn write_report(dir: &Path) -> Result<Vec<(&'static str, bool)>, CliError> {
    let out = dir.join(REPORT_DIR);
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut index = Table::new(&["section", "status", "command"]);
    let mut status = Vec::new();
    for s in &SECTIONS {
        let table = (s.build)(dir)?;
        let present = table.is_some();
        let table = table.unwrap_or_else(|| {
            let mut t = Table::new(&["status", "command"]);
            t.push(vec!["missing".into(), s.command.into()]);
            t
        });
        table.write(&out.join(format!("{}.csv", s.name)))?;
        index.push(vec![s.name.into(), if present { "present" } else { "missing" }.into(), s.command.into()]);
        status.push((s.name, present));
    }
    index.write(&out.join("index.csv"))?;
    Ok(status)
}
