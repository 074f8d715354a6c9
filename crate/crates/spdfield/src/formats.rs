//! On-disk artifacts: CSV tables and little-endian binary blobs.
//!
//! Floats are written in Rust's shortest round-trip `{:e}` form, so
//! identical values always produce identical bytes.

use std::path::Path;

use spdfield_core::field::SymField;
use spdfield_core::klpce::KlBasis;
use spdfield_core::linalg::Matrix;
use spdfield_core::sgalerkin::{MapTensor, ParamMeasure, RankOneTerm, SolutionMap, StochasticSpace};
use spdfield_core::stiefel::StiefelPoint;

use crate::error::CliError;

pub fn num(v: f64) -> String {
    format!("{v:e}")
}

/// A CSV table held in memory until written.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self { header: header.iter().map(|s| s.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn push_nums(&mut self, row: &[f64]) {
        self.rows.push(row.iter().copied().map(num).collect());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
        if !self.header.is_empty() {
            w.write_record(&self.header).expect("in-memory write");
        }
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_path(path)
            .map_err(|e| CliError::format(path, e.to_string()))?;
        let header = r.headers().map_err(|e| CliError::format(path, e.to_string()))?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::format(path, e.to_string()))?;
        Ok(Self { header, rows })
    }

    /// Value of `key` in a two-column `key,value` table.
    pub fn lookup(&self, key: &str) -> Option<&str> {
        self.rows.iter().find(|r| r.first().map(String::as_str) == Some(key)).and_then(|r| r.get(1)).map(String::as_str)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Numeric rows of a CSV file. A first line that does not parse as numbers
/// is taken as a header.
pub fn read_numeric_rows(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::format(path, e.to_string()))?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => out.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(CliError::format(path, format!("line {}: {e}", i + 1))),
        }
    }
    if let Some(first) = out.first() {
        let width = first.len();
        if let Some(k) = out.iter().position(|row| row.len() != width) {
            return Err(CliError::format(path, format!("row {} has {} columns, expected {width}", k + 1, out[k].len())));
        }
    }
    Ok(out)
}

pub fn numeric_table(prefix: &str, rows: &[Vec<f64>]) -> Table {
    let width = rows.first().map_or(0, Vec::len);
    let header: Vec<String> = (1..=width).map(|j| format!("{prefix}{j}")).collect();
    let mut t = Table::new(&header);
    rows.iter().for_each(|r| t.push_nums(r));
    t
}

const MAGIC: &[u8; 4] = b"SPDF";
const VERSION: u32 = 1;

struct Encoder(Vec<u8>);

impl Encoder {
    fn new(tag: &[u8; 4]) -> Self {
        let mut e = Encoder(Vec::new());
        e.0.extend_from_slice(MAGIC);
        e.0.extend_from_slice(tag);
        e.0.extend_from_slice(&VERSION.to_le_bytes());
        e
    }

    fn usize(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }
}

struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Decoder<'a> {
    fn new(bytes: &'a [u8], tag: &[u8; 4], path: &'a Path) -> Result<Self, CliError> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC || &bytes[4..8] != tag {
            return Err(CliError::format(path, format!("expected a `{}` artifact", String::from_utf8_lossy(tag))));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
        if version != VERSION {
            return Err(CliError::format(path, format!("unsupported version {version}")));
        }
        Ok(Self { bytes, pos: 12, path })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| CliError::format(self.path, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn usize(&mut self) -> Result<usize, CliError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes"));
        usize::try_from(v).map_err(|_| CliError::format(self.path, "length overflow"))
    }

    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>, CliError> {
        let n = self.usize()?;
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(CliError::format(self.path, "truncated"));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn finish(self) -> Result<(), CliError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(CliError::format(self.path, "trailing bytes"))
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn core(path: &Path) -> impl Fn(spdfield_core::error::Error) -> CliError + '_ {
    move |e| CliError::format(path, e.to_string())
}

pub fn encode_kl(kl: &KlBasis) -> Vec<u8> {
    let mut e = Encoder::new(b"KLBS");
    e.usize(kl.n());
    e.f64(kl.total_variance());
    e.f64s(kl.mean().as_slice());
    e.f64s(kl.sigma());
    for mode in kl.modes() {
        e.f64s(mode.as_slice());
    }
    e.f64s(kl.quad());
    e.0
}

pub fn decode_kl(bytes: &[u8], path: &Path) -> Result<KlBasis, CliError> {
    let mut d = Decoder::new(bytes, b"KLBS", path)?;
    let n = d.usize()?;
    let total = d.f64()?;
    let mean = SymField::from_packed(n, d.f64s()?).map_err(core(path))?;
    let sigma = d.f64s()?;
    let modes = (0..sigma.len()).map(|_| SymField::from_packed(n, d.f64s()?).map_err(core(path))).collect::<Result<Vec<_>, _>>()?;
    let quad = d.f64s()?;
    d.finish()?;
    KlBasis::new(mean, sigma, modes, quad, total).map_err(core(path))
}

pub fn read_kl(path: &Path) -> Result<KlBasis, CliError> {
    decode_kl(&read_bytes(path)?, path)
}

pub fn encode_stiefel(y: &StiefelPoint) -> Vec<u8> {
    let mut e = Encoder::new(b"STFL");
    let m = y.matrix();
    e.usize(m.rows());
    e.usize(m.cols());
    e.f64s(m.as_slice());
    e.0
}

pub fn decode_stiefel(bytes: &[u8], path: &Path) -> Result<StiefelPoint, CliError> {
    let mut d = Decoder::new(bytes, b"STFL", path)?;
    let (rows, cols) = (d.usize()?, d.usize()?);
    let data = d.f64s()?;
    d.finish()?;
    StiefelPoint::new(Matrix::from_row_major(rows, cols, data).map_err(core(path))?).map_err(core(path))
}

pub fn read_stiefel(path: &Path) -> Result<StiefelPoint, CliError> {
    decode_stiefel(&read_bytes(path)?, path)
}

pub fn encode_map(map: &SolutionMap) -> Vec<u8> {
    let mut e = Encoder::new(b"SMAP");
    let s = map.space();
    e.usize(map.n_dofs());
    e.usize(s.germ().dim());
    e.usize(s.germ().degree());
    e.usize(s.param().dim());
    e.usize(s.param().degree());
    match s.measure() {
        ParamMeasure::Gaussian { scale } => {
            e.usize(0);
            e.f64(scale);
        }
        ParamMeasure::Uniform { half_width } => {
            e.usize(1);
            e.f64(half_width);
        }
    }
    match map.tau() {
        None => e.usize(0),
        Some(t) => {
            e.usize(1);
            e.f64(t);
        }
    }
    match map.tensor() {
        MapTensor::Dense(u) => {
            e.usize(0);
            e.f64s(u);
        }
        MapTensor::Cp(terms) => {
            e.usize(1);
            e.usize(terms.len());
            for t in terms {
                e.f64s(&t.wx);
                e.f64s(&t.wy);
                e.f64s(&t.wz);
            }
        }
    }
    e.0
}

pub fn decode_map(bytes: &[u8], path: &Path) -> Result<SolutionMap, CliError> {
    let mut d = Decoder::new(bytes, b"SMAP", path)?;
    let n_dof = d.usize()?;
    let (g, pg, v, pp) = (d.usize()?, d.usize()?, d.usize()?, d.usize()?);
    let measure = match (d.usize()?, d.f64()?) {
        (0, scale) => ParamMeasure::Gaussian { scale },
        (1, half_width) => ParamMeasure::Uniform { half_width },
        (k, _) => return Err(CliError::format(path, format!("unknown measure tag {k}"))),
    };
    let tau = match d.usize()? {
        0 => None,
        _ => Some(d.f64()?),
    };
    let tensor = match d.usize()? {
        0 => MapTensor::Dense(d.f64s()?),
        _ => {
            let r = d.usize()?;
            let terms =
                (0..r).map(|_| Ok(RankOneTerm { wx: d.f64s()?, wy: d.f64s()?, wz: d.f64s()? })).collect::<Result<Vec<_>, CliError>>()?;
            MapTensor::Cp(terms)
        }
    };
    d.finish()?;
    SolutionMap::new(n_dof, StochasticSpace::new(g, pg, v, pp, measure), tensor, tau).map_err(core(path))
}

pub fn read_map(path: &Path) -> Result<SolutionMap, CliError> {
    decode_map(&read_bytes(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use spdfield_core::matalg::SymMatrix;

    fn p() -> &'static Path {
        Path::new("test.bin")
    }

    #[test]
    fn kl_round_trip() {
        let one = SymMatrix::identity(2);
        let mean = SymField::constant(3, &one);
        let mut mode = SymField::zeros(2, 3);
        mode.as_mut_slice()[0] = 1.0;
        let kl = KlBasis::new(mean, vec![0.5], vec![mode], vec![1.0, 0.0, 0.0], 0.3).unwrap();
        let back = decode_kl(&encode_kl(&kl), p()).unwrap();
        assert_eq!(encode_kl(&back), encode_kl(&kl));
    }

    #[test]
    fn map_round_trip_dense_and_cp() {
        let space = StochasticSpace::new(1, 2, 2, 1, ParamMeasure::Gaussian { scale: 0.25 });
        let (pg, pp) = (space.germ().len(), space.param().len());
        let dense =
            SolutionMap::new(4, space.clone(), MapTensor::Dense((0..4 * pg * pp).map(|i| i as f64 * 0.1).collect()), Some(2.0)).unwrap();
        assert_eq!(decode_map(&encode_map(&dense), p()).unwrap(), dense);
        let term = RankOneTerm { wx: vec![1.0; 4], wy: vec![0.5; pg], wz: vec![-1.0; pp] };
        let cp = SolutionMap::new(4, space, MapTensor::Cp(vec![term]), None).unwrap();
        assert_eq!(decode_map(&encode_map(&cp), p()).unwrap(), cp);
    }

    #[test]
    fn wrong_tag_and_truncation_are_reported() {
        let y = StiefelPoint::canonical(3, 1).unwrap();
        let bytes = encode_stiefel(&y);
        assert_eq!(decode_stiefel(&bytes, p()).unwrap().matrix(), y.matrix());
        assert!(decode_map(&bytes, p()).is_err());
        assert!(decode_stiefel(&bytes[..bytes.len() - 3], p()).is_err());
    }

    #[test]
    fn numeric_rows_skip_a_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "u1,u2\n1.0,2.5e-1\n3,4\n").unwrap();
        assert_eq!(read_numeric_rows(&path).unwrap(), vec![vec![1.0, 0.25], vec![3.0, 4.0]]);
        std::fs::write(&path, "1,2\n3\n").unwrap();
        assert!(read_numeric_rows(&path).is_err());
    }

    #[test]
    fn tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut t = Table::new(&["key", "value"]);
        t.push(vec!["level".into(), num(0.1)]);
        t.write(&path).unwrap();
        let back = Table::read(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.lookup("level").unwrap().parse::<f64>().unwrap(), 0.1);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig { cases: 128, failure_persistence: None, ..Default::default() })]

        #[test]
        fn numbers_survive_text(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            proptest::prop_assert_eq!(num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }

        #[test]
        fn numeric_rows_survive_a_file(rows in proptest::collection::vec(proptest::collection::vec(-1e6f64..1e6, 3), 1..20)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rows.csv");
            numeric_table("u", &rows).write(&path).unwrap();
            proptest::prop_assert_eq!(read_numeric_rows(&path).unwrap(), rows);
        }
    }
}
