#![no_std]

extern crate alloc;

pub mod chaos;
pub mod error;
pub mod fem;
pub mod field;
pub mod identify;
pub mod klpce;
pub mod linalg;
pub mod lowrank;
pub mod matalg;
pub mod mesh;
pub mod optim;
pub mod repclass;
pub mod rng;
pub mod sgalerkin;
pub mod special;
pub mod stiefel;

pub use error::{Error, Result};
