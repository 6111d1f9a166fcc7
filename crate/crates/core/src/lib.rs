pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gp;
pub mod optim;
pub mod ppl;
pub mod sparse;
pub mod kernels;
pub mod models;
pub mod monotonic;
pub mod net;
pub mod numerics;

pub use error::{Error, Result};
