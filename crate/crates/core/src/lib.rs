pub mod ase;
pub mod data;
pub mod embedding;
pub mod error;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod tfe;
pub mod tpp;
pub mod train_eval;

pub use error::{DsppError, Result};
