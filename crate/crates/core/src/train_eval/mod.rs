//! Training loop, checkpoints, and the item and time prediction tasks.

mod checkpoint;
mod config;
mod eval;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::TrainConfig;
pub use eval::{evaluate, metrics, rank_of, ranking, EvalReport, Scorer};
pub use train::{train, EpochRecord, Prepared, Splits, StopReason, TrainOutcome};
