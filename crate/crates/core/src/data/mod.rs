//! Interaction logs, chronological splits, graph snapshots and t-batches.

mod csv;
mod network;
mod snapshot;
mod tbatch;

pub use csv::{parse_interactions, remap, write_interactions, ParseOptions, ParsedLog};
pub use network::{chrono_split, split_sizes, IdMap, Interaction, InteractionSequence, SideColumns, TemporalNetwork};
pub use snapshot::{snapshot_index, Snapshot, SnapshotSequence};
pub use tbatch::{t_batches, TBatches};
