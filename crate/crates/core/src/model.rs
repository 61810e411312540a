//! The full parameter set with the run's time conventions.

use crate::ase::{AseParams, ShiftTables};
use crate::data::{snapshot_index, IdMap};
use crate::embedding::{Node, NodeTable, TimeEmbedding};
use crate::error::{DsppError, Result};
use crate::numerics::{gru_cell, Initializer, ParamStore, Tape, Var};
use crate::tfe::TfeParams;
use crate::train_eval::TrainConfig;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub tables: NodeTable,
    pub time: TimeEmbedding,
    pub tfe: TfeParams,
    pub ase: AseParams,
    pub shifts: ShiftTables,
    /// Raw time units per model time unit (the training mean inter-event gap).
    pub time_scale: f64,
    /// Snapshot width `d`, in model time.
    pub interval: f64,
    pub ids: IdMap,
}

impl Model {
    /// Fresh parameters, registered in a fixed order from `config.seed`.
    pub fn new(config: &TrainConfig, ids: IdMap, time_scale: f64, interval: f64) -> Result<Self> {
        config.validate()?;
        if !(time_scale > 0.0 && time_scale.is_finite() && interval > 0.0 && interval.is_finite()) {
            return Err(DsppError::InvalidArgument(format!(
                "time scale {time_scale} and snapshot interval {interval} must be positive"
            )));
        }
        let (users, items) = (ids.users.len(), ids.items.len());
        if users == 0 || items == 0 {
            return Err(DsppError::Empty("user or item set"));
        }
        let d = config.dim;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(config.seed);
        let tables = NodeTable::register(&mut store, &mut init, users, items, d)?;
        let time = TimeEmbedding::register(&mut store, d);
        let tfe = TfeParams::register(&mut store, &mut init, d, config.layers)?;
        let ase = AseParams::register(&mut store, &mut init, d, config.heads)?;
        let shifts = ShiftTables::register(&mut store, users, items, d);
        Ok(Model {
            config: config.clone(),
            store,
            tables,
            time,
            tfe,
            ase,
            shifts,
            time_scale,
            interval,
            ids,
        })
    }

    pub fn users(&self) -> usize {
        self.tables.user_count
    }

    pub fn items(&self) -> usize {
        self.tables.item_count
    }

    pub fn dim(&self) -> usize {
        self.tables.dim
    }

    /// `⌊t/d⌋`, not clamped to the training snapshot count.
    pub fn snapshot_of(&self, t: f64) -> usize {
        snapshot_index(t, self.interval, usize::MAX)
    }

    /// Dynamic embedding of a node that has never interacted: the update GRU
    /// applied to a zero attention input with the static row as state.
    pub fn fresh_dynamic(&self, tape: &mut Tape, node: Node) -> Result<Var> {
        let state = self.tables.lookup(tape, node)?;
        let zero = tape.vector(vec![0.0; self.dim()]);
        let gru = match node {
            Node::User(_) => &self.ase.user_update,
            Node::Item(_) => &self.ase.item_update,
        };
        gru_cell(tape, gru, zero, state)
    }
}
