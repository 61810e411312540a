//! Attentive shift encoder: attention over a user's recent interactions,
//! GRU updates of the dynamic embeddings, and the temporal shift projection.

use crate::data::InteractionSequence;
use crate::embedding::{Node, NodeTable, TimeEmbedding};
use crate::error::{dim_err, DsppError, Result};
use crate::numerics::{gru_cell, GruParams, Initializer, ParamId, ParamStore, Tape, Value, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AseParams {
    /// `2D × 2D` projection of `[user | item + position]`.
    pub query: ParamId,
    pub key: ParamId,
    /// `D × D` projection of the historical items.
    pub value: ParamId,
    /// `D × D` head-merging projection, present with more than one head.
    pub output: Option<ParamId>,
    pub user_update: GruParams,
    pub item_update: GruParams,
    pub heads: usize,
    pub dim: usize,
}

impl AseParams {
    pub fn register(store: &mut ParamStore, init: &mut Initializer, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(DsppError::InvalidArgument(format!(
                "{heads} attention heads do not divide dimension {dim}"
            )));
        }
        Ok(AseParams {
            query: store.register("ase.query", init.dense(2 * dim, 2 * dim)),
            key: store.register("ase.key", init.dense(2 * dim, 2 * dim)),
            value: store.register("ase.value", init.dense(dim, dim)),
            output: (heads > 1).then(|| store.register("ase.output", init.dense(dim, dim))),
            user_update: GruParams::register(store, init, "ase.user_update", dim, dim),
            item_update: GruParams::register(store, init, "ase.item_update", dim, dim),
            heads,
            dim,
        })
    }
}

/// Learnable per-node drift vectors of the temporal shift, zero at start so
/// that shifting is initially the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftTables {
    pub users: ParamId,
    pub items: ParamId,
}

impl ShiftTables {
    pub fn register(store: &mut ParamStore, users: usize, items: usize, dim: usize) -> Self {
        ShiftTables {
            users: store.register("shift.users", Value::zeros(&[users, dim])),
            items: store.register("shift.items", Value::zeros(&[items, dim])),
        }
    }

    pub fn lookup(&self, tape: &mut Tape, node: Node) -> Result<Var> {
        match node {
            Node::User(u) => tape.param_row(self.users, u),
            Node::Item(v) => tape.param_row(self.items, v),
        }
    }

    pub fn row<'s>(&self, store: &'s ParamStore, node: Node) -> &'s [f64] {
        match node {
            Node::User(u) => store.get(self.users).row(u),
            Node::Item(v) => store.get(self.items).row(v),
        }
    }
}

/// Attention result together with the per-head weights (`[heads, |H|]`),
/// absent for an empty history.
pub struct Attended {
    pub output: Var,
    pub weights: Option<Var>,
}

/// Attention of a new `(user, item, t)` interaction over the user's history.
///
/// Each history entry `h` (1-based) is keyed by `[user | item_h + p(h, t_h, t)]`
/// and the query is `[user | item + p(|H|, t_|H|, t)]`. The result is the ReLU
/// of the attention-weighted projected history items; an empty history gives
/// the zero vector.
#[allow(clippy::too_many_arguments)]
pub fn attentive_interaction(
    tape: &mut Tape,
    tables: &NodeTable,
    time: &TimeEmbedding,
    params: &AseParams,
    user: usize,
    item: usize,
    t: f64,
    history: &InteractionSequence,
) -> Result<Attended> {
    let entries: Vec<HistoryEntry> = history
        .entries
        .iter()
        .enumerate()
        .map(|(k, &(item, time))| HistoryEntry {
            item,
            time,
            position: k + 1,
        })
        .collect();
    let query_position = entries.last().map(|e| (e.position, e.time));
    attend(tape, tables, time, params, user, item, t, &entries, query_position)
}

/// One keyed history entry with its positional index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryEntry {
    pub item: usize,
    pub time: f64,
    pub position: usize,
}

/// [`attentive_interaction`] with explicit positions: the query's positional
/// term is taken at `query_position = (index, time)`.
#[allow(clippy::too_many_arguments)]
pub fn attend(
    tape: &mut Tape,
    tables: &NodeTable,
    time: &TimeEmbedding,
    params: &AseParams,
    user: usize,
    item: usize,
    t: f64,
    entries: &[HistoryEntry],
    query_position: Option<(usize, f64)>,
) -> Result<Attended> {
    let d = params.dim;
    if let Some(e) = entries.iter().find(|e| e.time >= t) {
        return Err(DsppError::InvalidArgument(format!(
            "history entry at {} is not before the query time {t}",
            e.time
        )));
    }
    let (Some((qh, qt)), false) = (query_position, entries.is_empty()) else {
        return Ok(Attended {
            output: tape.vector(vec![0.0; d]),
            weights: None,
        });
    };
    let n = entries.len();
    let u = tables.lookup(tape, Node::User(user))?;
    let v = tables.lookup(tape, Node::Item(item))?;
    let hist_items: Vec<usize> = entries.iter().map(|e| e.item).collect();
    let hist = tape.param_rows(tables.items, &hist_items)?;
    let mut events: Vec<(usize, f64)> = entries.iter().map(|e| (e.position, e.time)).collect();
    events.push((qh, qt));
    let pos = time.encode_many(tape, &events, t)?;
    let key_pos = tape.gather_rows(pos, &(0..n).collect::<Vec<_>>())?;
    let query_pos = tape.row(pos, n)?;

    let qv = tape.add(v, query_pos)?;
    let q_in = tape.concat(&[u, qv])?;
    let w_q = tape.param(params.query);
    let q = tape.matvec(w_q, q_in)?;

    let kv = tape.add(hist, key_pos)?;
    let ub = tape.broadcast_rows(u, n)?;
    let k_in = tape.concat_cols(ub, kv)?;
    let w_k = tape.param(params.key);
    let keys = tape.matmul_t(k_in, w_k)?;

    let scores = tape.mh_scores(q, keys, params.heads)?;
    let alpha = tape.softmax_rows(scores)?;
    let w_v = tape.param(params.value);
    let values = tape.matmul_t(hist, w_v)?;
    let mut out = tape.mh_combine(alpha, values, params.heads)?;
    if let Some(w_o) = params.output {
        let w_o = tape.param(w_o);
        out = tape.matvec(w_o, out)?;
    }
    Ok(Attended {
        output: tape.relu(out),
        weights: Some(alpha),
    })
}

/// GRU updates of both endpoints: the states are the nodes' previous
/// embeddings and the input is the attention result.
pub fn update_dynamic(
    tape: &mut Tape,
    params: &AseParams,
    user_state: Var,
    item_state: Var,
    attended: Var,
) -> Result<(Var, Var)> {
    let u = gru_cell(tape, &params.user_update, attended, user_state)?;
    let v = gru_cell(tape, &params.item_update, attended, item_state)?;
    Ok((u, v))
}

/// `(1 + Δ·w) ⊙ emb`.
pub fn temporal_shift(tape: &mut Tape, emb: Var, drift: Var, delta: f64) -> Result<Var> {
    if delta.is_nan() || delta < 0.0 {
        return Err(DsppError::InvalidArgument(format!(
            "shift interval {delta} is negative"
        )));
    }
    if delta == 0.0 {
        return Ok(emb);
    }
    let s = tape.scale(drift, delta);
    let s = tape.offset(s, 1.0);
    tape.mul(s, emb)
}

/// Value form of [`temporal_shift`].
pub fn temporal_shift_values(emb: &[f64], drift: &[f64], delta: f64) -> Result<Vec<f64>> {
    if delta.is_nan() || delta < 0.0 {
        return Err(DsppError::InvalidArgument(format!(
            "shift interval {delta} is negative"
        )));
    }
    if emb.len() != drift.len() {
        return Err(dim_err("temporal_shift", format!("{} vs {}", emb.len(), drift.len())));
    }
    Ok(emb.iter().zip(drift).map(|(e, w)| (1.0 + delta * w) * e).collect())
}

/// A dynamic embedding anchored at the time of its last update. Projection
/// to a later time always starts from the anchor, so shifts never compound.
#[derive(Clone, Copy, Debug)]
pub struct Anchored {
    pub embedding: Var,
    pub updated_at: f64,
}

impl Anchored {
    pub fn at(&self, tape: &mut Tape, drift: Var, t: f64) -> Result<Var> {
        temporal_shift(tape, self.embedding, drift, t - self.updated_at)
    }
}

/// Last dynamic update of one node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeDynamic {
    pub embedding: Vec<f64>,
    pub updated_at: f64,
    /// Index of the interaction that produced the update.
    pub source: usize,
}

/// Latest dynamic embedding of every node, as values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DynamicState {
    users: Vec<Option<NodeDynamic>>,
    items: Vec<Option<NodeDynamic>>,
}

impl DynamicState {
    pub fn new(users: usize, items: usize) -> Self {
        DynamicState {
            users: vec![None; users],
            items: vec![None; items],
        }
    }

    pub fn get(&self, node: Node) -> Option<&NodeDynamic> {
        match node {
            Node::User(u) => self.users.get(u)?.as_ref(),
            Node::Item(v) => self.items.get(v)?.as_ref(),
        }
    }

    /// Records an update; times must not go backwards for a node.
    pub fn record(&mut self, node: Node, update: NodeDynamic) -> Result<()> {
        let (table, what, id) = match node {
            Node::User(u) => (&mut self.users, "user", u),
            Node::Item(v) => (&mut self.items, "item", v),
        };
        let count = table.len();
        let slot = table.get_mut(id).ok_or(DsppError::OutOfRange { what, id, count })?;
        if !update.embedding.iter().all(|x| x.is_finite()) {
            return Err(DsppError::NonFinite(format!("dynamic embedding of {what} {id}")));
        }
        if let Some(prev) = slot {
            if update.updated_at < prev.updated_at {
                return Err(DsppError::Unsorted(update.source));
            }
        }
        *slot = Some(update);
        Ok(())
    }
}
