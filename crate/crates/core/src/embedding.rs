//! Static node tables and the time/position embedding.

use crate::error::{DsppError, Result};
use crate::numerics::{time_phase, Initializer, ParamId, ParamStore, Tape, Value, Var};

/// Which side of the bipartite graph a node lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Node {
    User(usize),
    Item(usize),
}

/// Learnable `|U| × D` and `|V| × D` embedding tables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeTable {
    pub users: ParamId,
    pub items: ParamId,
    pub user_count: usize,
    pub item_count: usize,
    pub dim: usize,
}

impl NodeTable {
    /// Tables drawn from `N(0, 1/D)`.
    pub fn register(
        store: &mut ParamStore,
        init: &mut Initializer,
        user_count: usize,
        item_count: usize,
        dim: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(DsppError::InvalidArgument(
                "embedding dimension must be positive".into(),
            ));
        }
        let sigma = 1.0 / (dim as f64).sqrt();
        let users = store.register("nodes.users", init.normal(user_count, dim, sigma));
        let items = store.register("nodes.items", init.normal(item_count, dim, sigma));
        Ok(NodeTable {
            users,
            items,
            user_count,
            item_count,
            dim,
        })
    }

    fn resolve(&self, node: Node) -> Result<(ParamId, usize)> {
        let (id, idx, count, what) = match node {
            Node::User(u) => (self.users, u, self.user_count, "user"),
            Node::Item(v) => (self.items, v, self.item_count, "item"),
        };
        if idx >= count {
            return Err(DsppError::OutOfRange { what, id: idx, count });
        }
        Ok((id, idx))
    }

    /// Differentiable row of one node; its gradient touches only that row.
    pub fn lookup(&self, tape: &mut Tape, node: Node) -> Result<Var> {
        let (id, idx) = self.resolve(node)?;
        tape.param_row(id, idx)
    }

    /// Current value of a node's row.
    pub fn row<'s>(&self, store: &'s ParamStore, node: Node) -> Result<&'s [f64]> {
        let (id, idx) = self.resolve(node)?;
        Ok(store.get(id).row(idx))
    }
}

/// Learnable frequencies `ω` of the time embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeEmbedding {
    pub omega: ParamId,
    pub dim: usize,
}

impl TimeEmbedding {
    /// Frequencies start on the geometric ladder `ω_j = 10000^{-j/D}`
    /// (1-based `j`).
    pub fn register(store: &mut ParamStore, dim: usize) -> Self {
        let omega = (1..=dim).map(|j| 10000f64.powf(-(j as f64) / dim as f64)).collect();
        let omega = store.register("time.omega", Value::vector(omega));
        TimeEmbedding { omega, dim }
    }

    /// Embedding of history position `position` at time `t_event`, seen from
    /// `t_query`: cosine on odd (1-based) entries, sine on even ones, with
    /// argument `ω_j (t_query − t_event)` plus a position phase.
    pub fn encode(&self, tape: &mut Tape, position: usize, t_event: f64, t_query: f64) -> Result<Var> {
        let m = self.encode_many(tape, &[(position, t_event)], t_query)?;
        tape.reshape(m, &[self.dim])
    }

    /// One row per `(position, t_event)` pair, all seen from `t_query`.
    pub fn encode_many(&self, tape: &mut Tape, events: &[(usize, f64)], t_query: f64) -> Result<Var> {
        if let Some(&(_, t)) = events.iter().find(|(_, t)| *t > t_query) {
            return Err(DsppError::InvalidArgument(format!(
                "time embedding query {t_query} precedes event {t}"
            )));
        }
        let omega = tape.param(self.omega);
        let deltas: Vec<f64> = events.iter().map(|&(_, t)| t_query - t).collect();
        let positions: Vec<f64> = events.iter().map(|&(h, _)| h as f64).collect();
        tape.time_trig(omega, &deltas, &positions)
    }
}

/// Value-only time embedding with explicit frequencies.
pub fn time_embedding_values(omega: &[f64], position: usize, t_event: f64, t_query: f64) -> Result<Vec<f64>> {
    if t_query < t_event {
        return Err(DsppError::InvalidArgument(format!(
            "time embedding query {t_query} precedes event {t_event}"
        )));
    }
    let d = omega.len();
    Ok(omega
        .iter()
        .enumerate()
        .map(|(j, w)| {
            let arg = w * (t_query - t_event) + time_phase(position as f64, j, d);
            if j % 2 == 0 {
                arg.cos()
            } else {
                arg.sin()
            }
        })
        .collect())
}
