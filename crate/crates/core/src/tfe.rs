//! Topological fusion encoder: stacked two-hop attention layers on each
//! snapshot, fused across snapshots by a pair of GRUs.

use crate::data::{Snapshot, SnapshotSequence};
use crate::embedding::NodeTable;
use crate::error::{dim_err, DsppError, Result};
use crate::numerics::{gru_cell, GruParams, Initializer, ParamId, ParamStore, Segments, Tape, Value, Var};

/// One side's weights in a layer: the intermediate projection applied to the
/// pooled same-type neighbors, the attention projection, and the `D × 2D`
/// output projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TalSide {
    pub intermediate: ParamId,
    pub attention: ParamId,
    pub output: ParamId,
}

impl TalSide {
    fn register(store: &mut ParamStore, init: &mut Initializer, name: &str, dim: usize) -> Self {
        TalSide {
            intermediate: store.register(format!("{name}.intermediate"), init.dense(dim, dim)),
            attention: store.register(format!("{name}.attention"), init.dense(dim, dim)),
            output: store.register(format!("{name}.output"), init.dense(dim, 2 * dim)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TalLayer {
    pub user: TalSide,
    pub item: TalSide,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TfeParams {
    pub layers: Vec<TalLayer>,
    pub fuse_users: GruParams,
    pub fuse_items: GruParams,
    pub dim: usize,
}

impl TfeParams {
    pub fn register(store: &mut ParamStore, init: &mut Initializer, dim: usize, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(DsppError::InvalidArgument(
                "at least one aggregation layer is required".into(),
            ));
        }
        let layers = (0..layers)
            .map(|k| TalLayer {
                user: TalSide::register(store, init, &format!("tal{k}.user"), dim),
                item: TalSide::register(store, init, &format!("tal{k}.item"), dim),
            })
            .collect();
        Ok(TfeParams {
            layers,
            fuse_users: GruParams::register(store, init, "fuse.users", dim, dim),
            fuse_items: GruParams::register(store, init, "fuse.items", dim, dim),
            dim,
        })
    }
}

/// Neighborhood bookkeeping of one snapshot, arranged for segment ops.
#[derive(Clone, Debug, PartialEq)]
pub struct TalStructure {
    users: usize,
    items: usize,
    connected_users: Vec<usize>,
    connected_items: Vec<usize>,
    /// Per connected item: its users, as rows of the user matrix.
    item_users: Segments,
    /// Per connected user: its items, as rows of the connected-item block.
    user_items: Segments,
    /// Per connected user: its items, as rows of the item matrix.
    user_item_rows: Segments,
    /// Per connected item: its users, as rows of the connected-user block.
    item_user_pos: Segments,
}

impl TalStructure {
    pub fn from_snapshot(s: &Snapshot) -> Self {
        let user_adj: Vec<Vec<usize>> = (0..s.users()).map(|u| s.user_neighbors(u).to_vec()).collect();
        let item_adj: Vec<Vec<usize>> = (0..s.items()).map(|v| s.item_neighbors(v).to_vec()).collect();
        Self::from_adjacency(user_adj, item_adj)
    }

    /// From edges in the given order; neighbor lists keep first-seen order
    /// and ignore repeated pairs.
    pub fn from_edges(users: usize, items: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut user_adj = vec![Vec::new(); users];
        let mut item_adj = vec![Vec::new(); items];
        for &(u, v) in edges {
            if u >= users || v >= items {
                return Err(dim_err(
                    "tal structure",
                    format!("edge ({u}, {v}) outside {users}×{items}"),
                ));
            }
            if !user_adj[u].contains(&v) {
                user_adj[u].push(v);
                item_adj[v].push(u);
            }
        }
        Ok(Self::from_adjacency(user_adj, item_adj))
    }

    fn from_adjacency(user_adj: Vec<Vec<usize>>, item_adj: Vec<Vec<usize>>) -> Self {
        let connected_users: Vec<usize> = (0..user_adj.len()).filter(|&u| !user_adj[u].is_empty()).collect();
        let connected_items: Vec<usize> = (0..item_adj.len()).filter(|&v| !item_adj[v].is_empty()).collect();
        let mut user_pos = vec![usize::MAX; user_adj.len()];
        connected_users.iter().enumerate().for_each(|(k, &u)| user_pos[u] = k);
        let mut item_pos = vec![usize::MAX; item_adj.len()];
        connected_items.iter().enumerate().for_each(|(k, &v)| item_pos[v] = k);
        TalStructure {
            users: user_adj.len(),
            items: item_adj.len(),
            item_users: Segments::from_groups(connected_items.iter().map(|&v| item_adj[v].iter().copied())),
            user_items: Segments::from_groups(
                connected_users
                    .iter()
                    .map(|&u| user_adj[u].iter().map(|&v| item_pos[v])),
            ),
            user_item_rows: Segments::from_groups(connected_users.iter().map(|&u| user_adj[u].iter().copied())),
            item_user_pos: Segments::from_groups(
                connected_items
                    .iter()
                    .map(|&v| item_adj[v].iter().map(|&u| user_pos[u])),
            ),
            connected_users,
            connected_items,
        }
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn items(&self) -> usize {
        self.items
    }
}

/// Output of one aggregation layer. Attention weights are flat per-edge
/// vectors grouped by connected node, absent when no node is connected.
pub struct TalOutput {
    pub users: Var,
    pub items: Var,
    pub user_attention: Option<Var>,
    pub item_attention: Option<Var>,
}

/// Updates one side of the graph. `pool` groups rows of `own` around each
/// connected node of the opposite side (two-hop neighbors); `attend` lists,
/// per connected node of this side, its neighbors among those pooled rows.
fn aggregate_side(
    tape: &mut Tape,
    side: &TalSide,
    own: Var,
    connected: &[usize],
    pool: &Segments,
    attend: &Segments,
) -> Result<(Var, Option<Var>)> {
    if connected.is_empty() {
        return Ok((own, None));
    }
    let pooled = tape.segment_mean(own, pool)?;
    let w_mid = tape.param(side.intermediate);
    let mid = tape.matmul_t(pooled, w_mid)?;
    let mid = tape.relu(mid);

    let current = tape.gather_rows(own, connected)?;
    let w_att = tape.param(side.attention);
    let query = tape.matmul_t(current, w_att)?;
    let logits = tape.segment_dots(query, mid, attend)?;
    let logits = tape.relu(logits);
    let alpha = tape.segment_softmax(logits, attend)?;
    let summary = tape.segment_sum(alpha, mid, attend)?;
    let summary = tape.relu(summary);

    let joined = tape.concat_cols(summary, current)?;
    let w_out = tape.param(side.output);
    let out = tape.matmul_t(joined, w_out)?;
    Ok((tape.replace_rows(own, connected, out)?, Some(alpha)))
}

/// One aggregation layer on one snapshot. Nodes without neighbors keep their
/// input rows.
pub fn tal_layer(tape: &mut Tape, graph: &TalStructure, layer: &TalLayer, users: Var, items: Var) -> Result<TalOutput> {
    let (us, is) = (tape.value(users).shape().to_vec(), tape.value(items).shape().to_vec());
    if us.len() != 2 || is.len() != 2 || us[0] != graph.users || is[0] != graph.items || us[1] != is[1] {
        return Err(dim_err(
            "tal_layer",
            format!(
                "users {us:?}, items {is:?} for a {}×{} snapshot",
                graph.users, graph.items
            ),
        ));
    }
    let g = graph;
    let (new_users, user_attention) = aggregate_side(
        tape,
        &layer.user,
        users,
        &g.connected_users,
        &g.item_users,
        &g.user_items,
    )?;
    let (new_items, item_attention) = aggregate_side(
        tape,
        &layer.item,
        items,
        &g.connected_items,
        &g.user_item_rows,
        &g.item_user_pos,
    )?;
    Ok(TalOutput {
        users: new_users,
        items: new_items,
        user_attention,
        item_attention,
    })
}

/// All layers on one snapshot, starting from `users` / `items`.
pub fn encode_snapshot(
    tape: &mut Tape,
    graph: &TalStructure,
    params: &TfeParams,
    users: Var,
    items: Var,
) -> Result<(Var, Var)> {
    let (mut u, mut v) = (users, items);
    for layer in &params.layers {
        let out = tal_layer(tape, graph, layer, u, v)?;
        (u, v) = (out.users, out.items);
    }
    Ok((u, v))
}

/// Fused embeddings of a window of consecutive snapshots, recorded on `tape`.
///
/// `initial` is the fused state before the first snapshot of the window
/// (zero when `None`), entered as a constant.
pub fn steady_window(
    tape: &mut Tape,
    graphs: &[&TalStructure],
    tables: &NodeTable,
    params: &TfeParams,
    initial: Option<(&Value, &Value)>,
) -> Result<Vec<(Var, Var)>> {
    if graphs.is_empty() {
        return Err(DsppError::Empty("snapshot window"));
    }
    let d = params.dim;
    let users = tape.param(tables.users);
    let items = tape.param(tables.items);
    let (mut hu, mut hv) = match initial {
        Some((u, v)) => (tape.input(u.clone()), tape.input(v.clone())),
        None => (
            tape.input(Value::zeros(&[tables.user_count, d])),
            tape.input(Value::zeros(&[tables.item_count, d])),
        ),
    };
    let mut out = Vec::with_capacity(graphs.len());
    for graph in graphs {
        let (u, v) = encode_snapshot(tape, graph, params, users, items)?;
        hu = gru_cell(tape, &params.fuse_users, u, hu)?;
        hv = gru_cell(tape, &params.fuse_items, v, hv)?;
        out.push((hu, hv));
    }
    Ok(out)
}

/// Fused per-snapshot embedding values.
#[derive(Clone, Debug, PartialEq)]
pub struct SteadyState {
    pub users: Vec<Value>,
    pub items: Vec<Value>,
}

impl SteadyState {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn user(&self, m: usize, u: usize) -> &[f64] {
        self.users[m].row(u)
    }

    pub fn item(&self, m: usize, v: usize) -> &[f64] {
        self.items[m].row(v)
    }
}

/// Steady embeddings of every snapshot under the current parameters, one
/// snapshot per tape.
pub fn steady_embeddings(
    store: &ParamStore,
    graphs: &[TalStructure],
    tables: &NodeTable,
    params: &TfeParams,
) -> Result<SteadyState> {
    if graphs.is_empty() {
        return Err(DsppError::Empty("snapshot sequence"));
    }
    let mut state = SteadyState {
        users: Vec::with_capacity(graphs.len()),
        items: Vec::with_capacity(graphs.len()),
    };
    for graph in graphs {
        let mut tape = Tape::new(store);
        let prev = state.users.last().zip(state.items.last());
        let fused = steady_window(&mut tape, &[graph], tables, params, prev)?;
        let (u, v) = fused[0];
        let (u, v) = (tape.value(u).clone(), tape.value(v).clone());
        if !u.all_finite() || !v.all_finite() {
            return Err(DsppError::NonFinite(format!(
                "steady embeddings at snapshot {}",
                state.len()
            )));
        }
        state.users.push(u);
        state.items.push(v);
    }
    Ok(state)
}

/// Aggregation structures for every snapshot of a sequence.
pub fn structures(seq: &SnapshotSequence) -> Vec<TalStructure> {
    seq.iter().map(TalStructure::from_snapshot).collect()
}
