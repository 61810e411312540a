use std::collections::HashMap;

use rand::Rng;

use super::{sample_negatives, stratified_times, telescoping_terms};
use crate::ase::{attentive_interaction, temporal_shift, update_dynamic, DynamicState};
use crate::data::TemporalNetwork;
use crate::embedding::Node;
use crate::error::{DsppError, Result};
use crate::model::Model;
use crate::numerics::{gru_cell, Tape, Value, Var};
use crate::tfe::{steady_window, TalStructure};

/// Where steady rows come from when building an interaction's terms.
pub trait SteadySource {
    fn steady(&mut self, tape: &mut Tape, node: Node, m: usize) -> Result<Var>;
}

fn window_slot(first: usize, len: usize, m: usize) -> Result<usize> {
    m.checked_sub(first)
        .filter(|&k| k < len)
        .ok_or_else(|| DsppError::InvalidArgument(format!("snapshot {m} outside window {first}..{}", first + len)))
}

fn node_index(node: Node) -> usize {
    match node {
        Node::User(u) => u,
        Node::Item(v) => v,
    }
}

/// Rows of fused matrices recorded on the same tape, so gradients reach the
/// encoder directly. `fused[k]` belongs to snapshot `first + k`.
pub struct TapeSteady {
    pub first: usize,
    pub fused: Vec<(Var, Var)>,
}

impl SteadySource for TapeSteady {
    fn steady(&mut self, tape: &mut Tape, node: Node, m: usize) -> Result<Var> {
        let (u, v) = self.fused[window_slot(self.first, self.fused.len(), m)?];
        match node {
            Node::User(i) => tape.row(u, i),
            Node::Item(j) => tape.row(v, j),
        }
    }
}

/// Steady rows entered as constants; their adjoints are read back after the
/// reverse pass and pushed through a separate encoder tape.
pub struct LeafSteady<'v> {
    first: usize,
    users: &'v [Value],
    items: &'v [Value],
    leaves: HashMap<(Node, usize), Var>,
}

impl<'v> LeafSteady<'v> {
    pub fn new(first: usize, users: &'v [Value], items: &'v [Value]) -> Self {
        LeafSteady {
            first,
            users,
            items,
            leaves: HashMap::new(),
        }
    }

    /// Every leaf created so far as `(node, snapshot, var)`, in a fixed order.
    pub fn leaves(&self) -> Vec<(Node, usize, Var)> {
        let mut out: Vec<_> = self.leaves.iter().map(|(&(n, m), &v)| (n, m, v)).collect();
        out.sort_by_key(|&(n, m, _)| (m, matches!(n, Node::Item(_)), node_index(n)));
        out
    }
}

impl SteadySource for LeafSteady<'_> {
    fn steady(&mut self, tape: &mut Tape, node: Node, m: usize) -> Result<Var> {
        if let Some(&v) = self.leaves.get(&(node, m)) {
            return Ok(v);
        }
        let k = window_slot(self.first, self.users.len(), m)?;
        let table = match node {
            Node::User(_) => &self.users[k],
            Node::Item(_) => &self.items[k],
        };
        let i = node_index(node);
        if i >= table.rows() {
            return Err(DsppError::OutOfRange {
                what: "steady row",
                id: i,
                count: table.rows(),
            });
        }
        let var = tape.vector(table.row(i).to_vec());
        self.leaves.insert((node, m), var);
        Ok(var)
    }
}

/// Dynamic-embedding construction on a tape against a fixed view of the
/// stream and of the per-node dynamic state.
pub struct Forward<'m> {
    model: &'m Model,
    net: &'m TemporalNetwork,
    state: &'m DynamicState,
    attended: HashMap<usize, Var>,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m Model, net: &'m TemporalNetwork, state: &'m DynamicState) -> Self {
        Forward {
            model,
            net,
            state,
            attended: HashMap::new(),
        }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn net(&self) -> &'m TemporalNetwork {
        self.net
    }

    /// Attention output of interaction `k` over its user's history.
    pub fn attended(&mut self, tape: &mut Tape, k: usize) -> Result<Var> {
        if let Some(&o) = self.attended.get(&k) {
            return Ok(o);
        }
        let x = self.net.interactions()[k];
        let m = self.model;
        let history = self.net.history(x.user, x.time, m.config.history)?;
        let o = attentive_interaction(tape, &m.tables, &m.time, &m.ase, x.user, x.item, x.time, &history)?.output;
        self.attended.insert(k, o);
        Ok(o)
    }

    fn gru_state(&self, tape: &mut Tape, node: Node) -> Result<Var> {
        match self.state.get(node) {
            Some(prev) if self.model.config.carry_dynamic_state => Ok(tape.vector(prev.embedding.clone())),
            _ => self.model.tables.lookup(tape, node),
        }
    }

    /// Dynamic embeddings of both endpoints right after interaction `k`,
    /// with GRU states taken from the current view.
    pub fn update(&mut self, tape: &mut Tape, k: usize) -> Result<(Var, Var)> {
        let x = self.net.interactions()[k];
        let o = self.attended(tape, k)?;
        let hu = self.gru_state(tape, Node::User(x.user))?;
        let hv = self.gru_state(tape, Node::Item(x.item))?;
        update_dynamic(tape, &self.model.ase, hu, hv, o)
    }

    /// A node's latest dynamic embedding with its update time; `None` for a
    /// node without updates, whose embedding is never shifted.
    pub fn anchor(&mut self, tape: &mut Tape, node: Node) -> Result<(Var, Option<f64>)> {
        let Some(prev) = self.state.get(node) else {
            return Ok((self.model.fresh_dynamic(tape, node)?, None));
        };
        if self.model.config.carry_dynamic_state {
            return Ok((tape.vector(prev.embedding.clone()), Some(prev.updated_at)));
        }
        let x = self.net.interactions()[prev.source];
        let o = self.attended(tape, prev.source)?;
        let m = self.model;
        let emb = match node {
            Node::User(_) => {
                let h = m.tables.lookup(tape, Node::User(x.user))?;
                gru_cell(tape, &m.ase.user_update, o, h)?
            }
            Node::Item(_) => {
                let h = m.tables.lookup(tape, Node::Item(x.item))?;
                gru_cell(tape, &m.ase.item_update, o, h)?
            }
        };
        Ok((emb, Some(prev.updated_at)))
    }

    /// The anchored embedding projected to `t`.
    pub fn dynamic_at(&mut self, tape: &mut Tape, node: Node, t: f64) -> Result<Var> {
        let (emb, at) = self.anchor(tape, node)?;
        match at {
            Some(t0) => {
                let w = self.model.shifts.lookup(tape, node)?;
                temporal_shift(tape, emb, w, t - t0)
            }
            None => Ok(emb),
        }
    }
}

/// Sampling sizes of the Monte Carlo integral.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct McSettings {
    pub samples: usize,
    pub negatives: usize,
}

/// Terms contributed by one observed interaction.
pub struct InteractionTerms {
    pub log_intensity: Var,
    /// Estimated intensity integral over the user's next inter-event interval.
    pub integral: Option<Var>,
    pub user_update: Var,
    pub item_update: Var,
    pub negatives: usize,
}

/// `[(1 + δ_k w) ⊙ emb]_k` as a `[K, D]` matrix, or `emb` repeated when the
/// embedding has no anchor.
fn shifted_rows(tape: &mut Tape, emb: Var, drift: Option<Var>, deltas: &[f64]) -> Result<Var> {
    let rows = tape.broadcast_rows(emb, deltas.len())?;
    let Some(w) = drift else { return Ok(rows) };
    let s = tape.outer_const(deltas, w)?;
    let s = tape.offset(s, 1.0);
    tape.mul(s, rows)
}

/// Log-intensity of interaction `k` and the integral over its user's next
/// interval.
///
/// The log term scores `(u, v, t)` from the endpoints' previous updates. The
/// integral covers `[t, t⁺]` up to the user's next interaction with `v_c`,
/// summing the intensities of `v_c` and the sampled negatives with weight
/// `|V| / pairs`. Inside the interval the user's embedding shifts from its
/// update at `t`, items shift from their own updates, and steady rows stay at
/// the snapshot of `t`.
pub fn interaction_terms<R: Rng + ?Sized>(
    tape: &mut Tape,
    fwd: &mut Forward,
    steady: &mut dyn SteadySource,
    k: usize,
    mc: &McSettings,
    rng: &mut R,
) -> Result<InteractionTerms> {
    let model = fwd.model();
    let net = fwd.net();
    let x = *net.interactions().get(k).ok_or(DsppError::OutOfRange {
        what: "interaction",
        id: k,
        count: net.len(),
    })?;
    let (user, item, t) = (Node::User(x.user), Node::Item(x.item), x.time);
    let m = model.snapshot_of(t);

    let su = steady.steady(tape, user, m)?;
    let sv = steady.steady(tape, item, m)?;
    let du = fwd.dynamic_at(tape, user, t)?;
    let dv = fwd.dynamic_at(tape, item, t)?;
    let logit = super::intensity_logit_var(tape, su, sv, du, dv)?;
    let log_intensity = tape.log_softplus(logit);

    let (user_update, item_update) = fwd.update(tape, k)?;

    let next = net.next_of_user(x.user, k).filter(|&j| net.interactions()[j].time > t);
    let Some(next) = next else {
        return Ok(InteractionTerms {
            log_intensity,
            integral: None,
            user_update,
            item_update,
            negatives: 0,
        });
    };
    let target = net.interactions()[next];
    let n_neg = mc.negatives.min(model.items() - 1);
    let mut pairs = vec![target.item];
    pairs.extend(sample_negatives(target.item, model.items(), n_neg, rng)?);
    let times = stratified_times(t, target.time, mc.samples, rng)?;
    let (at, widths) = telescoping_terms(&times);

    let user_deltas: Vec<f64> = at.iter().map(|s| s - t).collect();
    let wu = model.shifts.lookup(tape, user)?;
    let user_rows = shifted_rows(tape, user_update, Some(wu), &user_deltas)?;
    let widths = tape.vector(widths);
    let mut total: Option<Var> = None;
    for &p in &pairs {
        let node = Node::Item(p);
        let (emb, origin) = if p == x.item {
            (item_update, Some(t))
        } else {
            fwd.anchor(tape, node)?
        };
        let item_rows = match origin {
            Some(t0) => {
                let deltas: Vec<f64> = at.iter().map(|s| s - t0).collect();
                let w = model.shifts.lookup(tape, node)?;
                shifted_rows(tape, emb, Some(w), &deltas)?
            }
            None => shifted_rows(tape, emb, None, &at)?,
        };
        let dynamic = tape.row_dots(user_rows, item_rows)?;
        let sp = steady.steady(tape, node, m)?;
        let base = tape.dot(su, sp)?;
        let base = tape.reshape(base, &[1])?;
        let base = tape.broadcast_rows(base, at.len())?;
        let base = tape.reshape(base, &[at.len()])?;
        let logits = tape.add(dynamic, base)?;
        let lam = tape.softplus(logits);
        let term = tape.dot(lam, widths)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = total.expect("at least the positive pair");
    let integral = tape.scale(total, model.items() as f64 / pairs.len() as f64);
    Ok(InteractionTerms {
        log_intensity,
        integral: Some(integral),
        user_update,
        item_update,
        negatives: n_neg,
    })
}

/// Summary of a batch objective.
pub struct LikelihoodEstimate {
    /// `−(Σ log λ − Λ̂)` on the tape.
    pub loss: Var,
    pub log_intensity: f64,
    pub integral: f64,
    pub samples: usize,
    pub negatives: usize,
    /// `(interaction, user update, item update)` per batch member.
    pub updates: Vec<(usize, Var, Var)>,
}

/// Negative log-likelihood of the interactions in `batch`, all read against
/// the same dynamic-state view.
pub fn nll<R: Rng + ?Sized>(
    tape: &mut Tape,
    fwd: &mut Forward,
    steady: &mut dyn SteadySource,
    batch: &[usize],
    mc: &McSettings,
    rng: &mut R,
) -> Result<LikelihoodEstimate> {
    if batch.is_empty() {
        return Err(DsppError::Empty("likelihood batch"));
    }
    let mut log_sum = 0.0;
    let mut integral = 0.0;
    let mut negatives = 0;
    let mut loss: Option<Var> = None;
    let mut updates = Vec::with_capacity(batch.len());
    for &k in batch {
        let terms = interaction_terms(tape, fwd, steady, k, mc, rng)?;
        let l = tape.value(terms.log_intensity).item();
        let mut term = tape.neg(terms.log_intensity);
        if let Some(i) = terms.integral {
            integral += tape.value(i).item();
            term = tape.add(term, i)?;
        }
        if !tape.value(term).item().is_finite() {
            return Err(DsppError::NonFinite(format!("loss of interaction {k}")));
        }
        log_sum += l;
        negatives = negatives.max(terms.negatives);
        loss = Some(match loss {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
        updates.push((k, terms.user_update, terms.item_update));
    }
    Ok(LikelihoodEstimate {
        loss: loss.expect("non-empty batch"),
        log_intensity: log_sum,
        integral,
        samples: mc.samples,
        negatives,
        updates,
    })
}

/// [`nll`] with the steady encoder recorded on the same tape over every
/// snapshot in `graphs`, so all parameters get exact gradients.
#[allow(clippy::too_many_arguments)]
pub fn nll_end_to_end<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &Model,
    net: &TemporalNetwork,
    state: &DynamicState,
    graphs: &[TalStructure],
    batch: &[usize],
    mc: &McSettings,
    rng: &mut R,
) -> Result<LikelihoodEstimate> {
    let window: Vec<&TalStructure> = graphs.iter().collect();
    let fused = steady_window(tape, &window, &model.tables, &model.tfe, None)?;
    let mut steady = TapeSteady { first: 0, fused };
    let mut fwd = Forward::new(model, net, state);
    nll(tape, &mut fwd, &mut steady, batch, mc, rng)
}
