use std::ops::Range;

use serde::Serialize;

use crate::ase::{temporal_shift_values, DynamicState, NodeDynamic};
use crate::data::{SnapshotSequence, TemporalNetwork};
use crate::embedding::Node;
use crate::error::{DsppError, Result};
use crate::model::Model;
use crate::numerics::{softplus, Tape};
use crate::tfe::{steady_embeddings, structures, SteadyState};
use crate::tpp::{expected_interval, Forward, QuadratureConfig, TimePrediction};

/// Ranking and time-prediction quality over a set of test interactions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub count: usize,
    pub mrr: f64,
    pub recall_at_10: f64,
    /// Root mean squared error of the predicted next-event interval, in
    /// hours. `None` when no interval was predicted.
    pub rmse_hours: Option<f64>,
    /// Intervals whose quadrature hit the cap before the survival threshold.
    pub truncated: usize,
    pub ranks: Vec<usize>,
}

/// MRR and Recall@10 of `ranks` (1-based) and the RMSE of `predicted`
/// against `actual`.
pub fn metrics(ranks: &[usize], predicted: &[f64], actual: &[f64]) -> Result<EvalReport> {
    if ranks.is_empty() {
        return Err(DsppError::Empty("rank list"));
    }
    if predicted.len() != actual.len() {
        return Err(DsppError::InvalidArgument(format!(
            "{} predicted intervals for {} observed",
            predicted.len(),
            actual.len()
        )));
    }
    if ranks.contains(&0) {
        return Err(DsppError::InvalidArgument("ranks are 1-based".into()));
    }
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let recall = ranks.iter().filter(|&&r| r <= 10).count() as f64 / n;
    let rmse = (!predicted.is_empty()).then(|| {
        let sq: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a).powi(2)).sum();
        (sq / predicted.len() as f64).sqrt()
    });
    Ok(EvalReport {
        count: ranks.len(),
        mrr,
        recall_at_10: recall,
        rmse_hours: rmse,
        truncated: 0,
        ranks: ranks.to_vec(),
    })
}

/// 1-based rank of `target` when items are ordered by descending score,
/// ties going to the smaller id.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count()
}

/// Item ids by descending score, ties by ascending id.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Replays a stream through a fixed model, holding the dynamic state of
/// every node as of the interactions observed so far.
pub struct Scorer<'m> {
    model: &'m Model,
    net: &'m TemporalNetwork,
    steady: SteadyState,
    state: DynamicState,
    fresh_users: Vec<Option<Vec<f64>>>,
    fresh_items: Vec<Option<Vec<f64>>>,
    observed: usize,
}

impl<'m> Scorer<'m> {
    /// Steady embeddings cover every snapshot up to the one containing
    /// `horizon`; snapshots are cut from `net` itself.
    pub fn new(model: &'m Model, net: &'m TemporalNetwork, horizon: f64) -> Result<Self> {
        if (net.users(), net.items()) != (model.users(), model.items()) {
            return Err(DsppError::InvalidArgument(format!(
                "stream has {}×{} nodes, model {}×{}",
                net.users(),
                net.items(),
                model.users(),
                model.items()
            )));
        }
        let count = model.snapshot_of(horizon.max(0.0)).max(model.config.snapshots - 1) + 1;
        let seq = SnapshotSequence::with_interval(net, model.interval, count)?;
        let steady = steady_embeddings(&model.store, &structures(&seq), &model.tables, &model.tfe)?;
        Ok(Scorer {
            model,
            net,
            steady,
            state: DynamicState::new(model.users(), model.items()),
            fresh_users: vec![None; model.users()],
            fresh_items: vec![None; model.items()],
            observed: 0,
        })
    }

    pub fn state(&self) -> &DynamicState {
        &self.state
    }

    /// Number of stream interactions already applied.
    pub fn observed(&self) -> usize {
        self.observed
    }

    /// Applies the next interaction of the stream to the dynamic state.
    pub fn observe_next(&mut self) -> Result<()> {
        let k = self.observed;
        let x = *self
            .net
            .interactions()
            .get(k)
            .ok_or(DsppError::Empty("remaining stream"))?;
        let (u, v) = {
            let mut tape = Tape::new(&self.model.store);
            let mut fwd = Forward::new(self.model, self.net, &self.state);
            let (u, v) = fwd.update(&mut tape, k)?;
            (tape.value(u).data().to_vec(), tape.value(v).data().to_vec())
        };
        let record = |embedding| NodeDynamic {
            embedding,
            updated_at: x.time,
            source: k,
        };
        self.state.record(Node::User(x.user), record(u))?;
        self.state.record(Node::Item(x.item), record(v))?;
        self.observed += 1;
        Ok(())
    }

    /// Observes every remaining interaction strictly before `t`.
    pub fn advance_before(&mut self, t: f64) -> Result<()> {
        while self.observed < self.net.len() && self.net.interactions()[self.observed].time < t {
            self.observe_next()?;
        }
        Ok(())
    }

    fn fresh(&mut self, node: Node) -> Result<&[f64]> {
        let (slot, count, what, i) = match node {
            Node::User(u) => (&mut self.fresh_users, self.model.users(), "user", u),
            Node::Item(v) => (&mut self.fresh_items, self.model.items(), "item", v),
        };
        let slot = slot.get_mut(i).ok_or(DsppError::OutOfRange { what, id: i, count })?;
        if slot.is_none() {
            let mut tape = Tape::new(&self.model.store);
            let e = self.model.fresh_dynamic(&mut tape, node)?;
            *slot = Some(tape.value(e).data().to_vec());
        }
        Ok(slot.as_deref().expect("filled above"))
    }

    /// Latest dynamic embedding and its update time (`None` if never updated).
    fn anchor(&mut self, node: Node) -> Result<(Vec<f64>, Option<f64>)> {
        match self.state.get(node) {
            Some(d) => Ok((d.embedding.clone(), Some(d.updated_at))),
            None => Ok((self.fresh(node)?.to_vec(), None)),
        }
    }

    fn drift(&self, node: Node) -> &[f64] {
        self.model.shifts.row(&self.model.store, node)
    }

    /// Dynamic embedding of `node` projected to `t`.
    pub fn dynamic_at(&mut self, node: Node, t: f64) -> Result<Vec<f64>> {
        match self.anchor(node)? {
            (e, Some(t0)) => temporal_shift_values(&e, self.drift(node), t - t0),
            (e, None) => Ok(e),
        }
    }

    fn steady_row(&self, node: Node, m: usize) -> Result<&[f64]> {
        if m >= self.steady.len() {
            return Err(DsppError::OutOfRange {
                what: "snapshot",
                id: m,
                count: self.steady.len(),
            });
        }
        Ok(match node {
            Node::User(u) => self.steady.user(m, u),
            Node::Item(v) => self.steady.item(m, v),
        })
    }

    /// `λ(user, j, t)` for every item `j`.
    pub fn intensities(&mut self, user: usize, t: f64) -> Result<Vec<f64>> {
        if user >= self.model.users() {
            return Err(DsppError::OutOfRange {
                what: "user",
                id: user,
                count: self.model.users(),
            });
        }
        let m = self.model.snapshot_of(t);
        let du = self.dynamic_at(Node::User(user), t)?;
        let su = self.steady_row(Node::User(user), m)?.to_vec();
        (0..self.model.items())
            .map(|j| {
                let dv = self.dynamic_at(Node::Item(j), t)?;
                let sv = self.steady_row(Node::Item(j), m)?;
                let logit: f64 = su.iter().zip(sv).map(|(a, b)| a * b).sum::<f64>()
                    + du.iter().zip(&dv).map(|(a, b)| a * b).sum::<f64>();
                Ok(softplus(logit))
            })
            .collect()
    }

    /// All items for `user` at `t`, most likely first. The normalizing sum
    /// over items is a common positive factor and leaves the order alone.
    pub fn predict_item(&mut self, user: usize, t: f64) -> Result<Vec<usize>> {
        Ok(ranking(&self.intensities(user, t)?))
    }

    /// Expected time until the next `(user, item)` event after `t_n`, with
    /// steady embeddings frozen at the snapshot of `t_n` and dynamic ones
    /// shifted from their last updates.
    pub fn predict_time(
        &mut self,
        user: usize,
        item: usize,
        t_n: f64,
        quad: &QuadratureConfig,
    ) -> Result<TimePrediction> {
        let (un, vn) = (Node::User(user), Node::Item(item));
        let m = self.model.snapshot_of(t_n);
        let base: f64 = {
            let su = self.steady_row(un, m)?;
            let sv = self.steady_row(vn, m)?;
            su.iter().zip(sv).map(|(a, b)| a * b).sum()
        };
        let (eu, tu) = self.anchor(un)?;
        let (ev, tv) = self.anchor(vn)?;
        let origin = |t0: Option<f64>| t0.unwrap_or(f64::NEG_INFINITY);
        if origin(tu).max(origin(tv)) > t_n {
            return Err(DsppError::InvalidArgument(format!(
                "prediction origin {t_n} precedes a node update"
            )));
        }
        let no_shift = vec![0.0; self.model.dim()];
        let wu = if tu.is_some() {
            self.drift(un).to_vec()
        } else {
            no_shift.clone()
        };
        let wv = if tv.is_some() {
            self.drift(vn).to_vec()
        } else {
            no_shift
        };
        let (tu, tv) = (tu.unwrap_or(t_n), tv.unwrap_or(t_n));
        let lambda = |tau: f64| {
            let (a, b) = (tau - tu, tau - tv);
            let dynamic: f64 = (0..eu.len())
                .map(|j| eu[j] * (1.0 + a * wu[j]) * ev[j] * (1.0 + b * wv[j]))
                .sum();
            softplus(base + dynamic)
        };
        expected_interval(lambda, t_n, quad)
    }
}

/// Sequential next-item evaluation over `range` of `net` (model time): each
/// interaction is scored against the state built from everything before it,
/// then applied. With `with_time`, the interval since the later of the two
/// endpoints' last updates is predicted as well.
pub fn evaluate(model: &Model, net: &TemporalNetwork, range: Range<usize>, with_time: bool) -> Result<EvalReport> {
    if range.is_empty() || range.end > net.len() {
        return Err(DsppError::InvalidArgument(format!(
            "evaluation range {range:?} of {} interactions",
            net.len()
        )));
    }
    let prefix = net.slice(0..range.end);
    let horizon = prefix.interactions()[range.end - 1].time;
    let mut scorer = Scorer::new(model, &prefix, horizon)?;
    let quad = model.config.quadrature();
    let hours = model.time_scale / 3600.0;
    let (mut ranks, mut predicted, mut actual) = (Vec::new(), Vec::new(), Vec::new());
    let mut truncated = 0;
    while scorer.observed() < range.start {
        scorer.observe_next()?;
    }
    for k in range {
        let x = prefix.interactions()[k];
        let scores = scorer.intensities(x.user, x.time)?;
        ranks.push(rank_of(&scores, x.item));
        if with_time {
            let last = [Node::User(x.user), Node::Item(x.item)]
                .iter()
                .filter_map(|&n| scorer.state().get(n).map(|d| d.updated_at))
                .reduce(f64::max);
            if let Some(t_n) = last {
                let p = scorer.predict_time(x.user, x.item, t_n, &quad)?;
                truncated += usize::from(p.truncated);
                predicted.push(p.expected * hours);
                actual.push((x.time - t_n) * hours);
            }
        }
        scorer.observe_next()?;
    }
    let mut report = metrics(&ranks, &predicted, &actual)?;
    report.truncated = truncated;
    Ok(report)
}
