use std::collections::HashMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{evaluate, TrainConfig};
use crate::ase::{DynamicState, NodeDynamic};
use crate::data::{split_sizes, t_batches, IdMap, SnapshotSequence, TemporalNetwork};
use crate::embedding::Node;
use crate::error::{DsppError, Result};
use crate::model::Model;
use crate::numerics::{AdamConfig, OptimizerState, ParamGrads, Tape, Value};
use crate::tfe::{steady_embeddings, steady_window, structures, SteadyState, TalStructure};
use crate::tpp::{interaction_terms, Forward, LeafSteady, McSettings};

/// Sizes of the chronological train / validation / test segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Splits {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Splits {
    pub fn train_range(&self) -> Range<usize> {
        0..self.train
    }

    pub fn valid_range(&self) -> Range<usize> {
        self.train..self.train + self.valid
    }

    pub fn test_range(&self) -> Range<usize> {
        self.train + self.valid..self.train + self.valid + self.test
    }
}

/// A stream in model time together with the conventions derived from its
/// training segment.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Every interaction, timestamps divided by `time_scale`.
    pub stream: TemporalNetwork,
    pub splits: Splits,
    pub time_scale: f64,
    /// Snapshot width: the training horizon over the snapshot count.
    pub interval: f64,
}

impl Prepared {
    pub fn new(net: &TemporalNetwork, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (train, valid, test) = split_sizes(net.len(), config.split_ratios())?;
        if train == 0 {
            return Err(DsppError::Empty("training split"));
        }
        let time_scale = net.slice(0..train).mean_inter_event_interval().unwrap_or(1.0);
        let stream = net.rescaled(time_scale)?;
        let interval = stream.slice(0..train).horizon() / config.snapshots as f64;
        Ok(Prepared {
            stream,
            splits: Splits { train, valid, test },
            time_scale,
            interval,
        })
    }

    /// The stream and splits a trained model saw, rebuilt from raw data that
    /// is already indexed by the model's id map.
    pub fn for_model(net: &TemporalNetwork, model: &Model) -> Result<Self> {
        if (net.users(), net.items()) != (model.users(), model.items()) {
            return Err(DsppError::InvalidArgument(format!(
                "{}×{} network for a {}×{} model",
                net.users(),
                net.items(),
                model.users(),
                model.items()
            )));
        }
        let (train, valid, test) = split_sizes(net.len(), model.config.split_ratios())?;
        Ok(Prepared {
            stream: net.rescaled(model.time_scale)?,
            splits: Splits { train, valid, test },
            time_scale: model.time_scale,
            interval: model.interval,
        })
    }

    pub fn train_stream(&self) -> TemporalNetwork {
        self.stream.slice(self.splits.train_range())
    }

    /// Freshly initialized model for this stream.
    pub fn initial_model(&self, ids: IdMap, config: &TrainConfig) -> Result<Model> {
        if (ids.users.len(), ids.items.len()) != (self.stream.users(), self.stream.items()) {
            return Err(DsppError::InvalidArgument(format!(
                "id map has {}×{} entries for a {}×{} network",
                ids.users.len(),
                ids.items.len(),
                self.stream.users(),
                self.stream.items()
            )));
        }
        Model::new(config, ids, self.time_scale, self.interval)
    }
}

/// One line of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-interaction negative log-likelihood over the epoch.
    pub train_nll: f64,
    pub valid_mrr: Option<f64>,
    pub valid_recall_at_10: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    Completed,
    EarlyStopped { best_epoch: usize },
    Diverged { epoch: usize, detail: String },
}

pub struct TrainOutcome {
    /// The best model by validation MRR when a validation split exists,
    /// otherwise the last completed epoch's.
    pub model: Model,
    pub trace: Vec<EpochRecord>,
    pub stop: StopReason,
    pub prepared: Prepared,
}

struct InteractionResult {
    loss: f64,
    grads: ParamGrads,
    steady: Vec<((Node, usize), Vec<f64>)>,
    user: Vec<f64>,
    item: Vec<f64>,
}

/// Generator of interaction `k` in `epoch`: one stream of the seed's ChaCha8
/// family per `(epoch, k)`, independent of scheduling.
fn interaction_rng(seed: u64, epoch: usize, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 40) ^ k as u64);
    rng
}

struct EpochContext<'a> {
    model: &'a Model,
    train: &'a TemporalNetwork,
    state: &'a DynamicState,
    window_first: usize,
    window_users: &'a [Value],
    window_items: &'a [Value],
    weight: f64,
    epoch: usize,
}

fn run_interaction(ctx: &EpochContext, k: usize) -> Result<InteractionResult> {
    let model = ctx.model;
    let mc = McSettings {
        samples: model.config.mc_samples,
        negatives: model.config.negatives,
    };
    let mut rng = interaction_rng(model.config.seed, ctx.epoch, k);
    let mut tape = Tape::new(&model.store);
    let mut fwd = Forward::new(model, ctx.train, ctx.state);
    let mut steady = LeafSteady::new(ctx.window_first, ctx.window_users, ctx.window_items);
    let terms = interaction_terms(&mut tape, &mut fwd, &mut steady, k, &mc, &mut rng)?;
    let mut loss = tape.neg(terms.log_intensity);
    if let Some(i) = terms.integral {
        loss = tape.add(loss, i)?;
    }
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(DsppError::NonFinite(format!("loss of interaction {k}")));
    }
    let root = tape.scale(loss, ctx.weight);
    let mut grads = ParamGrads::new();
    let adjoints = tape.backward(root, &mut grads)?;
    let steady = steady
        .leaves()
        .into_iter()
        .filter_map(|(node, m, v)| adjoints.get(v).map(|g| ((node, m), g.to_vec())))
        .collect();
    Ok(InteractionResult {
        loss: value,
        grads,
        steady,
        user: tape.value(terms.user_update).data().to_vec(),
        item: tape.value(terms.item_update).data().to_vec(),
    })
}

struct Trainer<'a> {
    model: Model,
    optimizer: OptimizerState,
    train: &'a TemporalNetwork,
    graphs: Vec<TalStructure>,
    pool: rayon::ThreadPool,
}

impl Trainer<'_> {
    /// One pass over the training stream; returns the mean loss.
    fn epoch(&mut self, epoch: usize) -> Result<f64> {
        let cfg = self.model.config.clone();
        let cache = steady_embeddings(&self.model.store, &self.graphs, &self.model.tables, &self.model.tfe)?;
        let mut state = DynamicState::new(self.model.users(), self.model.items());
        let n = self.train.len();
        let mut total = 0.0;
        for start in (0..n).step_by(cfg.batch_size) {
            let block = start..(start + cfg.batch_size).min(n);
            total += self.block(epoch, block, &cache, &mut state)?;
        }
        Ok(total / n as f64)
    }

    /// Forward and backward over one block, then one optimizer step. Steady
    /// rows enter the interaction tapes as constants; their adjoints are
    /// pushed through the encoder recomputed over the block's snapshots plus
    /// `tbptt − 1` earlier ones, starting from the epoch's cached state.
    fn block(
        &mut self,
        epoch: usize,
        block: Range<usize>,
        cache: &SteadyState,
        state: &mut DynamicState,
    ) -> Result<f64> {
        let model = &self.model;
        let xs = &self.train.interactions()[block.clone()];
        let last = model.config.snapshots - 1;
        let m_lo = model.snapshot_of(xs[0].time).min(last);
        let m_hi = model.snapshot_of(xs[xs.len() - 1].time).min(last);
        let first = m_lo.saturating_sub(model.config.tbptt - 1);

        let mut steady_tape = Tape::new(&model.store);
        let initial = first.checked_sub(1).map(|m| (&cache.users[m], &cache.items[m]));
        let window: Vec<&TalStructure> = self.graphs[first..=m_hi].iter().collect();
        let fused = steady_window(&mut steady_tape, &window, &model.tables, &model.tfe, initial)?;
        let users: Vec<Value> = fused.iter().map(|&(u, _)| steady_tape.value(u).clone()).collect();
        let items: Vec<Value> = fused.iter().map(|&(_, v)| steady_tape.value(v).clone()).collect();

        let weight = 1.0 / xs.len() as f64;
        let mut grads = ParamGrads::new();
        let mut adjoints: HashMap<(Node, usize), Vec<f64>> = HashMap::new();
        let mut loss = 0.0;
        for batch in t_batches(xs)?.iter() {
            let ctx = EpochContext {
                model,
                train: self.train,
                state,
                window_first: first,
                window_users: &users,
                window_items: &items,
                weight,
                epoch,
            };
            let results: Vec<Result<InteractionResult>> = self.pool.install(|| {
                batch
                    .par_iter()
                    .map(|&r| run_interaction(&ctx, block.start + r))
                    .collect()
            });
            let mut updates = Vec::with_capacity(results.len());
            for (&r, res) in batch.iter().zip(results) {
                let res = res?;
                loss += res.loss;
                grads.merge(&res.grads);
                for (key, g) in res.steady {
                    let slot = adjoints.entry(key).or_insert_with(|| vec![0.0; g.len()]);
                    slot.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                updates.push((block.start + r, res.user, res.item));
            }
            for (k, user, item) in updates {
                let x = self.train.interactions()[k];
                let rec = |embedding| NodeDynamic {
                    embedding,
                    updated_at: x.time,
                    source: k,
                };
                state.record(Node::User(x.user), rec(user))?;
                state.record(Node::Item(x.item), rec(item))?;
            }
        }

        let d = model.dim();
        let mut seeds = Vec::new();
        for (slot, &(fu, fv)) in fused.iter().enumerate() {
            let m = first + slot;
            let mut su = vec![0.0; model.users() * d];
            let mut sv = vec![0.0; model.items() * d];
            let (mut hit_u, mut hit_v) = (false, false);
            for (&(node, mm), g) in &adjoints {
                if mm != m {
                    continue;
                }
                match node {
                    Node::User(u) => {
                        su[u * d..(u + 1) * d].copy_from_slice(g);
                        hit_u = true;
                    }
                    Node::Item(v) => {
                        sv[v * d..(v + 1) * d].copy_from_slice(g);
                        hit_v = true;
                    }
                }
            }
            if hit_u {
                seeds.push((fu, su));
            }
            if hit_v {
                seeds.push((fv, sv));
            }
        }
        if !seeds.is_empty() {
            steady_tape.backward_seeded(&seeds, &mut grads)?;
        }
        drop(steady_tape);
        grads.check_finite(&self.model.store)?;
        self.optimizer.step(&mut self.model.store, &grads)?;
        if !self.model.store.iter().all(|(_, p)| p.value.all_finite()) {
            return Err(DsppError::NonFinite("parameters after the optimizer step".into()));
        }
        Ok(loss)
    }
}

/// Trains on the chronological training segment of `net`, reporting every
/// epoch to `on_epoch`. Divergence is not an error: training stops and the
/// last good model is returned with [`StopReason::Diverged`].
pub fn train(
    net: &TemporalNetwork,
    ids: IdMap,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let prepared = Prepared::new(net, config)?;
    let model = prepared.initial_model(ids, config)?;
    let train_net = prepared.train_stream();
    let seq = SnapshotSequence::with_interval(&train_net, model.interval, config.snapshots)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| DsppError::InvalidArgument(format!("worker pool: {e}")))?;
    let optimizer = OptimizerState::new(
        &model.store,
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut trainer = Trainer {
        model,
        optimizer,
        train: &train_net,
        graphs: structures(&seq),
        pool,
    };

    let validate = prepared.splits.valid > 0;
    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stale = 0;
    let mut stop = StopReason::Completed;
    for epoch in 1..=config.epochs {
        let last_good = trainer.model.clone();
        let nll = match trainer.epoch(epoch) {
            Ok(x) if x.is_finite() => x,
            Ok(x) => {
                trainer.model = last_good;
                stop = StopReason::Diverged {
                    epoch,
                    detail: format!("mean loss {x}"),
                };
                break;
            }
            Err(DsppError::NonFinite(detail)) => {
                trainer.model = last_good;
                stop = StopReason::Diverged { epoch, detail };
                break;
            }
            Err(e) => return Err(e),
        };
        let report = if validate {
            Some(evaluate(
                &trainer.model,
                &prepared.stream,
                prepared.splits.valid_range(),
                false,
            )?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_nll: nll,
            valid_mrr: report.as_ref().map(|r| r.mrr),
            valid_recall_at_10: report.as_ref().map(|r| r.recall_at_10),
        };
        on_epoch(&record);
        trace.push(record);
        if let Some(r) = report {
            if best.as_ref().is_none_or(|(b, _, _)| r.mrr > *b) {
                best = Some((r.mrr, epoch, trainer.model.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    stop = StopReason::EarlyStopped {
                        best_epoch: best.as_ref().map_or(epoch, |b| b.1),
                    };
                    break;
                }
            }
        }
    }
    let model = match best {
        Some((_, _, m)) => m,
        None => trainer.model,
    };
    Ok(TrainOutcome {
        model,
        trace,
        stop,
        prepared,
    })
}
