//! Acceptance gate. Each test prints one `criterion N: PASS|FAIL|SKIP` line
//! to the real stderr (bypassing the harness capture) and then asserts.

mod common;

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use dspp::ase::{temporal_shift_values, DynamicState};
use dspp::data::{parse_interactions, t_batches, IdMap, Interaction, ParseOptions, SnapshotSequence, TemporalNetwork};
use dspp::embedding::NodeTable;
use dspp::model::Model;
use dspp::numerics::{softmax, softplus, Initializer, ParamGrads, ParamId, ParamStore, Tape};
use dspp::synth::{ks_exponential, rescaled_intervals, simulate, HawkesSpec};
use dspp::tfe::{structures, tal_layer, TalStructure, TfeParams};
use dspp::tpp::{
    expected_interval, intensity, mc_integral, nll_end_to_end, survival, IntensityInputs, McSettings, QuadratureConfig,
};
use dspp::train_eval::{evaluate, ranking, train, Scorer, TrainConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const UNIFORM_MRR_3: f64 = (1.0 + 0.5 + 1.0 / 3.0) / 3.0;

fn report(n: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict}  {detail}");
}

fn within(started: Instant, limit: Duration) -> bool {
    started.elapsed() < limit
}

fn stream(rows: &[(usize, usize, f64)], users: usize, items: usize) -> TemporalNetwork {
    let xs = rows
        .iter()
        .map(|&(user, item, time)| Interaction { user, item, time })
        .collect();
    TemporalNetwork::new(users, items, xs).unwrap()
}

// ---------------------------------------------------------------- 1

fn gradient_instance() -> (Model, TemporalNetwork, DynamicState, Vec<usize>) {
    let net = stream(
        &[
            (0, 0, 0.3),
            (1, 2, 0.7),
            (0, 1, 1.1),
            (1, 0, 1.6),
            (0, 1, 2.2),
            (1, 2, 2.9),
            (0, 2, 3.4),
            (1, 1, 3.8),
            (0, 0, 4.5),
            (1, 2, 5.1),
        ],
        2,
        3,
    );
    let config = TrainConfig {
        dim: 8,
        heads: 2,
        layers: 2,
        history: 4,
        snapshots: 2,
        mc_samples: 8,
        seed: 13,
        ..TrainConfig::default()
    };
    let mut model = Model::new(&config, IdMap::identity(2, 3), 1.0, net.horizon() / 2.0).unwrap();
    // nonzero drifts so the shift path carries gradient
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for id in [model.shifts.users, model.shifts.items] {
        for x in model.store.get_mut(id).data_mut() {
            *x = rng.random_range(-0.2..0.2);
        }
    }
    let state = {
        let mut scorer = Scorer::new(&model, &net, net.horizon()).unwrap();
        for _ in 0..3 {
            scorer.observe_next().unwrap();
        }
        scorer.state().clone()
    };
    (model, net, state, (3..9).collect())
}

#[test]
fn criterion_1_gradient_integrity() {
    let started = Instant::now();
    let (model, net, state, batch) = gradient_instance();
    let seq = SnapshotSequence::with_interval(&net, model.interval, 2).unwrap();
    let graphs = structures(&seq);
    let mc = McSettings {
        samples: 8,
        negatives: 10,
    };
    let objective = |store: &ParamStore, grads: Option<&mut ParamGrads>| {
        let m = Model {
            store: store.clone(),
            ..model.clone()
        };
        let mut tape = Tape::new(&m.store);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let est = nll_end_to_end(&mut tape, &m, &net, &state, &graphs, &batch, &mc, &mut rng).unwrap();
        if let Some(g) = grads {
            tape.backward(est.loss, g).unwrap();
        }
        tape.value(est.loss).item()
    };
    let mut analytic = ParamGrads::new();
    objective(&model.store, Some(&mut analytic));
    let errors: Vec<(f64, ParamId)> = model
        .store
        .ids()
        .map(|id| {
            // step near ε^(1/3): at 1e-6 roundoff dominates the tiny attention gradients
            let numeric = common::finite_diff(&model.store, id, 1e-5, &|s| objective(s, None));
            let err = common::rel_err_floor(&analytic.dense(&model.store, id), &numeric, 1e-8);
            (err, id)
        })
        .collect();
    let (worst, at) =
        errors
            .iter()
            .copied()
            .fold((0.0, None), |acc, (e, id)| if e > acc.0 { (e, Some(id)) } else { acc });
    let all_below = errors.iter().all(|(e, _)| *e < 1e-4);
    let pass = all_below && within(started, Duration::from_secs(60));
    let name = at.map_or("-", |id| model.store.name(id));
    report(
        1,
        pass,
        &format!(
            "{} tensors, worst relative error {worst:.2e} on {name}, {:.1?}",
            errors.len(),
            started.elapsed()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

/// Every weight zero, fusion candidate biases `b` for users and `sign·b` for
/// items: steady rows are `tanh(±b)/2`, dynamic rows vanish, and λ is the
/// constant `softplus(sign·D·tanh²(b)/4)`.
fn constant_intensity_model(lambda: f64) -> Model {
    let dim = 16;
    let config = TrainConfig {
        dim,
        heads: 1,
        layers: 1,
        snapshots: 1,
        history: 4,
        ..TrainConfig::default()
    };
    let mut model = Model::new(&config, IdMap::identity(1, 1), 1.0, 100.0).unwrap();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        model.store.get_mut(id).data_mut().fill(0.0);
    }
    let logit = lambda.exp_m1().ln();
    let b = (2.0 * (logit.abs() / dim as f64).sqrt()).atanh();
    let item_bias = if logit < 0.0 { -b } else { b };
    for (gru, bias) in [(model.tfe.fuse_users, b), (model.tfe.fuse_items, item_bias)] {
        model.store.get_mut(gru.b_input).data_mut()[2 * dim..].fill(bias);
    }
    model
}

#[test]
fn criterion_2_tpp_closed_forms() {
    let limit = Duration::from_secs(5);
    let mut lines = Vec::new();
    let mut pass = true;

    let started = Instant::now();
    let mut worst_s: f64 = 0.0;
    for lam in [0.1, 0.7, 2.0] {
        for delta in [0.0, 0.3, 1.0, 4.0, 10.0] {
            let s = survival(|_| lam, 2.0, 2.0 + delta, 256).unwrap();
            worst_s = worst_s.max((s - (-lam * delta).exp()).abs());
        }
    }
    let ok = worst_s < 1e-6 && within(started, limit);
    pass &= ok;
    lines.push(format!("survival max |S - exp(-λΔ)| {worst_s:.1e}"));

    let quad = QuadratureConfig::default();
    let empty = TemporalNetwork::new(1, 1, vec![]).unwrap();
    for lam in [0.1, 2.0] {
        let started = Instant::now();
        let model = constant_intensity_model(lam);
        let mut scorer = Scorer::new(&model, &empty, 1.0).unwrap();
        let got = scorer.intensities(0, 0.5).unwrap()[0];
        let p = scorer.predict_time(0, 0, 0.5, &quad).unwrap();
        let rel = (p.expected * lam - 1.0).abs();
        let ok = (got / lam - 1.0).abs() < 1e-9 && rel < 0.01 && within(started, limit);
        pass &= ok;
        lines.push(format!("λ={lam}: E[Δ] {:.4} (rel {rel:.1e})", p.expected));
    }

    let started = Instant::now();
    let p = expected_interval(|t| t, 0.0, &quad).unwrap();
    let want = (std::f64::consts::PI / 2.0).sqrt();
    let rel = (p.expected / want - 1.0).abs();
    let ok = rel < 0.01 && within(started, limit);
    pass &= ok;
    lines.push(format!("Rayleigh mean {:.5} (rel {rel:.1e})", p.expected));

    report(2, pass, &lines.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_mc_calibration() {
    let started = Instant::now();
    let (c, t, t_plus, n, reps) = (1.3, 0.5, 4.0, 64, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    let mean = (0..reps)
        .map(|_| mc_integral(t, t_plus, n, &mut rng, |_| c).unwrap())
        .sum::<f64>()
        / reps as f64;
    let want = c * (t_plus - t) * (n - 1) as f64 / n as f64;
    let rel = (mean / want - 1.0).abs();
    let pass = rel < 0.02 && within(started, Duration::from_secs(30));
    report(
        3,
        pass,
        &format!("mean {mean:.5} vs {want:.5} (rel {rel:.1e}), {:.1?}", started.elapsed()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_hawkes_generator() {
    let started = Instant::now();
    let spec = HawkesSpec::toy();
    let net = simulate(&spec, 42).unwrap();
    let (d, p) = ks_exponential(&rescaled_intervals(&spec, &net).unwrap()).unwrap();
    let ks_ok = net.len() >= 1000 && p > 0.01;

    let poisson = HawkesSpec {
        users: 1,
        items: 1,
        base: vec![4.0],
        excitation: vec![0.0],
        decay: 1.0,
        horizon: 10.0,
    };
    let seeds = 1000u64;
    let mean = (0..seeds)
        .map(|s| simulate(&poisson, s).unwrap().len() as f64)
        .sum::<f64>()
        / seeds as f64;
    let se = (40.0 / seeds as f64).sqrt();
    let count_ok = (mean - 40.0).abs() < 3.0 * se;

    let pass = ks_ok && count_ok && within(started, Duration::from_secs(60));
    report(
        4,
        pass,
        &format!(
            "KS on {} events D={d:.4} p={p:.3}; Poisson mean {mean:.3} vs 40 (3 SE = {:.3}), {:.1?}",
            net.len(),
            3.0 * se,
            started.elapsed()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        dim: 16,
        heads: 2,
        batch_size: 32,
        lr: 0.01,
        epochs: 20,
        seed,
        ..TrainConfig::default()
    }
}

struct SeedResult {
    mrr: f64,
    dominant_first: usize,
    dominant_queries: usize,
}

fn recover(seed: u64) -> SeedResult {
    let net = simulate(&HawkesSpec::toy(), seed).unwrap();
    let out = train(&net, IdMap::identity(2, 3), &toy_config(seed), &mut |_| {}).unwrap();
    let stream = &out.prepared.stream;
    let test = out.prepared.splits.test_range();
    let report = evaluate(&out.model, stream, test.clone(), false).unwrap();

    let mut scorer = Scorer::new(&out.model, stream, stream.horizon()).unwrap();
    let (mut first, mut queries) = (0, 0);
    for k in 0..stream.len() {
        let x = stream.interactions()[k];
        if test.contains(&k) && x.user == 0 {
            let scores = scorer.intensities(0, x.time).unwrap();
            queries += 1;
            first += usize::from(ranking(&scores)[0] == 1);
        }
        scorer.observe_next().unwrap();
    }
    SeedResult {
        mrr: report.mrr,
        dominant_first: first,
        dominant_queries: queries,
    }
}

#[test]
fn criterion_5_synthetic_recoverability() {
    let started = Instant::now();
    let results: Vec<SeedResult> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..5u64).map(|seed| s.spawn(move || recover(seed))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let beats_uniform = results.iter().filter(|r| r.mrr > UNIFORM_MRR_3).count();
    let dominant = results
        .iter()
        .filter(|r| 2 * r.dominant_first > r.dominant_queries)
        .count();
    let pass = beats_uniform >= 4 && dominant >= 4 && within(started, Duration::from_secs(600));
    let per_seed: Vec<String> = results
        .iter()
        .map(|r| format!("{:.3} ({}/{})", r.mrr, r.dominant_first, r.dominant_queries))
        .collect();
    report(
        5,
        pass,
        &format!(
            "MRR > {UNIFORM_MRR_3:.4} in {beats_uniform}/5, dominant pair first in {dominant}/5; per seed MRR (dominant first/queries): {}; {:.1?}",
            per_seed.join(", "),
            started.elapsed()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

fn data_dir() -> PathBuf {
    std::env::var_os("DSPP_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

#[test]
fn criterion_6_ingestion_fidelity() {
    let expected = [
        ("reddit.csv", (10_000, 1_000, 672_447)),
        ("wikipedia.csv", (8_227, 1_000, 157_474)),
        ("lastfm.csv", (1_000, 1_000, 1_293_103)),
    ];
    let dir = data_dir();
    let mut lines = Vec::new();
    let mut pass = true;
    let mut found = 0;
    for (file, want) in expected {
        let path = dir.join(file);
        let Ok(f) = std::fs::File::open(&path) else {
            lines.push(format!("{file} absent"));
            continue;
        };
        found += 1;
        let log = parse_interactions(std::io::BufReader::new(f), ParseOptions::default()).unwrap();
        let got = (log.network.users(), log.network.items(), log.network.len());
        pass &= got == want;
        lines.push(format!("{file} {got:?} vs {want:?}"));
    }
    if found == 0 {
        let _ = writeln!(
            std::io::stderr(),
            "criterion 6: SKIP  no dataset files under {} ({})",
            dir.display(),
            lines.join("; ")
        );
        return;
    }
    report(6, pass, &lines.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------- 7

const CASES: u32 = 100;

fn network() -> impl Strategy<Value = TemporalNetwork> {
    (1usize..6, 1usize..6).prop_flat_map(|(users, items)| {
        prop::collection::vec((0..users, 0..items, 0u32..400), 1..60).prop_map(move |rows| {
            let xs = rows
                .into_iter()
                .map(|(user, item, t)| Interaction {
                    user,
                    item,
                    time: t as f64 * 0.25,
                })
                .collect();
            TemporalNetwork::new(users, items, xs).unwrap()
        })
    })
}

fn run_cases<S: Strategy>(
    name: &str,
    strategy: S,
    check: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> (String, bool) {
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    match runner.run(&strategy, check) {
        Ok(()) => (format!("{name} ok"), true),
        Err(e) => (format!("{name} FAILED: {e}"), false),
    }
}

fn snapshot_monotonicity() -> (String, bool) {
    run_cases("snapshot monotonicity", (network(), 1usize..12), |(net, count)| {
        let seq = SnapshotSequence::build(&net, net.horizon(), count).unwrap();
        let snaps: Vec<_> = seq.iter().collect();
        for w in snaps.windows(2) {
            prop_assert!(w[0].edges().all(|(u, v)| w[1].contains(u, v)));
            prop_assert!(w[0].edge_count() <= w[1].edge_count());
        }
        for s in snaps {
            let expected: std::collections::BTreeSet<_> = net
                .interactions()
                .iter()
                .filter(|x| x.time < s.window_end)
                .map(|x| (x.user, x.item))
                .collect();
            prop_assert_eq!(s.edges().collect::<std::collections::BTreeSet<_>>(), expected);
        }
        Ok(())
    })
}

fn t_batch_recurrence() -> (String, bool) {
    run_cases("t-batch recurrence", network(), |net| {
        let xs = net.interactions();
        let batches = t_batches(xs).unwrap();
        let mut batch_of = vec![0usize; xs.len()];
        for (k, batch) in batches.iter().enumerate() {
            for &i in batch {
                batch_of[i] = k + 1;
            }
        }
        for (n, x) in xs.iter().enumerate() {
            let prev = xs[..n]
                .iter()
                .enumerate()
                .filter(|(_, y)| y.user == x.user || y.item == x.item)
                .map(|(i, _)| batch_of[i])
                .max()
                .unwrap_or(0);
            prop_assert_eq!(batch_of[n], prev + 1);
        }
        Ok(())
    })
}

fn tal_parts(users: usize, items: usize, seed: u64) -> (ParamStore, NodeTable, TfeParams) {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let tables = NodeTable::register(&mut store, &mut init, users, items, 4).unwrap();
    let params = TfeParams::register(&mut store, &mut init, 4, 1).unwrap();
    (store, tables, params)
}

fn edges() -> impl Strategy<Value = (usize, usize, Vec<(usize, usize)>, u64)> {
    (1usize..6, 1usize..6).prop_flat_map(|(u, v)| {
        (
            Just(u),
            Just(v),
            prop::collection::vec((0..u, 0..v), 0..20),
            any::<u64>(),
        )
    })
}

fn tal_permutation_invariance() -> (String, bool) {
    run_cases("TAL neighbor permutation", edges(), |(users, items, e, seed)| {
        let (store, tables, params) = tal_parts(users, items, seed);
        let mut shuffled = e.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let run = |edges: &[(usize, usize)]| {
            let g = TalStructure::from_edges(users, items, edges).unwrap();
            let mut t = Tape::new(&store);
            let (u, v) = (t.param(tables.users), t.param(tables.items));
            let out = tal_layer(&mut t, &g, &params.layers[0], u, v).unwrap();
            let mut all = t.value(out.users).data().to_vec();
            all.extend_from_slice(t.value(out.items).data());
            all
        };
        for (a, b) in run(&e).iter().zip(run(&shuffled)) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        Ok(())
    })
}

fn softmax_normalization() -> (String, bool) {
    let (plain, ok_plain) = run_cases(
        "softmax normalization",
        prop::collection::vec(-800.0f64..800.0, 1..40),
        |xs| {
            let p = softmax(&xs).unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0 && x.is_finite()));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            Ok(())
        },
    );
    let (tal, ok_tal) = run_cases("TAL attention normalization", edges(), |(users, items, e, seed)| {
        let (store, tables, params) = tal_parts(users, items, seed);
        let g = TalStructure::from_edges(users, items, &e).unwrap();
        let mut t = Tape::new(&store);
        let (u, v) = (t.param(tables.users), t.param(tables.items));
        let out = tal_layer(&mut t, &g, &params.layers[0], u, v).unwrap();
        let mut degree = vec![0usize; users];
        let mut seen = std::collections::BTreeSet::new();
        for &(a, b) in &e {
            if seen.insert((a, b)) {
                degree[a] += 1;
            }
        }
        if let Some(att) = out.user_attention {
            let w = t.value(att).data();
            let mut off = 0;
            for d in degree.into_iter().filter(|&d| d > 0) {
                prop_assert!((w[off..off + d].iter().sum::<f64>() - 1.0).abs() < 1e-12);
                off += d;
            }
        }
        Ok(())
    });
    (format!("{plain}, {tal}"), ok_plain && ok_tal)
}

fn shift_identity() -> (String, bool) {
    run_cases(
        "temporal shift at zero interval",
        (1usize..16).prop_flat_map(|d| {
            (
                prop::collection::vec(-5.0f64..5.0, d),
                prop::collection::vec(-5.0f64..5.0, d),
            )
        }),
        |(emb, drift)| {
            prop_assert_eq!(temporal_shift_values(&emb, &drift, 0.0).unwrap(), emb);
            Ok(())
        },
    )
}

fn intensity_positivity() -> (String, bool) {
    run_cases(
        "intensity positivity",
        prop::collection::vec(-30.0f64..30.0, 16),
        |xs| {
            let lam = intensity(&IntensityInputs {
                steady_user: &xs[0..4],
                steady_item: &xs[4..8],
                dynamic_user: &xs[8..12],
                dynamic_item: &xs[12..16],
            })
            .unwrap();
            prop_assert!(lam > 0.0 && lam.is_finite());
            prop_assert!(lam >= softplus(-1e4));
            Ok(())
        },
    )
}

fn ranking_invariance() -> (String, bool) {
    run_cases(
        "ranking under uniform scaling",
        (prop::collection::vec(1e-6f64..50.0, 1..30), 1e-3f64..1e3),
        |(scores, c)| {
            let scaled: Vec<f64> = scores.iter().map(|s| c * s).collect();
            prop_assert_eq!(ranking(&scaled), ranking(&scores));
            Ok(())
        },
    )
}

#[test]
fn criterion_7_structural_invariants() {
    let started = Instant::now();
    let checks = [
        snapshot_monotonicity(),
        t_batch_recurrence(),
        tal_permutation_invariance(),
        softmax_normalization(),
        shift_identity(),
        intensity_positivity(),
        ranking_invariance(),
    ];
    let pass = checks.iter().all(|(_, ok)| *ok) && within(started, Duration::from_secs(120));
    let summary: Vec<&str> = checks.iter().map(|(s, _)| s.as_str()).collect();
    report(
        7,
        pass,
        &format!("{CASES} cases each: {}; {:.1?}", summary.join(", "), started.elapsed()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

fn metric_stream(seed: u64) -> Vec<u8> {
    let net = simulate(&HawkesSpec::toy(), seed).unwrap();
    let mut out = Vec::new();
    let trained = train(&net, IdMap::identity(2, 3), &toy_config(seed), &mut |r| {
        serde_json::to_writer(&mut out, r).unwrap();
        out.push(b'\n');
    })
    .unwrap();
    let report = evaluate(
        &trained.model,
        &trained.prepared.stream,
        trained.prepared.splits.test_range(),
        true,
    )
    .unwrap();
    serde_json::to_writer(&mut out, &report).unwrap();
    out.push(b'\n');
    out
}

#[test]
fn criterion_8_determinism() {
    let started = Instant::now();
    let (a, b) = std::thread::scope(|s| {
        let first = s.spawn(|| metric_stream(11));
        let second = s.spawn(|| metric_stream(11));
        (first.join().unwrap(), second.join().unwrap())
    });
    let pass = !a.is_empty() && a == b;
    report(
        8,
        pass,
        &format!(
            "{} lines, {} bytes each, identical: {}; {:.1?}",
            a.iter().filter(|&&c| c == b'\n').count(),
            a.len(),
            a == b,
            started.elapsed()
        ),
    );
    assert!(pass);
}
