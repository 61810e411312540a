use dspp::data::{IdMap, TemporalNetwork};
use dspp::embedding::Node;
use dspp::model::Model;
use dspp::synth::{simulate, HawkesSpec};
use dspp::train_eval::{
    evaluate, rank_of, ranking, read_checkpoint, train, write_checkpoint, Prepared, Scorer, StopReason, TrainConfig,
};
use proptest::prelude::*;

fn short_toy(horizon: f64, seed: u64) -> TemporalNetwork {
    let spec = HawkesSpec {
        horizon,
        ..HawkesSpec::toy()
    };
    simulate(&spec, seed).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        dim: 8,
        heads: 2,
        batch_size: 32,
        lr: 0.01,
        mc_samples: 16,
        snapshots: 16,
        history: 8,
        epochs: 3,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn bits(model: &Model) -> Vec<u64> {
    model
        .store
        .iter()
        .flat_map(|(_, p)| p.value.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let net = short_toy(200.0, 1);
    let cfg = TrainConfig {
        epochs: 0,
        ..small_config()
    };
    let out = train(&net, IdMap::identity(2, 3), &cfg, &mut |_| {}).unwrap();
    let fresh = Prepared::new(&net, &cfg)
        .unwrap()
        .initial_model(IdMap::identity(2, 3), &cfg)
        .unwrap();
    assert_eq!(bits(&out.model), bits(&fresh));
    assert!(out.trace.is_empty());
    assert_eq!(out.stop, StopReason::Completed);
}

#[test]
fn training_is_deterministic_across_runs_and_workers() {
    let net = short_toy(300.0, 2);
    let cfg = small_config();
    let mut lines_a = Vec::new();
    let a = train(&net, IdMap::identity(2, 3), &cfg, &mut |r| {
        lines_a.push(serde_json::to_string(r).unwrap())
    })
    .unwrap();
    let mut lines_b = Vec::new();
    let b = train(&net, IdMap::identity(2, 3), &cfg, &mut |r| {
        lines_b.push(serde_json::to_string(r).unwrap())
    })
    .unwrap();
    let parallel = TrainConfig {
        workers: 3,
        ..cfg.clone()
    };
    let c = train(&net, IdMap::identity(2, 3), &parallel, &mut |_| {}).unwrap();
    assert_eq!(lines_a, lines_b);
    assert_eq!(lines_a.len(), cfg.epochs);
    assert_eq!(bits(&a.model), bits(&b.model));
    assert_eq!(bits(&a.model), bits(&c.model));
    assert_eq!(a.trace, c.trace);
}

#[test]
fn training_lowers_the_loss() {
    let net = short_toy(600.0, 3);
    let cfg = TrainConfig {
        epochs: 20,
        patience: 20,
        ..small_config()
    };
    let out = train(&net, IdMap::identity(2, 3), &cfg, &mut |_| {}).unwrap();
    let first = out.trace.first().unwrap().train_nll;
    let last = out.trace.last().unwrap().train_nll;
    assert_eq!(out.trace.len(), 20);
    assert!(last < first, "first {first}, last {last}");
}

#[test]
fn carried_state_variant_trains() {
    let net = short_toy(200.0, 4);
    let cfg = TrainConfig {
        carry_dynamic_state: true,
        epochs: 2,
        ..small_config()
    };
    let out = train(&net, IdMap::identity(2, 3), &cfg, &mut |_| {}).unwrap();
    assert!(out.trace.iter().all(|r| r.train_nll.is_finite()));
    let report = evaluate(
        &out.model,
        &out.prepared.stream,
        out.prepared.splits.test_range(),
        false,
    )
    .unwrap();
    assert!(report.mrr > 0.0 && report.mrr <= 1.0);
}

fn zero_model(users: usize, items: usize) -> Model {
    let mut m = Model::new(&small_config(), IdMap::identity(users, items), 1.0, 1.0).unwrap();
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        m.store.get_mut(id).data_mut().fill(0.0);
    }
    m
}

#[test]
fn all_zero_model_ranks_by_id() {
    let model = zero_model(2, 5);
    let net = TemporalNetwork::new(2, 5, vec![]).unwrap();
    let mut scorer = Scorer::new(&model, &net, 3.0).unwrap();
    assert_eq!(scorer.predict_item(1, 2.0).unwrap(), vec![0, 1, 2, 3, 4]);
    assert!(scorer.predict_item(2, 2.0).is_err());
}

#[test]
fn frozen_constant_intensity_gives_exponential_means() {
    // all-zero parameters give λ = softplus(0) = ln 2 everywhere
    let model = zero_model(1, 1);
    let net = TemporalNetwork::new(1, 1, vec![]).unwrap();
    let mut scorer = Scorer::new(&model, &net, 1.0).unwrap();
    let p = scorer.predict_time(0, 0, 0.5, &model.config.quadrature()).unwrap();
    let want = 1.0 / std::f64::consts::LN_2;
    assert!((p.expected / want - 1.0).abs() < 0.01, "{p:?}");
    assert!(!p.truncated);
}

#[test]
fn evaluation_is_sequential_and_deterministic() {
    let net = short_toy(300.0, 6);
    let cfg = TrainConfig {
        epochs: 1,
        ..small_config()
    };
    let out = train(&net, IdMap::identity(2, 3), &cfg, &mut |_| {}).unwrap();
    let stream = &out.prepared.stream;
    let range = out.prepared.splits.test_range();
    let a = evaluate(&out.model, stream, range.clone(), true).unwrap();
    let b = evaluate(&out.model, stream, range.clone(), true).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.ranks.len(), range.len());
    assert!(a.mrr > 0.0 && a.mrr <= 1.0 && (0.0..=1.0).contains(&a.recall_at_10));
    assert!(a.rmse_hours.unwrap() >= 0.0);

    let mut scorer = Scorer::new(&out.model, stream, stream.horizon()).unwrap();
    let mut last_seen = [f64::NEG_INFINITY; 5];
    for k in 0..stream.len() {
        let x = stream.interactions()[k];
        let scores = scorer.intensities(x.user, x.time).unwrap();
        if k >= range.start {
            assert_eq!(rank_of(&scores, x.item), a.ranks[k - range.start]);
        }
        scorer.observe_next().unwrap();
        for (slot, node) in [Node::User(x.user), Node::Item(x.item)].into_iter().enumerate() {
            let t = scorer.state().get(node).unwrap().updated_at;
            let key = if slot == 0 { x.user } else { 2 + x.item };
            assert!(t >= last_seen[key]);
            last_seen[key] = t;
        }
    }
}

#[test]
fn checkpoint_reload_reproduces_evaluation() {
    let net = short_toy(250.0, 7);
    let cfg = TrainConfig {
        epochs: 1,
        ..small_config()
    };
    let out = train(&net, IdMap::identity(2, 3), &cfg, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    write_checkpoint(&out.model, &path).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(bits(&back), bits(&out.model));
    let range = out.prepared.splits.test_range();
    assert_eq!(
        evaluate(&out.model, &out.prepared.stream, range.clone(), false).unwrap(),
        evaluate(&back, &out.prepared.stream, range, false).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ranking_ignores_uniform_monotone_transforms(
        scores in prop::collection::vec(1e-6f64..50.0, 1..30),
        c in 1e-3f64..1e3,
    ) {
        let base = ranking(&scores);
        let scaled: Vec<f64> = scores.iter().map(|s| c * s).collect();
        let logged: Vec<f64> = scores.iter().map(|s| s.ln()).collect();
        let total: f64 = scores.iter().sum();
        let normalized: Vec<f64> = scores.iter().map(|s| s / total).collect();
        prop_assert_eq!(&ranking(&scaled), &base);
        prop_assert_eq!(&ranking(&logged), &base);
        prop_assert_eq!(&ranking(&normalized), &base);
        for (pos, &item) in base.iter().enumerate() {
            prop_assert_eq!(rank_of(&scores, item), pos + 1);
        }
    }
}
