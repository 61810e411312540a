mod common;

use common::worst_grad_error;
use dspp::ase::{attend, attentive_interaction, temporal_shift, AseParams, HistoryEntry};
use dspp::data::InteractionSequence;
use dspp::embedding::{NodeTable, TimeEmbedding};
use dspp::numerics::{Initializer, ParamStore, Tape};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(dim: usize, heads: usize, seed: u64) -> (ParamStore, NodeTable, TimeEmbedding, AseParams) {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let tables = NodeTable::register(&mut store, &mut init, 3, 6, dim).unwrap();
    let time = TimeEmbedding::register(&mut store, dim);
    let params = AseParams::register(&mut store, &mut init, dim, heads).unwrap();
    (store, tables, time, params)
}

fn history() -> InteractionSequence {
    InteractionSequence {
        user: 1,
        entries: vec![(0, 0.5), (3, 1.25), (5, 2.0), (3, 3.5)],
    }
}

#[test]
fn attention_output_gradient() {
    for heads in [1, 2, 4] {
        let (store, tables, time, params) = setup(4, heads, 5 + heads as u64);
        let h = history();
        let build = |t: &mut Tape| {
            let a = attentive_interaction(t, &tables, &time, &params, 1, 2, 4.0, &h).unwrap();
            let sq = t.square(a.output);
            t.sum(sq)
        };
        let ids: Vec<_> = store.ids().collect();
        let (err, name) = worst_grad_error(&store, &ids, 1e-6, 1e-8, &build);
        assert!(err < 1e-5, "heads {heads}, {name}: {err:e}");
    }
}

#[test]
fn update_gradient_through_both_grus() {
    let (store, tables, time, params) = setup(4, 2, 9);
    let h = history();
    let build = |t: &mut Tape| {
        let a = attentive_interaction(t, &tables, &time, &params, 1, 2, 4.0, &h).unwrap();
        let u = tables.lookup(t, dspp::embedding::Node::User(1)).unwrap();
        let v = tables.lookup(t, dspp::embedding::Node::Item(2)).unwrap();
        let (nu, nv) = dspp::ase::update_dynamic(t, &params, u, v, a.output).unwrap();
        let w = t.vector(vec![0.3, -0.2, 0.1, 0.05]);
        let su = temporal_shift(t, nu, w, 1.5).unwrap();
        t.dot(su, nv).unwrap()
    };
    let ids: Vec<_> = store.ids().collect();
    let (err, name) = worst_grad_error(&store, &ids, 1e-6, 1e-8, &build);
    assert!(err < 1e-5, "{name}: {err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn attention_weights_normalize(seed in any::<u64>(), n in 1usize..8, heads in prop::sample::select(vec![1usize, 2, 4])) {
        let (store, tables, time, params) = setup(4, heads, seed);
        let entries: Vec<(usize, f64)> = (0..n).map(|k| ((seed as usize + k) % 6, k as f64 * 0.7)).collect();
        let h = InteractionSequence { user: 0, entries };
        let mut t = Tape::new(&store);
        let a = attentive_interaction(&mut t, &tables, &time, &params, 0, 1, n as f64, &h).unwrap();
        let w = t.value(a.weights.unwrap());
        for g in 0..heads {
            prop_assert!((w.row(g).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn order_enters_only_through_positions(seed in any::<u64>(), n in 2usize..6) {
        let (store, tables, time, params) = setup(4, 2, seed);
        let entries: Vec<HistoryEntry> = (0..n)
            .map(|k| HistoryEntry { item: k, time: 0.3 * k as f64, position: k + 1 })
            .collect();
        let mut permuted = entries.clone();
        permuted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let q = Some((n, 0.3 * (n - 1) as f64));
        let mut t = Tape::new(&store);
        let a = attend(&mut t, &tables, &time, &params, 2, 1, 5.0, &entries, q).unwrap();
        let b = attend(&mut t, &tables, &time, &params, 2, 1, 5.0, &permuted, q).unwrap();
        for (x, y) in t.value(a.output).data().iter().zip(t.value(b.output).data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_interval_shift_is_identity(xs in prop::collection::vec(-5.0f64..5.0, 1..8), ws in prop::collection::vec(-5.0f64..5.0, 8)) {
        let ws = &ws[..xs.len()];
        prop_assert_eq!(dspp::ase::temporal_shift_values(&xs, ws, 0.0).unwrap(), xs.clone());
    }
}
