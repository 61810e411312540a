#![allow(dead_code)]

use dspp::numerics::{ParamId, ParamStore};

/// Central finite differences of `f` with respect to every entry of `id`.
pub fn finite_diff(store: &ParamStore, id: ParamId, step: f64, f: &dyn Fn(&ParamStore) -> f64) -> Vec<f64> {
    let mut work = store.clone();
    let n = store.get(id).numel();
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let orig = work.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = orig + step;
        let up = f(&work);
        work.get_mut(id).data_mut()[j] = orig - step;
        let down = f(&work);
        work.get_mut(id).data_mut()[j] = orig;
        out.push((up - down) / (2.0 * step));
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err_floor(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    rel_err_floor(a, b, 1e-12)
}

/// Worst relative error between tape gradients of the scalar built by
/// `build` and central differences, over the listed parameters. Returns the
/// offending parameter's name alongside.
pub fn worst_grad_error(
    store: &ParamStore,
    ids: &[ParamId],
    step: f64,
    floor: f64,
    build: &dyn Fn(&mut dspp::numerics::Tape) -> dspp::numerics::Var,
) -> (f64, String) {
    let mut tape = dspp::numerics::Tape::new(store);
    let root = build(&mut tape);
    let mut grads = dspp::numerics::ParamGrads::new();
    tape.backward(root, &mut grads).unwrap();
    let value = |s: &ParamStore| {
        let mut t = dspp::numerics::Tape::new(s);
        let r = build(&mut t);
        t.value(r).item()
    };
    ids.iter()
        .map(|&id| {
            let a = grads.dense(store, id);
            let n = finite_diff(store, id, step, &value);
            (rel_err_floor(&a, &n, floor), store.name(id).to_string())
        })
        .fold((0.0, String::new()), |acc, x| if x.0 > acc.0 { x } else { acc })
}
