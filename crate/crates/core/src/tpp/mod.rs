//! Intensity, survival and expected-time quadrature, the Monte Carlo
//! estimator of the intensity integral, and negative sampling.

mod objective;

pub use objective::{
    interaction_terms, nll, nll_end_to_end, Forward, InteractionTerms, LeafSteady, LikelihoodEstimate, McSettings,
    SteadySource, TapeSteady,
};

use rand::seq::index;
use rand::Rng;

use crate::error::{dim_err, DsppError, Result};
use crate::numerics::{softplus, Tape, Var};

/// The four embeddings entering a pair's intensity.
#[derive(Clone, Copy, Debug)]
pub struct IntensityInputs<'a> {
    pub steady_user: &'a [f64],
    pub steady_item: &'a [f64],
    pub dynamic_user: &'a [f64],
    pub dynamic_item: &'a [f64],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `softplus(steady_u · steady_v + dynamic_u · dynamic_v)`.
pub fn intensity(x: &IntensityInputs) -> Result<f64> {
    let d = x.steady_user.len();
    if [x.steady_item, x.dynamic_user, x.dynamic_item]
        .iter()
        .any(|v| v.len() != d)
    {
        return Err(dim_err("intensity", "all four embeddings must share a dimension"));
    }
    let all = [x.steady_user, x.steady_item, x.dynamic_user, x.dynamic_item];
    if all.iter().any(|v| v.iter().any(|e| !e.is_finite())) {
        return Err(DsppError::NonFinite("intensity inputs".into()));
    }
    Ok(softplus(intensity_logit(x)))
}

/// The argument of the softplus in [`intensity`].
pub fn intensity_logit(x: &IntensityInputs) -> f64 {
    dot(x.steady_user, x.steady_item) + dot(x.dynamic_user, x.dynamic_item)
}

/// Differentiable logit `su·sv + du·dv`.
pub fn intensity_logit_var(tape: &mut Tape, su: Var, sv: Var, du: Var, dv: Var) -> Result<Var> {
    let a = tape.dot(su, sv)?;
    let b = tape.dot(du, dv)?;
    tape.add(a, b)
}

/// `exp(−∫ λ)` over `[t_n, t_plus]` by the composite trapezoid rule on
/// `intervals` equal sub-intervals.
pub fn survival(lambda: impl Fn(f64) -> f64, t_n: f64, t_plus: f64, intervals: usize) -> Result<f64> {
    if t_plus < t_n {
        return Err(DsppError::InvalidArgument(format!(
            "survival end {t_plus} precedes start {t_n}"
        )));
    }
    if intervals == 0 {
        return Err(DsppError::InvalidArgument(
            "survival needs at least one interval".into(),
        ));
    }
    if t_plus == t_n {
        return Ok(1.0);
    }
    let h = (t_plus - t_n) / intervals as f64;
    let mut prev = lambda(t_n);
    let mut integral = 0.0;
    for k in 1..=intervals {
        let cur = lambda(t_n + h * k as f64);
        integral += 0.5 * h * (prev + cur);
        prev = cur;
    }
    Ok((-integral).exp())
}

/// Grid and stopping rule for the expected next-event time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureConfig {
    /// Trapezoid points per unit of (rescaled) time.
    pub points_per_unit: usize,
    /// Longest interval examined, in units of time.
    pub cap: f64,
    /// Survival level at which integration stops.
    pub threshold: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            points_per_unit: 1024,
            cap: 50.0,
            threshold: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimePrediction {
    /// Expected interval after `t_n`.
    pub expected: f64,
    /// Where integration stopped, relative to `t_n`.
    pub horizon: f64,
    /// Survival at the horizon.
    pub residual: f64,
    /// The cap was reached before survival fell below the threshold.
    pub truncated: bool,
}

/// `∫ (t − t_n) S(t) λ(t) dt` from `t_n`, accumulating the survival on the
/// same trapezoid grid. Integration stops once `S` drops below the threshold
/// or at the cap; the tail `(t_max − t_n)·S(t_max)` is added in either case.
pub fn expected_interval(lambda: impl Fn(f64) -> f64, t_n: f64, cfg: &QuadratureConfig) -> Result<TimePrediction> {
    if cfg.points_per_unit == 0
        || cfg.cap.is_nan()
        || cfg.cap <= 0.0
        || !(0.0..1.0).contains(&cfg.threshold)
        || cfg.threshold == 0.0
    {
        return Err(DsppError::InvalidArgument(format!("quadrature settings {cfg:?}")));
    }
    let h = 1.0 / cfg.points_per_unit as f64;
    let steps = (cfg.cap * cfg.points_per_unit as f64).ceil() as usize;
    let mut lam_prev = lambda(t_n);
    let mut cum = 0.0;
    let mut f_prev = 0.0; // (t − t_n)·S·λ at t_n
    let mut expected = 0.0;
    let mut s = 1.0;
    let mut tau = 0.0;
    for k in 1..=steps {
        tau = h * k as f64;
        let lam = lambda(t_n + tau);
        if !lam.is_finite() || lam < 0.0 {
            return Err(DsppError::NonFinite(format!("intensity {lam} at {}", t_n + tau)));
        }
        cum += 0.5 * h * (lam_prev + lam);
        s = (-cum).exp();
        let f = tau * s * lam;
        expected += 0.5 * h * (f_prev + f);
        lam_prev = lam;
        f_prev = f;
        if s < cfg.threshold {
            break;
        }
    }
    Ok(TimePrediction {
        expected: expected + tau * s,
        horizon: tau,
        residual: s,
        truncated: s >= cfg.threshold,
    })
}

/// `n` sorted timestamps in `[t, t_plus]`, one uniform draw per equal stratum.
pub fn stratified_times<R: Rng + ?Sized>(t: f64, t_plus: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(DsppError::InvalidArgument(format!(
            "{n} Monte Carlo samples; need at least 2"
        )));
    }
    if t_plus.is_nan() || t.is_nan() || t_plus <= t {
        return Err(DsppError::InvalidArgument(format!(
            "empty sampling interval [{t}, {t_plus}]"
        )));
    }
    let w = (t_plus - t) / n as f64;
    Ok((0..n).map(|k| t + w * (k as f64 + rng.random::<f64>())).collect())
}

/// Telescoping weights `t_k − t_{k−1}` for `k = 2..N`, paired with `t_k`.
pub fn telescoping_terms(times: &[f64]) -> (Vec<f64>, Vec<f64>) {
    times.windows(2).map(|w| (w[1], w[1] - w[0])).unzip()
}

/// `Σ_{k≥2} (t_k − t_{k−1}) λ̂(t_k)` over stratified samples.
pub fn mc_integral<R: Rng + ?Sized>(
    t: f64,
    t_plus: f64,
    n: usize,
    rng: &mut R,
    lambda_hat: impl Fn(f64) -> f64,
) -> Result<f64> {
    let times = stratified_times(t, t_plus, n, rng)?;
    let (at, widths) = telescoping_terms(&times);
    Ok(at.iter().zip(&widths).map(|(&tk, w)| w * lambda_hat(tk)).sum())
}

/// `n` distinct items drawn uniformly without replacement from all items but
/// `positive`.
pub fn sample_negatives<R: Rng + ?Sized>(
    positive: usize,
    item_count: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if positive >= item_count {
        return Err(DsppError::OutOfRange {
            what: "item",
            id: positive,
            count: item_count,
        });
    }
    if n >= item_count {
        return Err(DsppError::InvalidArgument(format!(
            "{n} negatives from {item_count} items"
        )));
    }
    Ok(index::sample(rng, item_count - 1, n)
        .into_iter()
        .map(|k| if k >= positive { k + 1 } else { k })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeros() -> Vec<f64> {
        vec![0.0; 3]
    }

    #[test]
    fn zero_embeddings_give_ln_two() {
        let z = zeros();
        let x = IntensityInputs {
            steady_user: &z,
            steady_item: &z,
            dynamic_user: &z,
            dynamic_item: &z,
        };
        assert!((intensity(&x).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn deep_negative_logit_stays_positive() {
        let (a, b, z) = (vec![-5.0, 5.0], vec![5.0, -5.0], vec![0.0, 0.0]);
        let x = IntensityInputs {
            steady_user: &a,
            steady_item: &b,
            dynamic_user: &z,
            dynamic_item: &z,
        };
        let lam = intensity(&x).unwrap();
        assert!(lam > 0.0);
        assert!((lam / (-50f64).exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dynamic_scaling_is_quadratic_in_the_logit() {
        let (su, sv) = (vec![0.3, -0.2], vec![0.1, 0.4]);
        let (du, dv) = (vec![0.5, 1.0], vec![-0.25, 0.75]);
        let c = 1.7;
        let (cu, cv): (Vec<f64>, Vec<f64>) = (du.iter().map(|x| c * x).collect(), dv.iter().map(|x| c * x).collect());
        let base = dot(&su, &sv);
        let scaled = IntensityInputs {
            steady_user: &su,
            steady_item: &sv,
            dynamic_user: &cu,
            dynamic_item: &cv,
        };
        let want = softplus(base + c * c * dot(&du, &dv));
        assert!((intensity(&scaled).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn intensity_rejects_bad_inputs() {
        let (a, b) = (vec![f64::NAN], vec![1.0]);
        let x = IntensityInputs {
            steady_user: &a,
            steady_item: &b,
            dynamic_user: &b,
            dynamic_item: &b,
        };
        assert!(intensity(&x).is_err());
        let c = vec![1.0, 2.0];
        let y = IntensityInputs {
            steady_user: &b,
            steady_item: &c,
            dynamic_user: &b,
            dynamic_item: &b,
        };
        assert!(intensity(&y).is_err());
    }

    #[test]
    fn survival_closed_forms() {
        let s = survival(|_| 2.0, 1.0, 1.5, 10).unwrap();
        assert!((s - (-1f64).exp()).abs() < 1e-6);
        assert_eq!(survival(|_| 7.0, 3.0, 3.0, 10).unwrap(), 1.0);
        let s = survival(|t| t, 0.0, 2.0, 1000).unwrap();
        assert!((s - (-2f64).exp()).abs() < 1e-4);
        assert!(survival(|_| 1.0, 2.0, 1.0, 10).is_err());
    }

    #[test]
    fn expected_interval_closed_forms() {
        let cfg = QuadratureConfig::default();
        let p = expected_interval(|_| 2.0, 3.0, &cfg).unwrap();
        assert!((p.expected / 0.5 - 1.0).abs() < 0.01, "{p:?}");
        assert!(!p.truncated);
        let p = expected_interval(|_| 0.1, 0.0, &cfg).unwrap();
        assert!((p.expected / 10.0 - 1.0).abs() < 0.01, "{p:?}");
        assert!(p.truncated);
        let p = expected_interval(|t| t, 0.0, &cfg).unwrap();
        let want = (std::f64::consts::PI / 2.0).sqrt();
        assert!((p.expected / want - 1.0).abs() < 0.01, "{p:?}");
    }

    #[test]
    fn stratified_samples_are_sorted_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ts = stratified_times(2.0, 5.0, 64, &mut rng).unwrap();
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
        assert!(ts.iter().all(|&t| (2.0..=5.0).contains(&t)));
        assert!(stratified_times(0.0, 1.0, 1, &mut rng).is_err());
        assert!(stratified_times(1.0, 1.0, 4, &mut rng).is_err());
    }

    #[test]
    fn constant_intensity_telescopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let times = stratified_times(0.0, 4.0, 10, &mut rng).unwrap();
        let (_, w) = telescoping_terms(&times);
        let total: f64 = w.iter().map(|x| 3.0 * x).sum();
        assert!((total - 3.0 * (times[9] - times[0])).abs() < 1e-12);
        let (at, w) = telescoping_terms(&[1.0, 1.5]);
        assert_eq!((at, w), (vec![1.5], vec![0.5]));
    }

    #[test]
    fn negatives_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ns = sample_negatives(7, 1000, 10, &mut rng).unwrap();
        let mut sorted = ns.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
        assert!(ns.iter().all(|&v| v != 7 && v < 1000));
        assert_eq!(sample_negatives(0, 2, 1, &mut rng).unwrap(), vec![1]);
        assert!(sample_negatives(0, 3, 3, &mut rng).is_err());
    }
}
