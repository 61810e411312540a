//! Multivariate Hawkes ground truth: exact intensities, Ogata thinning and
//! the time-rescaling goodness-of-fit check.
//!
//! Each user runs an independent process over the items; an event on item
//! `w` excites item `v` of the same user by `α[v][w] e^{−β s}`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::data::{Interaction, TemporalNetwork};
use crate::error::{DsppError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct HawkesSpec {
    pub users: usize,
    pub items: usize,
    /// `μ[u][v]`, row-major `users × items`.
    pub base: Vec<f64>,
    /// `α[v][w]`, row-major `items × items`.
    pub excitation: Vec<f64>,
    pub decay: f64,
    pub horizon: f64,
}

impl HawkesSpec {
    /// 2 users × 3 items; pair (0, 1) has ten times the base rate of the
    /// rest, each item excites itself, and the horizon gives about 2,000
    /// events.
    pub fn toy() -> Self {
        let mut base = vec![0.05; 6];
        base[1] = 0.5;
        let mut excitation = vec![0.0; 9];
        for v in 0..3 {
            excitation[v * 3 + v] = 0.2;
        }
        HawkesSpec {
            users: 2,
            items: 3,
            base,
            excitation,
            decay: 1.0,
            horizon: 2130.0,
        }
    }

    pub fn base_rate(&self, user: usize, item: usize) -> f64 {
        self.base[user * self.items + item]
    }

    pub fn alpha(&self, target: usize, source: usize) -> f64 {
        self.excitation[target * self.items + source]
    }

    /// Largest eigenvalue modulus of the branching matrix `α / β`.
    pub fn spectral_radius(&self) -> f64 {
        if self.items == 0 {
            return 0.0;
        }
        let m = DMatrix::from_row_slice(self.items, self.items, &self.excitation) / self.decay;
        m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 {
            return Err(DsppError::InvalidArgument("Hawkes spec needs users and items".into()));
        }
        if self.base.len() != self.users * self.items || self.excitation.len() != self.items * self.items {
            return Err(DsppError::InvalidArgument(
                "Hawkes parameter tables have the wrong size".into(),
            ));
        }
        let all_ok = |xs: &[f64]| xs.iter().all(|x| x.is_finite() && *x >= 0.0);
        if !all_ok(&self.base) || !all_ok(&self.excitation) {
            return Err(DsppError::InvalidArgument(
                "Hawkes rates must be finite and non-negative".into(),
            ));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) || !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(DsppError::InvalidArgument(format!(
                "decay {} must be positive and horizon {} non-negative",
                self.decay, self.horizon
            )));
        }
        let rho = self.spectral_radius();
        if rho >= 1.0 {
            return Err(DsppError::UnstableSpec(rho));
        }
        Ok(())
    }

    /// Parses flat `key = value` text. `base` and `self_excitation` /
    /// `cross_excitation` set defaults; `base.U.V` and `excitation.V.W`
    /// override single entries.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut scalars: BTreeMap<String, String> = BTreeMap::new();
        let mut pairs: Vec<(String, usize, usize, f64)> = Vec::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| DsppError::Config(format!("spec line {}: {msg}", k + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            let parts: Vec<&str> = key.split('.').collect();
            match parts.as_slice() {
                [name @ ("base" | "excitation"), a, b] => {
                    let a = a.parse().map_err(|_| bad("bad index"))?;
                    let b = b.parse().map_err(|_| bad("bad index"))?;
                    let x = value.parse().map_err(|_| bad("bad rate"))?;
                    pairs.push((name.to_string(), a, b, x));
                }
                [name @ ("users" | "items" | "decay" | "horizon" | "base" | "self_excitation" | "cross_excitation")] => {
                    scalars.insert(name.to_string(), value.to_string());
                }
                _ => return Err(bad(&format!("unknown key {key:?}"))),
            }
        }
        fn get<T: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str, default: T) -> Result<T> {
            m.get(k).map_or(Ok(default), |v| {
                v.parse()
                    .map_err(|_| DsppError::Config(format!("invalid value {v:?} for {k}")))
            })
        }
        let toy = HawkesSpec::toy();
        let users = get(&scalars, "users", toy.users)?;
        let items = get(&scalars, "items", toy.items)?;
        let base_default: f64 = get(&scalars, "base", 0.05)?;
        let self_ex: f64 = get(&scalars, "self_excitation", 0.0)?;
        let cross_ex: f64 = get(&scalars, "cross_excitation", 0.0)?;
        let mut spec = HawkesSpec {
            users,
            items,
            base: vec![base_default; users * items],
            excitation: (0..items * items)
                .map(|k| if k / items == k % items { self_ex } else { cross_ex })
                .collect(),
            decay: get(&scalars, "decay", toy.decay)?,
            horizon: get(&scalars, "horizon", toy.horizon)?,
        };
        for (name, a, b, x) in pairs {
            let (rows, cols, table) = match name.as_str() {
                "base" => (users, items, &mut spec.base),
                _ => (items, items, &mut spec.excitation),
            };
            if a >= rows || b >= cols {
                return Err(DsppError::Config(format!("{name}.{a}.{b} is out of range")));
            }
            table[a * cols + b] = x;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Text form accepted by [`HawkesSpec::from_text`], one entry per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "users = {}\nitems = {}", self.users, self.items);
        let _ = writeln!(out, "decay = {}\nhorizon = {}", self.decay, self.horizon);
        for u in 0..self.users {
            for v in 0..self.items {
                let _ = writeln!(out, "base.{u}.{v} = {}", self.base_rate(u, v));
            }
        }
        for v in 0..self.items {
            for w in 0..self.items {
                let _ = writeln!(out, "excitation.{v}.{w} = {}", self.alpha(v, w));
            }
        }
        out
    }
}

/// `μ[u][v] + Σ_h α[v][v_h] e^{−β(t − t_h)}` over the user's own past events
/// `history = [(item, time)]`; entries at or after `t` are ignored.
pub fn hawkes_intensity(spec: &HawkesSpec, history: &[(usize, f64)], user: usize, item: usize, t: f64) -> f64 {
    spec.base_rate(user, item)
        + history
            .iter()
            .filter(|&&(_, th)| th < t)
            .map(|&(w, th)| spec.alpha(item, w) * (-spec.decay * (t - th)).exp())
            .sum::<f64>()
}

/// One proposal of the thinning sampler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThinningStep {
    pub user: usize,
    pub time: f64,
    /// Dominating rate in force when the proposal was drawn.
    pub bound: f64,
    /// True total intensity of the user at the proposal.
    pub intensity: f64,
    pub accepted: bool,
}

/// Events of all users merged in time order (ties by user), plus every
/// thinning proposal.
pub fn simulate_traced(spec: &HawkesSpec, seed: u64) -> Result<(TemporalNetwork, Vec<ThinningStep>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    let mut trace = Vec::new();
    let beta = spec.decay;
    for user in 0..spec.users {
        // decayed[w] = Σ over past events on item w of e^{−β(t − t_h)}
        let mut decayed = vec![0.0; spec.items];
        let mut t = 0.0;
        let rates = |decayed: &[f64]| -> Vec<f64> {
            (0..spec.items)
                .map(|v| spec.base_rate(user, v) + (0..spec.items).map(|w| spec.alpha(v, w) * decayed[w]).sum::<f64>())
                .collect()
        };
        loop {
            let bound: f64 = rates(&decayed).iter().sum();
            if bound <= 0.0 {
                break;
            }
            let wait = Exp::new(bound).expect("positive rate").sample(&mut rng);
            let next = t + wait;
            if next >= spec.horizon {
                break;
            }
            let fade = (-beta * wait).exp();
            decayed.iter_mut().for_each(|x| *x *= fade);
            t = next;
            let lam = rates(&decayed);
            let total: f64 = lam.iter().sum();
            let accepted = rng.random::<f64>() * bound <= total;
            trace.push(ThinningStep {
                user,
                time: t,
                bound,
                intensity: total,
                accepted,
            });
            if !accepted {
                continue;
            }
            let mut pick = rng.random::<f64>() * total;
            let mut item = spec.items - 1;
            for (v, &l) in lam.iter().enumerate() {
                if pick < l {
                    item = v;
                    break;
                }
                pick -= l;
            }
            decayed[item] += 1.0;
            events.push(Interaction { user, item, time: t });
        }
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.user.cmp(&b.user)));
    Ok((TemporalNetwork::new(spec.users, spec.items, events)?, trace))
}

/// Ogata-thinning sample of the spec's process on `[0, T)`.
pub fn simulate(spec: &HawkesSpec, seed: u64) -> Result<TemporalNetwork> {
    simulate_traced(spec, seed).map(|(net, _)| net)
}

/// Compensator increments of each user's total intensity between
/// consecutive events (from time 0 for the first). Under the true process
/// these are i.i.d. Exp(1).
pub fn rescaled_intervals(spec: &HawkesSpec, net: &TemporalNetwork) -> Result<Vec<f64>> {
    spec.validate()?;
    if (net.users(), net.items()) != (spec.users, spec.items) {
        return Err(DsppError::InvalidArgument("network does not match the spec".into()));
    }
    let beta = spec.decay;
    let mut out = Vec::with_capacity(net.len());
    for user in 0..spec.users {
        let base: f64 = (0..spec.items).map(|v| spec.base_rate(user, v)).sum();
        // column sums of α: total excitation produced by one event on item w
        let kick: Vec<f64> = (0..spec.items)
            .map(|w| (0..spec.items).map(|v| spec.alpha(v, w)).sum())
            .collect();
        let mut excite = 0.0; // Σ_h kick[w_h] e^{−β(t − t_h)}
        let mut t = 0.0;
        for &k in net.user_indices(user) {
            let x = net.interactions()[k];
            let dt = x.time - t;
            let fade = (-beta * dt).exp();
            out.push(base * dt + excite * (1.0 - fade) / beta);
            excite = excite * fade + kick[x.item];
            t = x.time;
        }
    }
    Ok(out)
}

/// Kolmogorov–Smirnov distance of `samples` to Exp(1) and its asymptotic
/// p-value with Stephens' small-sample correction.
pub fn ks_exponential(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(DsppError::Empty("KS sample"));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - (-x.max(0.0)).exp();
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    Ok((d, kolmogorov_survival(lambda)))
}

/// `P(K > λ)` for the Kolmogorov distribution.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-2.0 * k * k * lambda * lambda).exp();
        p += if k as usize % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}
