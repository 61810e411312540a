use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{DsppError, Result};
use crate::tpp::QuadratureConfig;

/// Hyperparameters of a training run. Defaults follow the published setup,
/// with `H = 20` and `M = 128` taken from the searched grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mc_samples: usize,
    pub negatives: usize,
    pub layers: usize,
    pub heads: usize,
    pub snapshots: usize,
    pub history: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Snapshots of backpropagation through the fusion recurrence.
    pub tbptt: usize,
    /// Epochs without a validation MRR improvement before stopping.
    pub patience: usize,
    pub workers: usize,
    pub quadrature_points: usize,
    /// Longest predicted interval, in mean inter-event intervals.
    pub quadrature_cap: f64,
    /// Feed the previous dynamic embedding (detached) into the update GRUs
    /// instead of the static row.
    pub carry_dynamic_state: bool,
    pub train_ratio: f64,
    pub valid_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 128,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 1e-5,
            mc_samples: 64,
            negatives: 10,
            layers: 2,
            heads: 8,
            snapshots: 128,
            history: 20,
            epochs: 20,
            seed: 0,
            tbptt: 8,
            patience: 5,
            workers: 1,
            quadrature_points: 1024,
            quadrature_cap: 50.0,
            carry_dynamic_state: false,
            train_ratio: 0.8,
            valid_ratio: 0.1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DsppError::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 20] = [
        "dim",
        "batch_size",
        "lr",
        "weight_decay",
        "mc_samples",
        "negatives",
        "layers",
        "heads",
        "snapshots",
        "history",
        "epochs",
        "seed",
        "tbptt",
        "patience",
        "workers",
        "quadrature_points",
        "quadrature_cap",
        "carry_dynamic_state",
        "train_ratio",
        "valid_ratio",
    ];

    /// Sets one key from its textual value; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dim" => self.dim = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "mc_samples" => self.mc_samples = parse(key, v)?,
            "negatives" => self.negatives = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "snapshots" => self.snapshots = parse(key, v)?,
            "history" => self.history = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "tbptt" => self.tbptt = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "quadrature_points" => self.quadrature_points = parse(key, v)?,
            "quadrature_cap" => self.quadrature_cap = parse(key, v)?,
            "carry_dynamic_state" => self.carry_dynamic_state = parse(key, v)?,
            "train_ratio" => self.train_ratio = parse(key, v)?,
            "valid_ratio" => self.valid_ratio = parse(key, v)?,
            other => return Err(DsppError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text over `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DsppError::Config(format!("line {}: expected key = value", k + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// The full configuration in the same `key = value` form.
    pub fn to_text(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", json[key]);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("batch_size", self.batch_size),
            ("layers", self.layers),
            ("heads", self.heads),
            ("snapshots", self.snapshots),
            ("history", self.history),
            ("tbptt", self.tbptt),
            ("patience", self.patience),
            ("workers", self.workers),
            ("quadrature_points", self.quadrature_points),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(DsppError::Config(format!("{k} must be positive")));
        }
        if self.mc_samples < 2 {
            return Err(DsppError::Config("mc_samples must be at least 2".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(DsppError::Config(format!(
                "heads {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(DsppError::Config(
                "lr must be positive and weight_decay non-negative".into(),
            ));
        }
        if !(self.quadrature_cap > 0.0 && self.quadrature_cap.is_finite()) {
            return Err(DsppError::Config("quadrature_cap must be positive".into()));
        }
        let (a, b) = (self.train_ratio, self.valid_ratio);
        if !(a > 0.0 && b >= 0.0 && a + b <= 1.0 + 1e-12) {
            return Err(DsppError::Config(format!("split ratios train {a}, valid {b}")));
        }
        Ok(())
    }

    pub fn quadrature(&self) -> QuadratureConfig {
        QuadratureConfig {
            points_per_unit: self.quadrature_points,
            cap: self.quadrature_cap,
            ..QuadratureConfig::default()
        }
    }

    pub(crate) fn split_ratios(&self) -> (f64, f64, f64) {
        let test = (1.0 - self.train_ratio - self.valid_ratio).max(0.0);
        (self.train_ratio, self.valid_ratio, test)
    }
}
