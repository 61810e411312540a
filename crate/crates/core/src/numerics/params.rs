use std::collections::BTreeMap;

use super::value::Value;
use crate::error::{DsppError, Result};

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Value,
}

/// Registered learnable tensors, addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Value) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Value {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Value {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Gradient buffer for one parameter. Embedding tables only touch a few rows
/// per tape, so row lookups accumulate sparsely.
#[derive(Clone, Debug, PartialEq)]
pub enum GradBuf {
    Dense(Vec<f64>),
    Rows {
        cols: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl GradBuf {
    /// Materializes the buffer against a parameter of `numel` entries.
    pub fn to_dense(&self, numel: usize) -> Vec<f64> {
        match self {
            GradBuf::Dense(g) => g.clone(),
            GradBuf::Rows { cols, rows } => {
                let mut out = vec![0.0; numel];
                for (&r, g) in rows {
                    for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                        *o += x;
                    }
                }
                out
            }
        }
    }

    fn add_dense(&mut self, g: &[f64]) {
        match self {
            GradBuf::Dense(acc) => {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            GradBuf::Rows { cols, rows } => {
                let mut acc = vec![0.0; g.len()];
                for (&r, rg) in rows.iter() {
                    for (a, x) in acc[r * *cols..(r + 1) * *cols].iter_mut().zip(rg) {
                        *a += x;
                    }
                }
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
                *self = GradBuf::Dense(acc);
            }
        }
    }

    fn add_row(&mut self, row: usize, g: &[f64]) {
        match self {
            GradBuf::Dense(acc) => {
                let c = g.len();
                for (a, x) in acc[row * c..(row + 1) * c].iter_mut().zip(g) {
                    *a += x;
                }
            }
            GradBuf::Rows { rows, .. } => {
                let slot = rows.entry(row).or_insert_with(|| vec![0.0; g.len()]);
                for (a, x) in slot.iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
    }

    fn for_each(&self, mut f: impl FnMut(f64)) {
        match self {
            GradBuf::Dense(g) => g.iter().copied().for_each(&mut f),
            GradBuf::Rows { rows, .. } => rows.values().flatten().copied().for_each(&mut f),
        }
    }
}

/// Accumulated parameter gradients. Accumulation is additive: running a
/// backward pass twice into the same buffer doubles every entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    bufs: BTreeMap<ParamId, GradBuf>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&GradBuf> {
        self.bufs.get(&id)
    }

    /// Dense gradient for `id`, zeros if nothing flowed to it.
    pub fn dense(&self, store: &ParamStore, id: ParamId) -> Vec<f64> {
        let numel = store.get(id).numel();
        self.bufs
            .get(&id)
            .map(|b| b.to_dense(numel))
            .unwrap_or_else(|| vec![0.0; numel])
    }

    pub fn add_dense(&mut self, id: ParamId, g: &[f64]) {
        match self.bufs.get_mut(&id) {
            Some(buf) => buf.add_dense(g),
            None => {
                self.bufs.insert(id, GradBuf::Dense(g.to_vec()));
            }
        }
    }

    pub fn add_row(&mut self, id: ParamId, row: usize, g: &[f64]) {
        self.bufs
            .entry(id)
            .or_insert_with(|| GradBuf::Rows {
                cols: g.len(),
                rows: BTreeMap::new(),
            })
            .add_row(row, g);
    }

    /// Adds every buffer of `other` into `self`.
    pub fn merge(&mut self, other: &ParamGrads) {
        for (&id, buf) in &other.bufs {
            match buf {
                GradBuf::Dense(g) => self.add_dense(id, g),
                GradBuf::Rows { rows, .. } => {
                    for (&r, g) in rows {
                        self.add_row(id, r, g);
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for buf in self.bufs.values_mut() {
            match buf {
                GradBuf::Dense(g) => g.iter_mut().for_each(|x| *x *= c),
                GradBuf::Rows { rows, .. } => rows.values_mut().flatten().for_each(|x| *x *= c),
            }
        }
    }

    /// Fails on the first parameter carrying a non-finite gradient entry.
    pub fn check_finite(&self, store: &ParamStore) -> Result<()> {
        for (&id, buf) in &self.bufs {
            let mut ok = true;
            buf.for_each(|x| ok &= x.is_finite());
            if !ok {
                return Err(DsppError::NonFinite(format!(
                    "gradient of parameter `{}`",
                    store.name(id)
                )));
            }
        }
        Ok(())
    }
}
