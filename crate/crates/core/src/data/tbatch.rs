use std::collections::HashMap;

use super::network::Interaction;
use crate::error::{DsppError, Result};

/// Partition of a chronological run of interactions into groups that share
/// no user or item and may therefore be processed in parallel.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TBatches {
    /// Indices into the input slice, ascending within each batch.
    pub batches: Vec<Vec<usize>>,
}

impl TBatches {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec<usize>> {
        self.batches.iter()
    }
}

/// Assigns every interaction to batch `1 + max(b(prev of user), b(prev of
/// item))` (1-based; 0 for an unseen node). Input must be time-sorted.
pub fn t_batches(xs: &[Interaction]) -> Result<TBatches> {
    if let Some(k) = xs.windows(2).position(|w| w[1].time < w[0].time) {
        return Err(DsppError::Unsorted(k + 1));
    }
    let mut user_batch: HashMap<usize, usize> = HashMap::new();
    let mut item_batch: HashMap<usize, usize> = HashMap::new();
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for (i, x) in xs.iter().enumerate() {
        let prev_u = user_batch.get(&x.user).copied().unwrap_or(0);
        let prev_i = item_batch.get(&x.item).copied().unwrap_or(0);
        let b = 1 + prev_u.max(prev_i);
        user_batch.insert(x.user, b);
        item_batch.insert(x.item, b);
        if batches.len() < b {
            batches.push(Vec::new());
        }
        batches[b - 1].push(i);
    }
    Ok(TBatches { batches })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xs(rows: &[(usize, usize)]) -> Vec<Interaction> {
        rows.iter()
            .enumerate()
            .map(|(k, &(user, item))| Interaction {
                user,
                item,
                time: k as f64,
            })
            .collect()
    }

    #[test]
    fn small_example() {
        let b = t_batches(&xs(&[(1, 1), (2, 2), (1, 2)])).unwrap();
        assert_eq!(b.batches, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn unsorted_input_is_rejected() {
        let mut v = xs(&[(0, 0), (1, 1)]);
        v[1].time = -1.0;
        assert!(matches!(t_batches(&v), Err(DsppError::Unsorted(1))));
    }

    #[test]
    fn empty_input() {
        assert!(t_batches(&[]).unwrap().is_empty());
    }
}
