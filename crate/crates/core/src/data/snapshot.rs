use super::network::TemporalNetwork;
use crate::error::{DsppError, Result};

/// Static bipartite graph of every distinct pair seen before a window end.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub window_end: f64,
    user_items: Vec<Vec<usize>>,
    item_users: Vec<Vec<usize>>,
    edges: usize,
}

impl Snapshot {
    fn empty(users: usize, items: usize) -> Self {
        Snapshot {
            window_end: 0.0,
            user_items: vec![Vec::new(); users],
            item_users: vec![Vec::new(); items],
            edges: 0,
        }
    }

    fn insert(&mut self, user: usize, item: usize) {
        let row = &mut self.user_items[user];
        if let Err(k) = row.binary_search(&item) {
            row.insert(k, item);
            let col = &mut self.item_users[item];
            let k = col.binary_search(&user).unwrap_err();
            col.insert(k, user);
            self.edges += 1;
        }
    }

    pub fn users(&self) -> usize {
        self.user_items.len()
    }

    pub fn items(&self) -> usize {
        self.item_users.len()
    }

    /// Items adjacent to `user`, ascending.
    pub fn user_neighbors(&self, user: usize) -> &[usize] {
        &self.user_items[user]
    }

    /// Users adjacent to `item`, ascending.
    pub fn item_neighbors(&self, item: usize) -> &[usize] {
        &self.item_users[item]
    }

    pub fn edge_count(&self) -> usize {
        self.edges
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.user_items[user].binary_search(&item).is_ok()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.user_items
            .iter()
            .enumerate()
            .flat_map(|(u, vs)| vs.iter().map(move |&v| (u, v)))
    }
}

/// Cumulative snapshots `G^0 ⊆ G^1 ⊆ …` at a fixed interval: `G^m` holds the
/// pairs with at least one interaction strictly before `m · interval`.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSequence {
    interval: f64,
    snapshots: Vec<Snapshot>,
}

impl SnapshotSequence {
    /// `count` snapshots spanning `horizon`, so the interval is `horizon / count`.
    pub fn build(net: &TemporalNetwork, horizon: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(DsppError::InvalidArgument("snapshot count must be positive".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(DsppError::InvalidArgument(format!("horizon {horizon}")));
        }
        Self::with_interval(net, horizon / count as f64, count)
    }

    /// `count` snapshots at an explicit interval.
    pub fn with_interval(net: &TemporalNetwork, interval: f64, count: usize) -> Result<Self> {
        if !(interval.is_finite() && interval > 0.0) {
            return Err(DsppError::InvalidArgument(format!("snapshot interval {interval}")));
        }
        let xs = net.interactions();
        let mut current = Snapshot::empty(net.users(), net.items());
        let mut snapshots = Vec::with_capacity(count);
        let mut next = 0;
        for m in 0..count {
            let end = interval * m as f64;
            while next < xs.len() && xs[next].time < end {
                current.insert(xs[next].user, xs[next].item);
                next += 1;
            }
            current.window_end = end;
            snapshots.push(current.clone());
        }
        Ok(SnapshotSequence { interval, snapshots })
    }

    pub fn interval(&self) -> f64 {
        self.interval
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn get(&self, m: usize) -> Option<&Snapshot> {
        self.snapshots.get(m)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Snapshot> {
        self.snapshots.iter()
    }

    /// Snapshot in force at time `t`: the last one whose window ends at or
    /// before `t`, clamped to the sequence.
    pub fn index_at(&self, t: f64) -> usize {
        snapshot_index(t, self.interval, self.snapshots.len())
    }
}

/// `min(⌊t / interval⌋, count − 1)`, computed as the largest `m` with
/// `m · interval ≤ t` in floating point so it agrees with the window ends.
pub fn snapshot_index(t: f64, interval: f64, count: usize) -> usize {
    let mut m = (t / interval).floor().max(0.0) as usize;
    while m > 0 && interval * m as f64 > t {
        m -= 1;
    }
    while interval * (m + 1) as f64 <= t {
        m += 1;
    }
    m.min(count.saturating_sub(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;

    fn net(rows: &[(usize, usize, f64)], users: usize, items: usize) -> TemporalNetwork {
        let xs = rows
            .iter()
            .map(|&(user, item, time)| Interaction { user, item, time })
            .collect();
        TemporalNetwork::new(users, items, xs).unwrap()
    }

    #[test]
    fn window_boundaries_are_strict() {
        let n = net(&[(0, 0, 1.0), (0, 0, 3.0), (1, 1, 7.0)], 2, 2);
        let s = SnapshotSequence::build(&n, 10.0, 5).unwrap();
        assert_eq!(s.interval(), 2.0);
        let counts: Vec<_> = s.iter().map(Snapshot::edge_count).collect();
        assert_eq!(counts, vec![0, 1, 1, 1, 2]);
        assert!(s.get(1).unwrap().contains(0, 0));
        assert!(!s.get(3).unwrap().contains(1, 1));
        assert!(s.get(4).unwrap().contains(1, 1));
    }

    #[test]
    fn event_on_boundary_waits_for_next_window() {
        let n = net(&[(0, 0, 2.0)], 1, 1);
        let s = SnapshotSequence::build(&n, 10.0, 5).unwrap();
        assert_eq!(s.get(1).unwrap().edge_count(), 0);
        assert_eq!(s.get(2).unwrap().edge_count(), 1);
    }

    #[test]
    fn repeated_pairs_are_one_edge() {
        let n = net(&[(0, 1, 0.1), (0, 1, 0.2), (0, 0, 0.3)], 1, 2);
        let s = SnapshotSequence::build(&n, 1.0, 2).unwrap();
        let last = s.get(1).unwrap();
        assert_eq!(last.edge_count(), 2);
        assert_eq!(last.user_neighbors(0), &[0, 1]);
        assert_eq!(last.item_neighbors(1), &[0]);
    }

    #[test]
    fn index_lookup() {
        assert_eq!(snapshot_index(3.0, 2.0, 5), 1);
        assert_eq!(snapshot_index(4.0, 2.0, 5), 2);
        assert_eq!(snapshot_index(99.0, 2.0, 5), 4);
        for k in 0..1000 {
            let t = k as f64 * 0.01;
            let m = snapshot_index(t, 0.1, 10_000);
            assert!(0.1 * m as f64 <= t && t < 0.1 * (m + 1) as f64);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let n = net(&[(0, 0, 1.0)], 1, 1);
        assert!(SnapshotSequence::build(&n, 10.0, 0).is_err());
        assert!(SnapshotSequence::build(&n, 0.0, 3).is_err());
    }
}
