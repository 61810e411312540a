use std::collections::HashMap;

use crate::error::{DsppError, Result};

/// One timestamped user–item event. Ids are dense 0-based indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub time: f64,
}

/// Per-interaction side columns of a JODIE log, kept only on request.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SideColumns {
    pub labels: Vec<f64>,
    pub width: usize,
    pub features: Vec<f32>,
}

/// Mapping between dense indices and the raw ids of the source file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdMap {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl IdMap {
    /// Identity mapping: dense index `i` is raw id `"i"`.
    pub fn identity(users: usize, items: usize) -> Self {
        IdMap {
            users: (0..users).map(|i| i.to_string()).collect(),
            items: (0..items).map(|i| i.to_string()).collect(),
        }
    }

    pub fn user_index(&self) -> HashMap<&str, usize> {
        self.users.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }
}

/// The user's most recent interactions before a query time.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionSequence {
    pub user: usize,
    /// `(item, time)` pairs in chronological order.
    pub entries: Vec<(usize, f64)>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Chronologically ordered interactions over fixed user and item id spaces.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalNetwork {
    users: usize,
    items: usize,
    interactions: Vec<Interaction>,
    by_user: Vec<Vec<usize>>,
    by_item: Vec<Vec<usize>>,
    side: Option<SideColumns>,
}

impl TemporalNetwork {
    /// Validates ids and timestamps, then stably sorts by time (ties keep
    /// their input order).
    pub fn new(users: usize, items: usize, interactions: Vec<Interaction>) -> Result<Self> {
        Self::with_side(users, items, interactions, None)
    }

    pub(crate) fn with_side(
        users: usize,
        items: usize,
        interactions: Vec<Interaction>,
        side: Option<SideColumns>,
    ) -> Result<Self> {
        for x in &interactions {
            if x.user >= users {
                return Err(DsppError::OutOfRange {
                    what: "user",
                    id: x.user,
                    count: users,
                });
            }
            if x.item >= items {
                return Err(DsppError::OutOfRange {
                    what: "item",
                    id: x.item,
                    count: items,
                });
            }
            if !x.time.is_finite() || x.time < 0.0 {
                return Err(DsppError::InvalidArgument(format!(
                    "timestamp {} must be finite and non-negative",
                    x.time
                )));
            }
        }
        let mut order: Vec<usize> = (0..interactions.len()).collect();
        order.sort_by(|&a, &b| interactions[a].time.total_cmp(&interactions[b].time));
        let sorted: Vec<Interaction> = order.iter().map(|&i| interactions[i]).collect();
        let side = side.map(|s| SideColumns {
            labels: order.iter().map(|&i| s.labels[i]).collect(),
            width: s.width,
            features: order
                .iter()
                .flat_map(|&i| s.features[i * s.width..(i + 1) * s.width].iter().copied())
                .collect(),
        });
        let mut by_user = vec![Vec::new(); users];
        let mut by_item = vec![Vec::new(); items];
        for (i, x) in sorted.iter().enumerate() {
            by_user[x.user].push(i);
            by_item[x.item].push(i);
        }
        Ok(TemporalNetwork {
            users,
            items,
            interactions: sorted,
            by_user,
            by_item,
            side,
        })
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn side_columns(&self) -> Option<&SideColumns> {
        self.side.as_ref()
    }

    /// Indices of the user's interactions, chronological.
    pub fn user_indices(&self, user: usize) -> &[usize] {
        &self.by_user[user]
    }

    pub fn item_indices(&self, item: usize) -> &[usize] {
        &self.by_item[item]
    }

    /// Number of distinct users and items that actually occur.
    pub fn active_counts(&self) -> (usize, usize) {
        (
            self.by_user.iter().filter(|v| !v.is_empty()).count(),
            self.by_item.iter().filter(|v| !v.is_empty()).count(),
        )
    }

    /// `T`: just past the last timestamp, so every event lies in `[0, T)`.
    pub fn horizon(&self) -> f64 {
        let t_max = self.interactions.last().map_or(0.0, |x| x.time);
        t_max + 1e-9 * t_max.max(1.0)
    }

    /// Mean gap between consecutive events, or `None` with fewer than two
    /// events or zero span.
    pub fn mean_inter_event_interval(&self) -> Option<f64> {
        let n = self.interactions.len();
        if n < 2 {
            return None;
        }
        let span = self.interactions[n - 1].time - self.interactions[0].time;
        (span > 0.0).then(|| span / (n - 1) as f64)
    }

    /// Copy with every timestamp divided by `scale`.
    pub fn rescaled(&self, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(DsppError::InvalidArgument(format!("time scale {scale}")));
        }
        let mut out = self.clone();
        for x in &mut out.interactions {
            x.time /= scale;
        }
        Ok(out)
    }

    /// Contiguous sub-range over the same id spaces.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let side = self.side.as_ref().map(|s| SideColumns {
            labels: s.labels[range.clone()].to_vec(),
            width: s.width,
            features: s.features[range.start * s.width..range.end * s.width].to_vec(),
        });
        Self::with_side(self.users, self.items, self.interactions[range].to_vec(), side)
            .expect("sub-range of a valid network")
    }

    /// Most recent `max_len` interactions of `user` strictly before `t`.
    pub fn history(&self, user: usize, t: f64, max_len: usize) -> Result<InteractionSequence> {
        if user >= self.users {
            return Err(DsppError::OutOfRange {
                what: "user",
                id: user,
                count: self.users,
            });
        }
        let idx = &self.by_user[user];
        let end = idx.partition_point(|&i| self.interactions[i].time < t);
        let start = end.saturating_sub(max_len);
        let entries = idx[start..end]
            .iter()
            .map(|&i| (self.interactions[i].item, self.interactions[i].time))
            .collect();
        Ok(InteractionSequence { user, entries })
    }

    /// Index of the user's latest interaction with index `< before`.
    pub fn previous_of_user(&self, user: usize, before: usize) -> Option<usize> {
        let idx = &self.by_user[user];
        let k = idx.partition_point(|&i| i < before);
        k.checked_sub(1).map(|k| idx[k])
    }

    /// Index of the item's latest interaction with index `< before`.
    pub fn previous_of_item(&self, item: usize, before: usize) -> Option<usize> {
        let idx = &self.by_item[item];
        let k = idx.partition_point(|&i| i < before);
        k.checked_sub(1).map(|k| idx[k])
    }

    /// Index of the user's earliest interaction with index `> after`.
    pub fn next_of_user(&self, user: usize, after: usize) -> Option<usize> {
        let idx = &self.by_user[user];
        let k = idx.partition_point(|&i| i <= after);
        idx.get(k).copied()
    }
}

/// Split sizes by the floor rule: the first two segments get
/// `⌊ratio · n⌋` interactions, the test segment the remainder.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(DsppError::InvalidArgument(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    // The epsilon absorbs representation error such as 0.7 * 10 = 6.999….
    let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let train = floor(a).min(n);
    let valid = floor(b).min(n - train);
    Ok((train, valid, n - train - valid))
}

/// Contiguous chronological train / validation / test segments.
pub fn chrono_split(
    net: &TemporalNetwork,
    ratios: (f64, f64, f64),
) -> Result<(TemporalNetwork, TemporalNetwork, TemporalNetwork)> {
    if net.is_empty() {
        return Err(DsppError::Empty("network to split"));
    }
    let (train, valid, _) = split_sizes(net.len(), ratios)?;
    Ok((
        net.slice(0..train),
        net.slice(train..train + valid),
        net.slice(train + valid..net.len()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(rows: &[(usize, usize, f64)]) -> TemporalNetwork {
        let users = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
        let items = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
        let xs = rows
            .iter()
            .map(|&(user, item, time)| Interaction { user, item, time })
            .collect();
        TemporalNetwork::new(users, items, xs).unwrap()
    }

    #[test]
    fn stable_sort_by_time() {
        let n = net(&[(0, 0, 5.0), (1, 1, 1.0), (0, 1, 1.0), (1, 0, 0.5)]);
        let got: Vec<_> = n.interactions().iter().map(|x| (x.user, x.item)).collect();
        assert_eq!(got, vec![(1, 0), (1, 1), (0, 1), (0, 0)]);
    }

    #[test]
    fn split_floor_rule() {
        assert_eq!(split_sizes(10, (0.8, 0.1, 0.1)).unwrap(), (8, 1, 1));
        assert_eq!(split_sizes(7, (0.8, 0.1, 0.1)).unwrap(), (5, 0, 2));
        assert_eq!(split_sizes(100, (0.8, 0.1, 0.1)).unwrap(), (80, 10, 10));
        assert!(split_sizes(10, (0.8, 0.1, 0.2)).is_err());
    }

    #[test]
    fn split_of_empty_network_fails() {
        let empty = TemporalNetwork::new(1, 1, vec![]).unwrap();
        assert!(chrono_split(&empty, (0.8, 0.1, 0.1)).is_err());
    }

    #[test]
    fn split_segments_are_contiguous() {
        let rows: Vec<_> = (0..10).map(|i| (i % 3, i % 2, i as f64)).collect();
        let n = net(&rows);
        let (a, b, c) = chrono_split(&n, (0.8, 0.1, 0.1)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert_eq!(b.interactions()[0].time, 8.0);
        assert_eq!(c.interactions()[0].time, 9.0);
        assert_eq!((a.users(), a.items()), (n.users(), n.items()));
    }

    #[test]
    fn history_window_and_boundary() {
        let n = net(&[
            (0, 0, 1.0),
            (0, 1, 2.0),
            (0, 2, 3.0),
            (0, 0, 4.0),
            (0, 1, 5.0),
            (0, 2, 7.0),
            (0, 0, 7.0),
            (1, 0, 0.5),
        ]);
        let h = n.history(0, 6.0, 3).unwrap();
        assert_eq!(h.entries, vec![(2, 3.0), (0, 4.0), (1, 5.0)]);
        assert!(n.history(0, 1.0, 3).unwrap().is_empty());
        let at = n.history(0, 7.0, 10).unwrap();
        assert!(at.entries.iter().all(|&(_, t)| t < 7.0));
        assert_eq!(at.len(), 5);
        assert!(n.history(2, 1.0, 3).is_err());
    }

    #[test]
    fn rejects_negative_time_and_bad_ids() {
        let bad = vec![Interaction {
            user: 0,
            item: 0,
            time: -1.0,
        }];
        assert!(TemporalNetwork::new(1, 1, bad).is_err());
        let bad = vec![Interaction {
            user: 1,
            item: 0,
            time: 1.0,
        }];
        assert!(TemporalNetwork::new(1, 1, bad).is_err());
    }

    #[test]
    fn neighbor_index_lookups() {
        let n = net(&[(0, 0, 1.0), (1, 0, 2.0), (0, 1, 3.0), (0, 0, 4.0)]);
        assert_eq!(n.previous_of_user(0, 3), Some(2));
        assert_eq!(n.previous_of_user(0, 0), None);
        assert_eq!(n.previous_of_item(0, 3), Some(1));
        assert_eq!(n.next_of_user(0, 0), Some(2));
        assert_eq!(n.next_of_user(1, 1), None);
    }
}
