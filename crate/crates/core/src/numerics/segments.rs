use crate::error::{dim_err, Result};

/// Ragged groups of row indices, stored as concatenated members plus offsets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl Segments {
    pub fn from_groups<I, G>(groups: I) -> Self
    where
        I: IntoIterator<Item = G>,
        G: IntoIterator<Item = usize>,
    {
        let mut offsets = vec![0];
        let mut members = Vec::new();
        for g in groups {
            members.extend(g);
            offsets.push(members.len());
        }
        Segments { offsets, members }
    }

    /// Number of groups.
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of members over all groups.
    pub fn total(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    /// Positions `start..end` of group `g` within [`Self::members`].
    pub fn span(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.members[self.span(g)]
    }

    pub(crate) fn check_members(&self, op: &'static str, rows: usize) -> Result<()> {
        match self.members.iter().find(|&&m| m >= rows) {
            Some(m) => Err(dim_err(op, format!("member row {m} of a {rows}-row matrix"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_follow_groups() {
        let s = Segments::from_groups([vec![2, 0], vec![], vec![1]]);
        assert_eq!(s.len(), 3);
        assert_eq!(s.total(), 3);
        assert_eq!(s.group(0), &[2, 0]);
        assert!(s.group(1).is_empty());
        assert_eq!(s.span(2), 2..3);
        assert!(s.check_members("t", 2).is_err());
    }
}
