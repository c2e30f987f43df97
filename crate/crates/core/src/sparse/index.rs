use std::fmt;

use crate::error::{Error, Result};

/// Which kind of unit a selection ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnitKind {
    Heads,
    Neurons,
}

impl UnitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitKind::Heads => "heads",
            UnitKind::Neurons => "neurons",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            UnitKind::Heads => 0,
            UnitKind::Neurons => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(UnitKind::Heads),
            1 => Ok(UnitKind::Neurons),
            other => Err(Error::Format(format!("unknown unit kind {other}"))),
        }
    }
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Sorted, deduplicated subset of `0..universe`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexSet {
    indices: Vec<usize>,
    universe: usize,
}

impl IndexSet {
    /// Validates that `indices` is strictly increasing and inside the universe.
    pub fn new(indices: Vec<usize>, universe: usize) -> Result<Self> {
        if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!(
                "index set not strictly increasing at {} >= {}",
                w[0], w[1]
            )));
        }
        if let Some(&index) = indices.last().filter(|&&i| i >= universe) {
            return Err(Error::IndexOutOfRange { index, universe });
        }
        Ok(IndexSet { indices, universe })
    }

    pub fn from_unsorted(mut indices: Vec<usize>, universe: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        IndexSet::new(indices, universe)
    }

    pub fn full(universe: usize) -> Self {
        IndexSet {
            indices: (0..universe).collect(),
            universe,
        }
    }

    pub fn empty(universe: usize) -> Self {
        IndexSet {
            indices: Vec::new(),
            universe,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.universe
    }

    pub fn density(&self) -> f64 {
        if self.universe == 0 {
            0.0
        } else {
            self.len() as f64 / self.universe as f64
        }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn intersection_len(&self, other: &IndexSet) -> usize {
        let (mut a, mut b, mut n) = (0, 0, 0);
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    a += 1;
                    b += 1;
                }
            }
        }
        n
    }

    /// Jaccard similarity; two empty sets are identical.
    pub fn jaccard(&self, other: &IndexSet) -> f64 {
        let inter = self.intersection_len(other);
        let union = self.len() + other.len() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn is_subset(&self, other: &IndexSet) -> bool {
        self.intersection_len(other) == self.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BudgetKind {
    TopK(usize),
    Threshold(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsityBudget {
    pub kind: BudgetKind,
    pub applies_to: UnitKind,
}

impl SparsityBudget {
    pub fn top_k(k: usize, applies_to: UnitKind) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("TopK budget needs k >= 1".into()));
        }
        Ok(SparsityBudget {
            kind: BudgetKind::TopK(k),
            applies_to,
        })
    }

    pub fn threshold(t: f64, applies_to: UnitKind) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::Invalid(format!("threshold must be finite, got {t}")));
        }
        Ok(SparsityBudget {
            kind: BudgetKind::Threshold(t),
            applies_to,
        })
    }

    pub fn select(&self, scores: &[f32]) -> IndexSet {
        self.kind.select(scores)
    }
}

impl BudgetKind {
    /// TopK keeps the k largest scores (lower index wins ties); Threshold keeps
    /// every score `>= t`.
    pub fn select(&self, scores: &[f32]) -> IndexSet {
        let m = scores.len();
        match *self {
            BudgetKind::TopK(k) => {
                let mut order: Vec<usize> = (0..m).collect();
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                order.truncate(k.min(m));
                order.sort_unstable();
                IndexSet {
                    indices: order,
                    universe: m,
                }
            }
            BudgetKind::Threshold(t) => IndexSet {
                indices: (0..m).filter(|&i| f64::from(scores[i]) >= t).collect(),
                universe: m,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_unsorted_and_out_of_range() {
        assert!(IndexSet::new(vec![2, 1], 4).is_err());
        assert!(IndexSet::new(vec![1, 1], 4).is_err());
        assert!(matches!(
            IndexSet::new(vec![0, 4], 4),
            Err(Error::IndexOutOfRange {
                index: 4,
                universe: 4
            })
        ));
        assert_eq!(
            IndexSet::from_unsorted(vec![3, 0, 3], 4).unwrap().indices(),
            &[0, 3]
        );
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let s = BudgetKind::TopK(2).select(&[1.0, 3.0, 3.0, 3.0]);
        assert_eq!(s.indices(), &[1, 2]);
        assert_eq!(BudgetKind::TopK(10).select(&[0.0; 3]), IndexSet::full(3));
    }

    #[test]
    fn threshold_example() {
        let s = BudgetKind::Threshold(0.2).select(&[0.5, 0.0, 0.9, 0.0]);
        assert_eq!(s.indices(), &[0, 2]);
    }

    #[test]
    fn jaccard_edges() {
        let a = IndexSet::new(vec![0, 1], 4).unwrap();
        let b = IndexSet::new(vec![2, 3], 4).unwrap();
        assert_eq!(a.jaccard(&b), 0.0);
        assert_eq!(a.jaccard(&a), 1.0);
        assert_eq!(IndexSet::empty(4).jaccard(&IndexSet::empty(4)), 1.0);
    }

    proptest! {
        #[test]
        fn topk_is_exactly_the_k_largest(scores in prop::collection::vec(-3.0f32..3.0, 1..40), k in 1usize..40) {
            let s = BudgetKind::TopK(k).select(&scores);
            prop_assert_eq!(s.len(), k.min(scores.len()));
            let min_in = s.iter().map(|i| scores[i]).fold(f32::INFINITY, f32::min);
            for i in 0..scores.len() {
                if !s.contains(i) {
                    prop_assert!(scores[i] <= min_in);
                }
            }
        }

        #[test]
        fn threshold_is_monotone(scores in prop::collection::vec(0.0f32..1.0, 1..40), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = BudgetKind::Threshold(hi).select(&scores);
            let b = BudgetKind::Threshold(lo).select(&scores);
            prop_assert!(a.is_subset(&b));
        }
    }
}
