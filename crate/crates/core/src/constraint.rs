//! Adaptive plausibility constraint: the per-step candidate vocabulary.

use serde::{Deserialize, Serialize};

use crate::distmath::{ProbVector, Space};
use crate::error::{Error, Result};

/// Default plausibility ratio.
pub const DEFAULT_ALPHA: f64 = 1e-5;

/// Ascending vocabulary indices kept at one decoding step.
///
/// The id is a hash of the index list, so two subsets with the same members
/// share an index space and their distributions may be compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedSubset {
    id: u64,
    indices: Vec<usize>,
    /// Ratio used to build the subset; `0.0` marks a subset given explicitly.
    alpha: f64,
    source_max_prob: f64,
}

fn subset_id(indices: &[usize]) -> u64 {
    // FNV-1a over the little-endian index bytes, length first.
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut feed = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    };
    feed(indices.len() as u64);
    for &i in indices {
        feed(i as u64);
    }
    h
}

impl ConstrainedSubset {
    /// Builds a subset from explicit indices, checked against the vocabulary size.
    pub fn from_indices(indices: Vec<usize>, vocab_len: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty);
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidParameter(format!(
                    "subset indices must be strictly ascending ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= vocab_len {
                return Err(Error::IndexOutOfRange {
                    index: last,
                    len: vocab_len,
                });
            }
        }
        Ok(Self {
            id: subset_id(&indices),
            indices,
            alpha: 0.0,
            source_max_prob: 0.0,
        })
    }

    /// Every vocabulary index; used when the constraint is switched off.
    pub fn full(vocab_len: usize) -> Result<Self> {
        Self::from_indices((0..vocab_len).collect(), vocab_len)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn space(&self) -> Space {
        Space::Subset(self.id)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Largest base probability at build time, `0.0` for explicit subsets.
    pub fn source_max_prob(&self) -> f64 {
        self.source_max_prob
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, token: usize) -> bool {
        self.position(token).is_some()
    }

    /// Position of a vocabulary index within the subset.
    pub fn position(&self, token: usize) -> Option<usize> {
        self.indices.binary_search(&token).ok()
    }

    /// Spreads a subset-space vector back over the full vocabulary, zero elsewhere.
    pub fn expand(&self, values: &[f64], vocab_len: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab_len];
        for (&i, &v) in self.indices.iter().zip(values) {
            out[i] = v;
        }
        out
    }
}

/// Keeps every token with `p(w) >= alpha * max p`.
pub fn build_subset(base: &ProbVector, alpha: f64) -> Result<ConstrainedSubset> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if base.space() != Space::Full {
        return Err(Error::SpaceMismatch {
            left: base.space(),
            right: Space::Full,
        });
    }
    let probs = base.probs();
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = alpha * max;
    let indices: Vec<usize> = probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(ConstrainedSubset {
        id: subset_id(&indices),
        indices,
        alpha,
        source_max_prob: max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distmath::{log_softmax, LogitVector};
    use proptest::prelude::*;

    fn full(probs: &[f64]) -> ProbVector {
        ProbVector::from_probs(probs.to_vec(), Space::Full).unwrap()
    }

    #[test]
    fn examples() {
        let s = build_subset(&full(&[0.97, 0.01, 0.01, 0.01]), 0.1).unwrap();
        assert_eq!(s.indices(), &[0]);

        for alpha in [1e-6, 0.3, 0.999_999] {
            let s = build_subset(&full(&[0.25; 4]), alpha).unwrap();
            assert_eq!(s.indices(), &[0, 1, 2, 3]);
        }

        let s = build_subset(&full(&[0.5, 0.3, 0.15, 0.05]), 0.2).unwrap();
        assert_eq!(s.indices(), &[0, 1, 2]);
        assert_eq!(s.source_max_prob(), 0.5);
    }

    #[test]
    fn boundary_is_inclusive() {
        // 0.25 * 0.5 == 0.125 exactly in binary.
        let s = build_subset(&full(&[0.5, 0.125, 0.375]), 0.25).unwrap();
        assert_eq!(s.indices(), &[0, 1, 2]);
        let s = build_subset(&full(&[0.5, 0.125, 0.375]), 0.250_000_001).unwrap();
        assert_eq!(s.indices(), &[0, 2]);
    }

    #[test]
    fn alpha_out_of_range() {
        let p = full(&[0.5, 0.5]);
        for a in [0.0, 1.0, -0.1, 2.0, f64::NAN] {
            assert!(matches!(
                build_subset(&p, a),
                Err(Error::InvalidParameter(_))
            ));
        }
    }

    #[test]
    fn small_alpha_admits_everything() {
        // Logit spread of 10 nats keeps every ratio above e^-10 > 1e-6.
        let logits: Vec<f64> = (0..500).map(|i| -(i as f64) / 50.0).collect();
        let p = log_softmax(&LogitVector::full(logits).unwrap()).unwrap();
        assert_eq!(build_subset(&p, 1e-6).unwrap().len(), 500);
    }

    #[test]
    fn from_indices_validation() {
        assert!(ConstrainedSubset::from_indices(vec![], 3).is_err());
        assert!(ConstrainedSubset::from_indices(vec![1, 1], 3).is_err());
        assert!(ConstrainedSubset::from_indices(vec![2, 1], 3).is_err());
        assert!(ConstrainedSubset::from_indices(vec![0, 3], 3).is_err());
        let a = ConstrainedSubset::from_indices(vec![0, 2], 3).unwrap();
        let b = ConstrainedSubset::from_indices(vec![0, 2], 5).unwrap();
        let c = ConstrainedSubset::from_indices(vec![0, 1], 3).unwrap();
        assert_eq!(a.id(), b.id());
        assert_ne!(a.id(), c.id());
        assert_eq!(a.expand(&[0.25, 0.75], 4), vec![0.25, 0.0, 0.75, 0.0]);
    }

    proptest! {
        #[test]
        fn argmax_member_and_monotone(
            logits in prop::collection::vec(-20.0f64..20.0, 1..300),
            a1 in 1e-6f64..0.999,
            a2 in 1e-6f64..0.999,
        ) {
            let p = log_softmax(&LogitVector::full(logits).unwrap()).unwrap();
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let loose = build_subset(&p, lo).unwrap();
            let tight = build_subset(&p, hi).unwrap();
            prop_assert!(tight.contains(p.argmax()));
            prop_assert!(tight.indices().iter().all(|&i| loose.contains(i)));
            let max = p.probs()[p.argmax()];
            for (i, &pi) in p.probs().iter().enumerate() {
                prop_assert_eq!(tight.contains(i), pi >= hi * max);
            }
        }
    }
}
