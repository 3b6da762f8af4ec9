//! Combining the base distribution with the selected vision reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::ConstrainedSubset;
use crate::decoder::TokenId;
use crate::distmath::{log_softmax, LogitVector, ProbVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// `log base + weight * log ref`, renormalized.
    Poe,
    /// `(1 - weight) * base + weight * ref`.
    Interpolate,
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poe" => Ok(FusionKind::Poe),
            "interpolate" => Ok(FusionKind::Interpolate),
            _ => Err(Error::InvalidParameter(format!(
                "unknown fusion kind {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionPolicy {
    pub kind: FusionKind,
    pub weight: f64,
}

impl Default for FusionPolicy {
    fn default() -> Self {
        Self {
            kind: FusionKind::Poe,
            weight: 1.0,
        }
    }
}

impl FusionPolicy {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            FusionKind::Poe if !(self.weight > 0.0 && self.weight.is_finite()) => Err(
                Error::InvalidParameter(format!("poe weight must be > 0, got {}", self.weight)),
            ),
            FusionKind::Interpolate if !(0.0..=1.0).contains(&self.weight) => {
                Err(Error::InvalidParameter(format!(
                    "interpolation weight must lie in [0, 1], got {}",
                    self.weight
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, base: &ProbVector, reference: &ProbVector) -> Result<ProbVector> {
        match self.kind {
            FusionKind::Poe => fuse_poe(base, reference, self.weight),
            FusionKind::Interpolate => fuse_interpolate(base, reference, self.weight),
        }
    }
}

fn check_pair(base: &ProbVector, reference: &ProbVector) -> Result<()> {
    if base.space() != reference.space() {
        return Err(Error::SpaceMismatch {
            left: base.space(),
            right: reference.space(),
        });
    }
    if base.len() != reference.len() {
        return Err(Error::LengthMismatch {
            left: base.len(),
            right: reference.len(),
        });
    }
    Ok(())
}

/// Product of experts in log space: `softmax(log base + weight * log ref)`.
///
/// At `weight = 1` this is plain log-space addition. For other weights it is
/// the KL-regularized optimum `q ∝ base * ref^weight`.
pub fn fuse_poe(base: &ProbVector, reference: &ProbVector, weight: f64) -> Result<ProbVector> {
    check_pair(base, reference)?;
    if !(weight > 0.0 && weight.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "poe weight must be > 0, got {weight}"
        )));
    }
    let combined = base
        .log_probs()
        .iter()
        .zip(reference.log_probs())
        .map(|(b, r)| b + weight * r)
        .collect();
    log_softmax(&LogitVector::new(combined, base.space())?)
}

/// Convex mixture of the two distributions.
pub fn fuse_interpolate(
    base: &ProbVector,
    reference: &ProbVector,
    lambda: f64,
) -> Result<ProbVector> {
    check_pair(base, reference)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!(
            "interpolation weight must lie in [0, 1], got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return Ok(base.clone());
    }
    if lambda == 1.0 {
        return Ok(reference.clone());
    }
    let mixed: Vec<f64> = base
        .probs()
        .iter()
        .zip(reference.probs())
        .map(|(b, r)| (1.0 - lambda) * b + lambda * r)
        .collect();
    // Mixing keeps log-probs finite wherever either side had mass; go through
    // the log domain so underflowed entries do not trip the positivity check.
    let logs: Vec<f64> = base
        .log_probs()
        .iter()
        .zip(reference.log_probs())
        .zip(&mixed)
        .map(|((&lb, &lr), &m)| {
            if m > 0.0 {
                m.ln()
            } else {
                let a = (1.0 - lambda).ln() + lb;
                let b = lambda.ln() + lr;
                a.max(b) + (-(a - b).abs()).exp().ln_1p()
            }
        })
        .collect();
    log_softmax(&LogitVector::new(logs, base.space())?)
}

/// Greedy emission: the subset member with the highest final probability,
/// lowest token id on ties.
pub fn emit_token(final_dist: &ProbVector, subset: &ConstrainedSubset) -> Result<TokenId> {
    if final_dist.space() != subset.space() {
        return Err(Error::SpaceMismatch {
            left: final_dist.space(),
            right: subset.space(),
        });
    }
    Ok(subset.indices()[final_dist.argmax()])
}

/// Categorical draw from the final distribution; stream `step` of a ChaCha8
/// generator seeded with `seed`.
pub fn sample_token(
    final_dist: &ProbVector,
    subset: &ConstrainedSubset,
    seed: u64,
    step: usize,
) -> Result<TokenId> {
    if final_dist.space() != subset.space() {
        return Err(Error::SpaceMismatch {
            left: final_dist.space(),
            right: subset.space(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (pos, &p) in final_dist.probs().iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(subset.indices()[pos]);
        }
    }
    Ok(subset.indices()[final_dist.argmax()])
}
