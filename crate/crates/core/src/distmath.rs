//! Numerically stable distribution kernels.
//!
//! Everything here works in 64-bit floats and natural-log units. Divergences
//! are computed from log-probabilities, so an entry whose probability
//! underflows to zero never produces `ln 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The index space a vector lives in.
///
/// `Subset` carries the id of the [`ConstrainedSubset`](crate::constraint::ConstrainedSubset)
/// whose indices the vector is laid out over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Full,
    Subset(u64),
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Empty);
    }
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

fn check_space(left: Space, right: Space) -> Result<()> {
    if left != right {
        return Err(Error::SpaceMismatch { left, right });
    }
    Ok(())
}

/// Dense finite logits over the full vocabulary or a subset of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitVector {
    values: Vec<f64>,
    space: Space,
}

impl LogitVector {
    pub fn new(values: Vec<f64>, space: Space) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self { values, space })
    }

    pub fn full(values: Vec<f64>) -> Result<Self> {
        Self::new(values, Space::Full)
    }

    /// Widens 32-bit logits.
    pub fn from_f32(values: &[f32], space: Space) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect(), space)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// A normalized distribution with its natural-log companion.
///
/// Probabilities sum to one within `1e-9`. Entries produced by
/// [`log_softmax`] may underflow to `0.0` when the logit gap exceeds roughly
/// 745 nats; `log_probs` stays finite regardless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    space: Space,
}

pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

impl ProbVector {
    /// Builds a distribution from explicit probabilities.
    ///
    /// Every entry must be strictly positive and the total must be one within
    /// [`NORMALIZATION_TOLERANCE`]. Zeros are rejected, not floored.
    pub fn from_probs(probs: Vec<f64>, space: Space) -> Result<Self> {
        check_finite(&probs)?;
        if let Some(i) = probs.iter().position(|&p| p <= 0.0) {
            return Err(Error::NotAProbability(format!(
                "entry {i} is {} (must be > 0)",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() >= NORMALIZATION_TOLERANCE {
            return Err(Error::NotAProbability(format!("sum is {total}")));
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self {
            probs,
            log_probs,
            space,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Position of the largest probability; ties go to the lowest position.
    pub fn argmax(&self) -> usize {
        argmax(&self.log_probs)
    }

    pub(crate) fn with_space(mut self, space: Space) -> Self {
        self.space = space;
        self
    }
}

/// First index of the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `ln Σ exp(x)` with the max shifted out.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Softmax over the vector's own index space, via max-shift.
pub fn log_softmax(logits: &LogitVector) -> Result<ProbVector> {
    check_finite(&logits.values)?;
    let max = logits
        .values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.values.iter().map(|v| v - max).collect();
    let lse = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    let log_probs: Vec<f64> = shifted.iter().map(|v| v - lse).collect();
    let probs = log_probs.iter().map(|v| v.exp()).collect();
    Ok(ProbVector {
        probs,
        log_probs,
        space: logits.space,
    })
}

/// Gathers full-vocabulary logits at the subset's indices, in subset order.
pub fn restrict(
    logits_full: &LogitVector,
    subset: &crate::constraint::ConstrainedSubset,
) -> Result<LogitVector> {
    check_space(logits_full.space, Space::Full)?;
    let len = logits_full.len();
    let values = subset
        .indices()
        .iter()
        .map(|&i| {
            logits_full
                .values
                .get(i)
                .copied()
                .ok_or(Error::IndexOutOfRange { index: i, len })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LogitVector {
        values,
        space: subset.space(),
    })
}

/// `Σ p ln(p/q)` in nats.
pub fn kl(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_space(p.space, q.space)?;
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let sum: f64 = p
        .probs
        .iter()
        .zip(p.log_probs.iter().zip(&q.log_probs))
        .map(|(&pi, (&lp, &lq))| if pi == 0.0 { 0.0 } else { pi * (lp - lq) })
        .sum();
    Ok(sum.max(0.0))
}

/// Jensen–Shannon divergence in nats, bounded by `ln 2`.
///
/// The midpoint is formed in log space so neither side needs a positive floor.
pub fn jsd(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_space(p.space, q.space)?;
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    if p.log_probs == q.log_probs {
        return Ok(0.0);
    }
    let ln2 = std::f64::consts::LN_2;
    let mut acc = 0.0;
    for i in 0..p.len() {
        let (lp, lq) = (p.log_probs[i], q.log_probs[i]);
        let lm = log_add_exp(lp, lq) - ln2;
        if p.probs[i] > 0.0 {
            acc += p.probs[i] * (lp - lm);
        }
        if q.probs[i] > 0.0 {
            acc += q.probs[i] * (lq - lm);
        }
    }
    Ok((0.5 * acc).clamp(0.0, std::f64::consts::LN_2))
}

/// Cosine similarity between two probability vectors.
pub fn cosine_sim(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_space(p.space, q.space)?;
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let dot: f64 = p.probs.iter().zip(&q.probs).map(|(a, b)| a * b).sum();
    let np = p.probs.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nq = q.probs.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok((dot / (np * nq)).min(1.0))
}
