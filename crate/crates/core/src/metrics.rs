//! Evaluation metrics: at-least-one recall@k, GT/Hal max-avg, CHAIR and
//! binary-QA confusion scores.
//!
//! Rates are fractions in `[0, 1]` except [`max_avg`], which reports percent.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::distmath::ProbVector;
use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// One distribution with the positions of its ground-truth and (optionally)
/// hallucinated tokens. Positions index into `dist`, whatever its space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalUnit {
    pub dist: ProbVector,
    pub gt: Vec<usize>,
    #[serde(default)]
    pub hal: Vec<usize>,
}

impl EvalUnit {
    pub fn new(dist: ProbVector, gt: Vec<usize>, hal: Vec<usize>) -> Result<Self> {
        let n = dist.len();
        if let Some(&bad) = gt.iter().chain(&hal).find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        if let Some(&both) = gt.iter().find(|g| hal.contains(g)) {
            return Err(Error::InvalidParameter(format!(
                "token position {both} is both ground truth and hallucinated"
            )));
        }
        Ok(Self { dist, gt, hal })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub hits: usize,
    pub n: usize,
    pub fraction: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Wilson score interval for `hits` successes out of `n`.
pub fn wilson_interval(hits: usize, n: usize, z: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::Empty);
    }
    if hits > n {
        return Err(Error::InvalidParameter(format!("{hits} hits out of {n}")));
    }
    let n_f = n as f64;
    let p = hits as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z / denom * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    // The endpoints are exactly 0 and 1 at the extremes; avoid rounding residue.
    let lower = if hits == 0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let upper = if hits == n {
        1.0
    } else {
        (center + half).min(1.0)
    };
    Ok((lower, upper))
}

pub fn proportion(hits: usize, n: usize) -> Result<Proportion> {
    let (lower, upper) = wilson_interval(hits, n, Z_95)?;
    Ok(Proportion {
        hits,
        n,
        fraction: hits as f64 / n as f64,
        lower,
        upper,
    })
}

/// Positions of the `k` most probable entries, ties broken by lower position.
pub fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    let order = |a: &usize, b: &usize| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    idx
}

/// Whether any ground-truth position ranks within the top `k`.
pub fn hit_at_k(unit: &EvalUnit, k: usize) -> bool {
    let probs = unit.dist.probs();
    unit.gt.iter().any(|&g| {
        let pg = probs[g];
        let ahead = probs
            .iter()
            .enumerate()
            .filter(|&(j, &pj)| pj > pg || (pj == pg && j < g))
            .count();
        ahead < k
    })
}

/// Fraction of units whose top-`k` set intersects their ground truth.
pub fn recall_at_k(units: &[EvalUnit], k: usize) -> Result<Proportion> {
    if units.is_empty() {
        return Err(Error::Empty);
    }
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if let Some(u) = units.iter().find(|u| k > u.dist.len()) {
        return Err(Error::InvalidParameter(format!(
            "k = {k} exceeds distribution length {}",
            u.dist.len()
        )));
    }
    let hits = units.iter().filter(|u| hit_at_k(u, k)).count();
    proportion(hits, units.len())
}

/// Mean over units of the largest ground-truth and hallucinated probability, in percent.
pub fn max_avg(units: &[EvalUnit]) -> Result<(f64, f64)> {
    if units.is_empty() {
        return Err(Error::Empty);
    }
    let mut gt_sum = 0.0;
    let mut hal_sum = 0.0;
    for (i, u) in units.iter().enumerate() {
        if u.gt.is_empty() || u.hal.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "unit {i} needs both ground-truth and hallucinated tokens"
            )));
        }
        let p = u.dist.probs();
        gt_sum += u.gt.iter().map(|&g| p[g]).fold(f64::NEG_INFINITY, f64::max);
        hal_sum += u
            .hal
            .iter()
            .map(|&h| p[h])
            .fold(f64::NEG_INFINITY, f64::max);
    }
    let n = units.len() as f64;
    Ok((100.0 * gt_sum / n, 100.0 * hal_sum / n))
}

/// Object mentions of one caption (duplicates kept) and its ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionEval {
    pub mentions: Vec<usize>,
    pub gt: BTreeSet<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    pub chair_s: f64,
    pub chair_i: f64,
    /// Mean per-caption F1.
    pub f1: f64,
    pub captions: usize,
    pub mentions: usize,
    pub hallucinated_mentions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionScore {
    pub hallucinated: usize,
    /// `None` when the caption mentions no object.
    pub precision: Option<f64>,
    pub recall: f64,
    pub f1: f64,
}

pub fn caption_score(c: &CaptionEval) -> CaptionScore {
    let hallucinated = c.mentions.iter().filter(|m| !c.gt.contains(m)).count();
    let correct = c.mentions.len() - hallucinated;
    let precision = (!c.mentions.is_empty()).then(|| correct as f64 / c.mentions.len() as f64);
    let found: BTreeSet<&usize> = c.mentions.iter().filter(|m| c.gt.contains(m)).collect();
    let recall = if c.gt.is_empty() {
        0.0
    } else {
        found.len() as f64 / c.gt.len() as f64
    };
    let f1 = match precision {
        Some(p) if p + recall > 0.0 => 2.0 * p * recall / (p + recall),
        _ => 0.0,
    };
    CaptionScore {
        hallucinated,
        precision,
        recall,
        f1,
    }
}

/// CHAIR_S, CHAIR_I and mean per-caption F1.
///
/// Captions without mentions count as clean for CHAIR_S, add nothing to the
/// CHAIR_I denominator, and score F1 = 0.
pub fn chair(captions: &[CaptionEval]) -> Result<ChairScores> {
    if captions.is_empty() {
        return Err(Error::Empty);
    }
    let mut bad_captions = 0;
    let mut mentions = 0;
    let mut hallucinated = 0;
    let mut f1_sum = 0.0;
    for c in captions {
        let s = caption_score(c);
        if s.hallucinated > 0 {
            bad_captions += 1;
        }
        mentions += c.mentions.len();
        hallucinated += s.hallucinated;
        f1_sum += s.f1;
    }
    let n = captions.len() as f64;
    Ok(ChairScores {
        chair_s: bad_captions as f64 / n,
        chair_i: if mentions == 0 {
            0.0
        } else {
            hallucinated as f64 / mentions as f64
        },
        f1: f1_sum / n,
        captions: captions.len(),
        mentions,
        hallucinated_mentions: hallucinated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryQa {
    pub accuracy: f64,
    /// `0.0` when nothing was predicted positive; see `precision_defined`.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_defined: bool,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub r#fn: usize,
}

/// Confusion metrics with "yes" (`true`) as the positive class.
pub fn binary_qa(preds: &[bool], labels: &[bool]) -> Result<BinaryQa> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(BinaryQa {
        accuracy: ratio(tp + tn, preds.len()),
        precision,
        recall,
        f1,
        precision_defined: tp + fp > 0,
        tp,
        fp,
        tn,
        r#fn: fn_,
    })
}

/// Reads a free-text answer as yes/no from its first word, case-insensitively.
/// Anything not starting with "yes" counts as no.
pub fn parse_yes_no(answer: &str) -> bool {
    answer
        .split_whitespace()
        .next()
        .map(|w| w.to_ascii_lowercase().starts_with("yes"))
        .unwrap_or(false)
}
