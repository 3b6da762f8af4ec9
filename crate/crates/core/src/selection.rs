//! Reference vision-token selection over the (layer, token) grid.
//!
//! Every grid cell is projected onto the step's constrained subset and scored
//! against the base distribution. Cells are scored in parallel; the winner is
//! chosen by a total order on `(score, layer position, token index)`, so the
//! result never depends on evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraint::ConstrainedSubset;
use crate::decoder::{LayerId, VisionRows};
use crate::distmath::{cosine_sim, jsd, kl, ProbVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    MinJsd,
    MaxJsd,
    /// Uniform over the grid, ignoring scores.
    Random,
    /// Smallest `KL(base || projection)`.
    MinKl,
    /// Highest cosine similarity of probability vectors.
    MaxCosine,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::MinJsd,
        Criterion::MaxJsd,
        Criterion::Random,
        Criterion::MinKl,
        Criterion::MaxCosine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::MinJsd => "min_jsd",
            Criterion::MaxJsd => "max_jsd",
            Criterion::Random => "random",
            Criterion::MinKl => "min_kl",
            Criterion::MaxCosine => "max_cosine",
        }
    }

    fn score(self, base: &ProbVector, proj: &ProbVector) -> Result<f64> {
        match self {
            Criterion::MinJsd | Criterion::MaxJsd | Criterion::Random => jsd(base, proj),
            Criterion::MinKl => kl(base, proj),
            Criterion::MaxCosine => cosine_sim(base, proj),
        }
    }

    fn maximizes(self) -> bool {
        matches!(self, Criterion::MaxJsd | Criterion::MaxCosine)
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown selection criterion {s:?}")))
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub criterion: Criterion,
    /// Only read by [`Criterion::Random`].
    #[serde(default)]
    pub seed: u64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self {
            criterion: Criterion::MinJsd,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub layer: LayerId,
    pub layer_pos: usize,
    pub token_index: usize,
    /// Criterion score of the chosen cell (JSD for `random`).
    pub divergence: f64,
    pub reference: ProbVector,
    /// `[layer_pos][token_index]` scores, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all_scores: Option<Vec<Vec<f64>>>,
}

/// Picks the reference vision token for one step.
///
/// `step` feeds the random criterion's stream so that each step draws
/// independently while the whole decode stays reproducible from the seed.
pub fn select<R: VisionRows + ?Sized>(
    base: &ProbVector,
    vision: &R,
    subset: &ConstrainedSubset,
    policy: &SelectionPolicy,
    step: usize,
    keep_scores: bool,
) -> Result<SelectionResult> {
    if base.space() != subset.space() {
        return Err(Error::SpaceMismatch {
            left: base.space(),
            right: subset.space(),
        });
    }
    let n_layers = vision.layer_ids().len();
    let n_tokens = vision.vision_count();
    let grid = n_layers * n_tokens;
    if grid == 0 {
        return Err(Error::EmptyGrid);
    }
    let criterion = policy.criterion;

    let (layer_pos, token_index, scores) = if criterion == Criterion::Random && !keep_scores {
        let cell = random_cell(policy.seed, step, grid);
        (cell / n_tokens, cell % n_tokens, None)
    } else {
        let scores: Vec<f64> = (0..grid)
            .into_par_iter()
            .map(|cell| {
                let proj = vision.project(cell / n_tokens, cell % n_tokens, subset)?;
                criterion.score(base, &proj)
            })
            .collect::<Result<_>>()?;
        let cell = if criterion == Criterion::Random {
            random_cell(policy.seed, step, grid)
        } else {
            best_cell(&scores, criterion.maximizes())
        };
        (cell / n_tokens, cell % n_tokens, Some(scores))
    };

    let reference = vision.project(layer_pos, token_index, subset)?;
    let divergence = match &scores {
        Some(s) => s[layer_pos * n_tokens + token_index],
        None => criterion.score(base, &reference)?,
    };
    let all_scores = if keep_scores {
        scores.map(|s| s.chunks(n_tokens).map(<[f64]>::to_vec).collect())
    } else {
        None
    };
    Ok(SelectionResult {
        layer: vision.layer_ids()[layer_pos],
        layer_pos,
        token_index,
        divergence,
        reference,
        all_scores,
    })
}

/// Cell order is layer-major, so the lowest cell index wins ties.
fn best_cell(scores: &[f64], maximize: bool) -> usize {
    let key = |s: f64| if maximize { -s } else { s };
    (0..scores.len())
        .into_par_iter()
        .min_by(|&a, &b| key(scores[a]).total_cmp(&key(scores[b])).then(a.cmp(&b)))
        .unwrap_or(0)
}

/// ChaCha8 seeded from `seed`, stream `step`, one `random_range` draw.
fn random_cell(seed: u64, step: usize, grid: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng.random_range(0..grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::VisionLogitCache;
    use crate::distmath::{log_softmax, restrict, LogitVector};
    use rand::Rng;

    fn cache_from_rows(layers: usize, tokens: usize, rows: &[Vec<f32>]) -> VisionLogitCache {
        let vocab = rows[0].len();
        VisionLogitCache::from_raw((1..=layers as u32).collect(), tokens, vocab, rows.concat())
            .unwrap()
    }

    fn base_over(subset: &ConstrainedSubset, logits: &[f64]) -> ProbVector {
        let full = LogitVector::full(logits.to_vec()).unwrap();
        log_softmax(&restrict(&full, subset).unwrap()).unwrap()
    }

    #[test]
    fn identical_row_wins_with_zero_divergence() {
        let logits = [1.0, 0.5, -2.0, 3.0, 0.0];
        let subset = ConstrainedSubset::from_indices(vec![0, 1, 3], 5).unwrap();
        let base = base_over(&subset, &logits);
        let rows = vec![
            vec![0.0, 0.0, 0.0, 0.0, 0.0],
            logits.iter().map(|&v| v as f32).collect(),
            vec![5.0, -1.0, 0.0, -3.0, 1.0],
        ];
        let cache = cache_from_rows(1, 3, &rows);
        let r = select(
            &base,
            &cache,
            &subset,
            &SelectionPolicy::default(),
            0,
            false,
        )
        .unwrap();
        assert_eq!((r.layer_pos, r.token_index), (0, 1));
        assert_eq!(r.divergence, 0.0);
    }

    #[test]
    fn ties_go_to_earliest_cell() {
        let subset = ConstrainedSubset::from_indices(vec![0, 1], 2).unwrap();
        let base = base_over(&subset, &[0.3, 0.1]);
        let rows = vec![
            vec![2.0, 0.0],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            vec![2.0, 0.0],
        ];
        let cache = cache_from_rows(2, 2, &rows);
        let r = select(
            &base,
            &cache,
            &subset,
            &SelectionPolicy::default(),
            0,
            false,
        )
        .unwrap();
        assert_eq!((r.layer, r.token_index), (1, 1));
    }

    #[test]
    fn matches_exhaustive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vocab = 12;
        let (layers, tokens) = (3, 4);
        let rows: Vec<Vec<f32>> = (0..layers * tokens)
            .map(|_| (0..vocab).map(|_| rng.random_range(-3.0f32..3.0)).collect())
            .collect();
        let cache = cache_from_rows(layers, tokens, &rows);
        let logits: Vec<f64> = (0..vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
        let subset = ConstrainedSubset::from_indices(vec![0, 2, 3, 5, 8, 11], vocab).unwrap();
        let base = base_over(&subset, &logits);

        // Brute force: recompute all 12 JSDs from scratch with the two-term formula.
        let mut best = (f64::INFINITY, 0, 0);
        for l in 0..layers {
            for t in 0..tokens {
                let row = &rows[l * tokens + t];
                let sub: Vec<f64> = subset
                    .indices()
                    .iter()
                    .map(|&i| f64::from(row[i]))
                    .collect();
                let z: f64 = sub.iter().map(|v| v.exp()).sum();
                let q: Vec<f64> = sub.iter().map(|v| v.exp() / z).collect();
                let p = base.probs();
                let mut d = 0.0;
                for i in 0..q.len() {
                    let m = 0.5 * (p[i] + q[i]);
                    d += 0.5 * p[i] * (p[i] / m).ln() + 0.5 * q[i] * (q[i] / m).ln();
                }
                if d < best.0 {
                    best = (d, l, t);
                }
            }
        }
        let r = select(&base, &cache, &subset, &SelectionPolicy::default(), 0, true).unwrap();
        assert_eq!((r.layer_pos, r.token_index), (best.1, best.2));
        assert!((r.divergence - best.0).abs() < 1e-12);
        let scores = r.all_scores.unwrap();
        assert_eq!(scores.len(), 3);
        assert_eq!(scores[r.layer_pos][r.token_index], r.divergence);
    }

    #[test]
    fn max_and_min_differ_on_distinct_scores() {
        let subset = ConstrainedSubset::from_indices(vec![0, 1, 2], 3).unwrap();
        let base = base_over(&subset, &[1.0, 0.0, -1.0]);
        let rows = vec![
            vec![1.0, 0.0, -1.0],
            vec![0.0, 0.0, 0.0],
            vec![-1.0, 0.0, 1.0],
        ];
        let cache = cache_from_rows(1, 3, &rows);
        let pick = |c| {
            let p = SelectionPolicy {
                criterion: c,
                seed: 0,
            };
            select(&base, &cache, &subset, &p, 0, false)
                .unwrap()
                .token_index
        };
        assert_eq!(pick(Criterion::MinJsd), 0);
        assert_eq!(pick(Criterion::MaxJsd), 2);
        assert_eq!(pick(Criterion::MinKl), 0);
        assert_eq!(pick(Criterion::MaxCosine), 0);
    }

    #[test]
    fn singleton_subset_picks_first_cell() {
        let subset = ConstrainedSubset::from_indices(vec![1], 3).unwrap();
        let base = base_over(&subset, &[0.0, 4.0, 1.0]);
        let rows = vec![
            vec![3.0, 0.0, 1.0],
            vec![0.0, 9.0, 1.0],
            vec![1.0, 1.0, 1.0],
        ];
        let cache = cache_from_rows(1, 3, &rows);
        let r = select(&base, &cache, &subset, &SelectionPolicy::default(), 0, true).unwrap();
        assert_eq!((r.layer_pos, r.token_index), (0, 0));
        assert_eq!(r.reference.probs(), &[1.0]);
        assert!(r.all_scores.unwrap()[0].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn random_is_seeded_and_score_independent() {
        let subset = ConstrainedSubset::from_indices(vec![0, 1], 2).unwrap();
        let base = base_over(&subset, &[0.0, 1.0]);
        let rows: Vec<Vec<f32>> = (0..16).map(|i| vec![i as f32 * 0.1, 0.0]).collect();
        let cache = cache_from_rows(2, 8, &rows);
        let policy = SelectionPolicy {
            criterion: Criterion::Random,
            seed: 42,
        };
        let picks: Vec<_> = (0..32)
            .map(|s| {
                let r = select(&base, &cache, &subset, &policy, s, false).unwrap();
                (r.layer_pos, r.token_index)
            })
            .collect();
        let again: Vec<_> = (0..32)
            .map(|s| {
                let r = select(&base, &cache, &subset, &policy, s, true).unwrap();
                (r.layer_pos, r.token_index)
            })
            .collect();
        assert_eq!(picks, again);
        let distinct: std::collections::BTreeSet<_> = picks.iter().collect();
        assert!(distinct.len() > 4);
    }

    #[test]
    fn base_must_live_on_subset() {
        let subset = ConstrainedSubset::from_indices(vec![0, 1], 2).unwrap();
        let other = ConstrainedSubset::from_indices(vec![1], 2).unwrap();
        let base = base_over(&other, &[0.0, 1.0]);
        let cache = cache_from_rows(1, 1, &[vec![0.0, 0.0]]);
        assert!(matches!(
            select(
                &base,
                &cache,
                &subset,
                &SelectionPolicy::default(),
                0,
                false
            ),
            Err(Error::SpaceMismatch { .. })
        ));
    }

    #[test]
    fn criterion_names_round_trip() {
        for c in Criterion::ALL {
            assert_eq!(c.as_str().parse::<Criterion>().unwrap(), c);
        }
        assert!("median".parse::<Criterion>().is_err());
    }
}
