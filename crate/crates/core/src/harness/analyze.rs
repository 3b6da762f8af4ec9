//! Grounding analysis over labelled samples.
//!
//! Two measurements:
//!
//! * at greedy steps that emit an object absent from the ground truth, how
//!   often a ground-truth object still ranks in the base distribution's top
//!   `k`, and the GT/Hal max-avg over the object-only distribution;
//! * per layer, at-least-one recall@k of vision-token projections over the
//!   full vocabulary versus over the object-token subset.

use serde::{Deserialize, Serialize};

use super::experiment::Sample;
use crate::constraint::ConstrainedSubset;
use crate::decoder::{
    decode, replay, DecodeResult, DecodingConfig, LayerId, LayerScope, RecordLevel, TokenId,
    VisionLogitCache, VisionRows,
};
use crate::distmath::{log_softmax, restrict, LogitVector};
use crate::error::{Error, Result};
use crate::metrics::{max_avg, recall_at_k, EvalUnit, Proportion};

pub const ANALYSIS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub ks: Vec<usize>,
    pub layer_scope: LayerScope,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10, 50],
            layer_scope: LayerScope::AllEven,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub k: usize,
    pub recall: Proportion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecall {
    pub layer: LayerId,
    pub full_vocab: Vec<RecallRow>,
    pub object_subset: Vec<RecallRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub samples: usize,
    pub hallucinated_steps: usize,
    /// Recall of ground-truth objects in the full base distribution at
    /// hallucinated steps.
    pub step_recall: Vec<RecallRow>,
    /// Percent; `None` when no hallucinated step occurred.
    pub gt_max_avg: Option<f64>,
    pub hal_max_avg: Option<f64>,
    pub projection: Vec<LayerRecall>,
}

/// Labels needed to analyse one decode.
pub struct Labels<'a> {
    /// Object token ids, ascending.
    pub object_tokens: &'a [TokenId],
    pub gt_tokens: &'a [TokenId],
}

/// Evaluation units at the hallucinated steps of a full-provenance greedy
/// record: the full-vocabulary base distribution and the object-only one.
pub fn hallucinated_step_units(
    result: &DecodeResult,
    labels: &Labels<'_>,
) -> Result<(Vec<EvalUnit>, Vec<EvalUnit>)> {
    if labels.object_tokens.is_empty() {
        return Err(Error::InvalidParameter("empty object token list".into()));
    }
    let vocab_len = result
        .steps
        .first()
        .map(|s| s.step_logits.len())
        .unwrap_or(0);
    let objects = ConstrainedSubset::from_indices(labels.object_tokens.to_vec(), vocab_len.max(1))?;
    let mut full_units = Vec::new();
    let mut object_units = Vec::new();
    for s in &result.steps {
        let emitted = s.emitted;
        if !objects.contains(emitted) || labels.gt_tokens.contains(&emitted) {
            continue;
        }
        let logits = LogitVector::full(s.step_logits.clone())?;
        let full = log_softmax(&logits)?;
        full_units.push(EvalUnit::new(
            full,
            labels.gt_tokens.to_vec(),
            vec![emitted],
        )?);

        let obj = log_softmax(&restrict(&logits, &objects)?)?;
        let gt_pos: Vec<usize> = labels
            .gt_tokens
            .iter()
            .filter_map(|&t| objects.position(t))
            .collect();
        let hal_pos = vec![objects.position(emitted).expect("emitted is an object")];
        object_units.push(EvalUnit::new(obj, gt_pos, hal_pos)?);
    }
    Ok((full_units, object_units))
}

fn recall_rows(units: &[EvalUnit], ks: &[usize]) -> Result<Vec<RecallRow>> {
    if units.is_empty() {
        return Ok(Vec::new());
    }
    let len = units.iter().map(|u| u.dist.len()).min().unwrap_or(0);
    ks.iter()
        .filter(|&&k| k <= len)
        .map(|&k| {
            Ok(RecallRow {
                k,
                recall: recall_at_k(units, k)?,
            })
        })
        .collect()
}

fn projection_units(
    cache: &VisionLogitCache,
    layer_pos: usize,
    labels: &Labels<'_>,
    objects: &ConstrainedSubset,
) -> Result<(Vec<EvalUnit>, Vec<EvalUnit>)> {
    let gt_pos: Vec<usize> = labels
        .gt_tokens
        .iter()
        .filter_map(|&t| objects.position(t))
        .collect();
    let mut full = Vec::new();
    let mut sub = Vec::new();
    for i in 0..cache.vision_count() {
        let row = cache.row(layer_pos, i)?;
        full.push(EvalUnit::new(
            log_softmax(&row)?,
            labels.gt_tokens.to_vec(),
            vec![],
        )?);
        sub.push(EvalUnit::new(
            cache.project(layer_pos, i, objects)?,
            gt_pos.clone(),
            vec![],
        )?);
    }
    Ok((full, sub))
}

/// Analyses labelled samples; samples without ground truth are skipped.
pub fn analyze(samples: &[Sample], cfg: &AnalysisConfig) -> Result<AnalysisReport> {
    if cfg.ks.is_empty() || cfg.ks.contains(&0) {
        return Err(Error::InvalidParameter(
            "ks must be non-empty and >= 1".into(),
        ));
    }
    let greedy = DecodingConfig {
        record_level: RecordLevel::FullProvenance,
        ..DecodingConfig::greedy()
    };
    let mut step_full = Vec::new();
    let mut step_obj = Vec::new();
    let mut layers: Vec<LayerId> = Vec::new();
    let mut per_layer: Vec<(Vec<EvalUnit>, Vec<EvalUnit>)> = Vec::new();
    let mut used = 0;

    for s in samples {
        let Some(gt) = s.ground_truth() else { continue };
        let vocab = s.vocab();
        let object_tokens = s.matcher().object_tokens(vocab);
        if object_tokens.is_empty() {
            continue;
        }
        let gt_tokens: Vec<TokenId> = object_tokens
            .iter()
            .copied()
            .filter(|&t| {
                s.matcher()
                    .object_of(vocab, t)
                    .is_some_and(|o| gt.contains(&o))
            })
            .collect();
        let labels = Labels {
            object_tokens: &object_tokens,
            gt_tokens: &gt_tokens,
        };
        used += 1;

        let (result, cache) = match (s.toy(), s.trace()) {
            (Some(b), _) => (
                decode(b, &greedy)?,
                crate::decoder::precompute_cache(b, &cfg.layer_scope)?,
            ),
            (_, Some(t)) => (replay(t, &greedy)?, t.cache_for(&cfg.layer_scope)?),
            _ => unreachable!("a sample is a toy scene or a trace"),
        };
        let (f, o) = hallucinated_step_units(&result, &labels)?;
        step_full.extend(f);
        step_obj.extend(o);

        let objects = ConstrainedSubset::from_indices(object_tokens.clone(), vocab.len())?;
        if layers.is_empty() {
            layers = cache.layer_ids().to_vec();
            per_layer = vec![(Vec::new(), Vec::new()); layers.len()];
        } else if layers != cache.layer_ids() {
            return Err(Error::InvalidParameter(
                "samples resolve the layer scope to different layers".into(),
            ));
        }
        for (pos, slot) in per_layer.iter_mut().enumerate() {
            let (f, o) = projection_units(&cache, pos, &labels, &objects)?;
            slot.0.extend(f);
            slot.1.extend(o);
        }
    }

    let (gt_max_avg, hal_max_avg) = if step_obj.is_empty() {
        (None, None)
    } else {
        let (g, h) = max_avg(&step_obj)?;
        (Some(g), Some(h))
    };
    let projection = layers
        .iter()
        .zip(&per_layer)
        .map(|(&layer, (f, o))| {
            Ok(LayerRecall {
                layer,
                full_vocab: recall_rows(f, &cfg.ks)?,
                object_subset: recall_rows(o, &cfg.ks)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(AnalysisReport {
        schema_version: ANALYSIS_SCHEMA_VERSION,
        samples: used,
        hallucinated_steps: step_full.len(),
        step_recall: recall_rows(&step_full, &cfg.ks)?,
        gt_max_avg,
        hal_max_avg,
        projection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{DataSource, ToySource};
    use crate::harness::experiment::load_samples;
    use crate::toy::SceneSuite;

    fn samples(n: usize, beta: f64) -> Vec<Sample> {
        let src = DataSource::Toy(ToySource {
            suite: SceneSuite {
                n_scenes: n,
                ..SceneSuite::default()
            },
            beta,
            ..ToySource::default()
        });
        load_samples(&src)
            .unwrap()
            .into_iter()
            .map(|s| s.unwrap())
            .collect()
    }

    #[test]
    fn bias_free_scenes_have_no_hallucinated_steps() {
        let r = analyze(&samples(10, 0.0), &AnalysisConfig::default()).unwrap();
        assert_eq!(r.hallucinated_steps, 0);
        assert!(r.step_recall.is_empty());
        assert_eq!(r.gt_max_avg, None);
        assert_eq!(r.projection.len(), 4);
    }

    #[test]
    fn object_subset_rows_skip_k_beyond_subset() {
        let r = analyze(&samples(5, 1.5), &AnalysisConfig::default()).unwrap();
        for layer in &r.projection {
            assert_eq!(layer.full_vocab.len(), 4);
            assert!(layer.object_subset.iter().all(|row| row.k <= 24));
        }
    }
}
