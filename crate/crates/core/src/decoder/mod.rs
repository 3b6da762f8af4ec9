//! The decoding loop.
//!
//! Each step runs constrain → select → fuse → emit over the backend's step
//! logits. Vision rows are projected once into a [`VisionLogitCache`] before
//! the first step and sliced per step afterwards.

mod backend;
mod cache;

pub use backend::{LayerId, ModelBackend, TokenId, Vocabulary};
pub use cache::{precompute_cache, LayerScope, LiveVision, VisionLogitCache, VisionRows};

use serde::{Deserialize, Serialize};

use crate::constraint::{build_subset, ConstrainedSubset, DEFAULT_ALPHA};
use crate::distmath::{log_softmax, restrict, LogitVector, ProbVector, Space};
use crate::error::{Error, Result};
use crate::fusion::{emit_token, sample_token, FusionPolicy};
use crate::selection::{select, SelectionPolicy, SelectionResult};

pub const DEFAULT_MAX_TOKENS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Revisit,
    /// Plain argmax over the full vocabulary.
    GreedyBaseline,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "revisit" => Ok(Mode::Revisit),
            "greedy" | "greedy_baseline" => Ok(Mode::GreedyBaseline),
            _ => Err(Error::InvalidParameter(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordLevel {
    TokensOnly,
    FullProvenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampling {
    Greedy,
    Categorical { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingConfig {
    pub alpha: f64,
    /// `false` projects over the whole vocabulary instead of the APC subset.
    pub constrain_vocab: bool,
    pub layer_scope: LayerScope,
    pub selection: SelectionPolicy,
    pub fusion: FusionPolicy,
    pub max_tokens: usize,
    pub mode: Mode,
    pub record_level: RecordLevel,
    pub sampling: Sampling,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            constrain_vocab: true,
            layer_scope: LayerScope::AllEven,
            selection: SelectionPolicy::default(),
            fusion: FusionPolicy::default(),
            max_tokens: DEFAULT_MAX_TOKENS,
            mode: Mode::Revisit,
            record_level: RecordLevel::TokensOnly,
            sampling: Sampling::Greedy,
        }
    }
}

impl DecodingConfig {
    pub fn greedy() -> Self {
        Self {
            mode: Mode::GreedyBaseline,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::InvalidParameter("max_tokens must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        self.fusion.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeStepRecord {
    pub step: usize,
    pub subset: ConstrainedSubset,
    pub base_dist: ProbVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionResult>,
    pub final_dist: ProbVector,
    pub emitted: TokenId,
    /// Raw full-vocabulary step logits the step was computed from.
    pub step_logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxTokens,
    /// A replayed trace had no logits for the prefix reached.
    TraceExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub tokens: Vec<TokenId>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<DecodeStepRecord>,
    pub stop_reason: StopReason,
}

/// One pass of the step pipeline over already-computed step logits.
pub fn run_step<R: VisionRows + ?Sized>(
    step_logits: &LogitVector,
    vision: Option<&R>,
    config: &DecodingConfig,
    step: usize,
) -> Result<DecodeStepRecord> {
    if step_logits.space() != Space::Full {
        return Err(Error::SpaceMismatch {
            left: step_logits.space(),
            right: Space::Full,
        });
    }
    let vocab_len = step_logits.len();
    let base_full = log_softmax(step_logits)?;

    let (subset, base_dist, selection, final_dist) = match (config.mode, vision) {
        (Mode::GreedyBaseline, _) => {
            let subset = ConstrainedSubset::full(vocab_len)?;
            let base = base_full.with_space(subset.space());
            (subset, base.clone(), None, base)
        }
        (Mode::Revisit, None) => {
            return Err(Error::InvalidParameter(
                "revisit mode needs vision rows".into(),
            ))
        }
        (Mode::Revisit, Some(vision)) => {
            let subset = if config.constrain_vocab {
                build_subset(&base_full, config.alpha)?
            } else {
                ConstrainedSubset::full(vocab_len)?
            };
            let base = log_softmax(&restrict(step_logits, &subset)?)?;
            let sel = select(&base, vision, &subset, &config.selection, step, false)?;
            let fin = config.fusion.apply(&base, &sel.reference)?;
            (subset, base, Some(sel), fin)
        }
    };

    let emitted = match config.sampling {
        Sampling::Greedy => emit_token(&final_dist, &subset)?,
        Sampling::Categorical { seed } => sample_token(&final_dist, &subset, seed, step)?,
    };
    Ok(DecodeStepRecord {
        step,
        subset,
        base_dist,
        selection,
        final_dist,
        emitted,
        step_logits: step_logits.values().to_vec(),
    })
}

fn run_loop<B, R>(backend: &B, vision: Option<&R>, config: &DecodingConfig) -> Result<DecodeResult>
where
    B: ModelBackend + ?Sized,
    R: VisionRows + ?Sized,
{
    let eos = backend.eos_token();
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    let mut stop_reason = StopReason::MaxTokens;

    for t in 0..config.max_tokens {
        let logits = match backend.step_logits(&tokens) {
            Ok(l) => l,
            Err(Error::PrefixNotCovered { .. }) => {
                stop_reason = StopReason::TraceExhausted;
                break;
            }
            Err(e) => {
                return Err(Error::Step {
                    step: t,
                    source: Box::new(e),
                })
            }
        };
        if logits.len() != backend.vocab().len() {
            return Err(Error::Step {
                step: t,
                source: Box::new(Error::LengthMismatch {
                    left: logits.len(),
                    right: backend.vocab().len(),
                }),
            });
        }
        let record = run_step(&logits, vision, config, t).map_err(|e| Error::Step {
            step: t,
            source: Box::new(e),
        })?;
        let emitted = record.emitted;
        tokens.push(emitted);
        if config.record_level == RecordLevel::FullProvenance {
            steps.push(record);
        }
        if emitted == eos {
            stop_reason = StopReason::Eos;
            break;
        }
    }

    let text_tokens: Vec<TokenId> = tokens.iter().copied().filter(|&t| t != eos).collect();
    Ok(DecodeResult {
        text: backend.vocab().detokenize(&text_tokens),
        tokens,
        steps,
        stop_reason,
    })
}

/// Decodes with the vision cache built once up front.
pub fn decode<B: ModelBackend + ?Sized>(
    backend: &B,
    config: &DecodingConfig,
) -> Result<DecodeResult> {
    config.validate()?;
    match config.mode {
        Mode::GreedyBaseline => run_loop::<B, VisionLogitCache>(backend, None, config),
        Mode::Revisit => {
            let cache = precompute_cache(backend, &config.layer_scope)?;
            run_loop(backend, Some(&cache), config)
        }
    }
}

/// Decodes against a cache built elsewhere, e.g. shared across prompts for one image.
pub fn decode_with_cache<B: ModelBackend + ?Sized>(
    backend: &B,
    cache: &VisionLogitCache,
    config: &DecodingConfig,
) -> Result<DecodeResult> {
    config.validate()?;
    run_loop(backend, Some(cache), config)
}

/// Reference decode that asks the backend for vision rows at every step,
/// without the cache or its 32-bit storage.
pub fn decode_uncached<B: ModelBackend + ?Sized>(
    backend: &B,
    config: &DecodingConfig,
) -> Result<DecodeResult> {
    config.validate()?;
    let live = LiveVision::new(backend, &config.layer_scope)?;
    run_loop(backend, Some(&live), config)
}

/// Decodes offline from a recorded trace.
///
/// Revisit decoding that leaves the recorded path stops with
/// [`StopReason::TraceExhausted`] at the first uncovered prefix.
pub fn replay(
    trace: &crate::harness::trace::TraceFile,
    config: &DecodingConfig,
) -> Result<DecodeResult> {
    config.validate()?;
    let backend = trace.backend();
    match config.mode {
        Mode::GreedyBaseline => run_loop::<_, VisionLogitCache>(&backend, None, config),
        Mode::Revisit => {
            let cache = trace.cache_for(&config.layer_scope)?;
            run_loop(&backend, Some(&cache), config)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-token-then-eos backend with a fixed vision grid.
    struct Tiny {
        vocab: Vocabulary,
        vision: Vec<Vec<f64>>,
    }

    impl Tiny {
        fn new(vision: Vec<Vec<f64>>) -> Self {
            let vocab = ["<eos>", "a", "b", "c"].map(String::from).to_vec();
            Self {
                vocab: Vocabulary::new(vocab),
                vision,
            }
        }
    }

    impl ModelBackend for Tiny {
        fn vocab(&self) -> &Vocabulary {
            &self.vocab
        }
        fn vision_token_count(&self) -> usize {
            self.vision.len()
        }
        fn candidate_layers(&self) -> Vec<LayerId> {
            (1..=8).collect()
        }
        fn vision_logits(&self, layer: LayerId, index: usize) -> Result<LogitVector> {
            let mut row = self.vision[index].clone();
            row[0] += f64::from(layer) * 1e-3;
            LogitVector::full(row)
        }
        fn step_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
            match prefix.len() {
                // "a" narrowly beats "b".
                0 | 1 => LogitVector::full(vec![-9.0, 2.0, 1.8, -1.0]),
                _ => LogitVector::full(vec![9.0, 0.0, 0.0, 0.0]),
            }
        }
        fn eos_token(&self) -> TokenId {
            0
        }
    }

    #[test]
    fn layer_scope_resolution() {
        let b = Tiny::new(vec![vec![0.0; 4]]);
        let cache = precompute_cache(&b, &LayerScope::Last).unwrap();
        assert_eq!(cache.layer_ids(), &[8]);
        assert_eq!(cache.grid_len(), 1);
        let cache = precompute_cache(&b, &LayerScope::AllEven).unwrap();
        assert_eq!(cache.layer_ids(), &[2, 4, 6, 8]);
        assert!(matches!(
            precompute_cache(&b, &LayerScope::Explicit(vec![3, 9])),
            Err(Error::UnknownLayer(9))
        ));
        let empty = Tiny::new(vec![]);
        assert!(matches!(
            precompute_cache(&empty, &LayerScope::Last),
            Err(Error::EmptyGrid)
        ));
        assert_eq!(
            "2,4".parse::<LayerScope>().unwrap(),
            LayerScope::Explicit(vec![2, 4])
        );
    }

    #[test]
    fn cache_rows_match_backend_after_f32_round_trip() {
        let b = Tiny::new(vec![
            vec![0.1, 0.2, 0.3, 0.4],
            vec![1.0 / 3.0, 0.0, -0.7, 2.5],
        ]);
        let cache = precompute_cache(&b, &LayerScope::AllEven).unwrap();
        for (pos, &layer) in cache.layer_ids().iter().enumerate() {
            for i in 0..2 {
                let fresh: Vec<f64> = b
                    .vision_logits(layer, i)
                    .unwrap()
                    .values()
                    .iter()
                    .map(|&v| f64::from(v as f32))
                    .collect();
                assert_eq!(cache.row(pos, i).unwrap().values(), &fresh[..]);
            }
        }
    }

    #[test]
    fn vision_flips_close_call() {
        let b = Tiny::new(vec![vec![0.0, -3.0, 3.0, 0.0]]);
        let greedy = decode(&b, &DecodingConfig::greedy()).unwrap();
        assert_eq!(greedy.tokens, vec![1, 1, 0]);
        assert_eq!(greedy.text, "aa");
        assert_eq!(greedy.stop_reason, StopReason::Eos);
        let revisit = decode(&b, &DecodingConfig::default()).unwrap();
        assert_eq!(revisit.tokens, vec![2, 2, 0]);
    }

    #[test]
    fn max_tokens_caps_output() {
        let b = Tiny::new(vec![vec![0.0; 4]]);
        let cfg = DecodingConfig {
            max_tokens: 1,
            ..DecodingConfig::default()
        };
        let r = decode(&b, &cfg).unwrap();
        assert_eq!(r.tokens.len(), 1);
        assert_eq!(r.stop_reason, StopReason::MaxTokens);
        let bad = DecodingConfig {
            max_tokens: 0,
            ..DecodingConfig::default()
        };
        assert!(decode(&b, &bad).is_err());
    }

    #[test]
    fn full_provenance_records_every_step() {
        let b = Tiny::new(vec![vec![0.0, -3.0, 3.0, 0.0], vec![0.0; 4]]);
        let cfg = DecodingConfig {
            record_level: RecordLevel::FullProvenance,
            ..DecodingConfig::default()
        };
        let r = decode(&b, &cfg).unwrap();
        assert_eq!(r.steps.len(), r.tokens.len());
        for s in &r.steps {
            assert!(s.subset.contains(s.emitted));
            assert_eq!(s.selection.as_ref().unwrap().layer % 2, 0);
        }
        let g = decode(
            &b,
            &DecodingConfig {
                record_level: RecordLevel::FullProvenance,
                ..DecodingConfig::greedy()
            },
        )
        .unwrap();
        for s in &g.steps {
            assert!(s.selection.is_none());
            assert_eq!(s.emitted, s.subset.indices()[s.base_dist.argmax()]);
        }
    }

    struct Failing;

    impl ModelBackend for Failing {
        fn vocab(&self) -> &Vocabulary {
            static V: std::sync::OnceLock<Vocabulary> = std::sync::OnceLock::new();
            V.get_or_init(|| Vocabulary::new(vec!["x".into(), "y".into()]))
        }
        fn vision_token_count(&self) -> usize {
            1
        }
        fn candidate_layers(&self) -> Vec<LayerId> {
            vec![1]
        }
        fn vision_logits(&self, _: LayerId, _: usize) -> Result<LogitVector> {
            LogitVector::full(vec![0.0, 0.0])
        }
        fn step_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
            if prefix.len() < 2 {
                LogitVector::full(vec![1.0, 0.0])
            } else {
                Err(Error::Backend("device lost".into()))
            }
        }
        fn eos_token(&self) -> TokenId {
            1
        }
    }

    #[test]
    fn backend_errors_carry_step_index() {
        let cfg = DecodingConfig {
            layer_scope: LayerScope::Last,
            ..DecodingConfig::default()
        };
        let err = decode(&Failing, &cfg).unwrap_err();
        assert!(matches!(err, Error::Step { step: 2, .. }));
        assert!(matches!(err.root(), Error::Backend(_)));
    }
}
