//! Vision-token referenced decoding.
//!
//! At each step the base next-token distribution is restricted to a plausible
//! candidate set, every cached vision-token projection is scored against it on
//! that set, and the best-matching projection is fused back into the base
//! distribution before a token is emitted.

pub mod constraint;
pub mod decoder;
pub mod distmath;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod seed;
pub mod selection;
pub mod toy;

pub use constraint::{build_subset, ConstrainedSubset, DEFAULT_ALPHA};
pub use decoder::{
    decode, decode_uncached, decode_with_cache, precompute_cache, replay, DecodeResult,
    DecodeStepRecord, DecodingConfig, LayerId, LayerScope, Mode, ModelBackend, RecordLevel,
    Sampling, StopReason, TokenId, VisionLogitCache, VisionRows, Vocabulary,
};
pub use distmath::{cosine_sim, jsd, kl, log_softmax, restrict, LogitVector, ProbVector, Space};
pub use error::{Error, Result};
pub use fusion::{fuse_interpolate, fuse_poe, FusionKind, FusionPolicy};
pub use harness::trace::TraceFile;
pub use selection::{select, Criterion, SelectionPolicy, SelectionResult};
