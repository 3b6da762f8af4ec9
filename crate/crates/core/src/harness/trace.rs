//! Binary logit trace files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes   "VRTRACE\x01"
//! header_len  u64
//! header      header_len bytes of UTF-8 JSON (TraceHeader)
//! payload     f32 values
//!               vision grid: |J| * n_vision rows of |V|, layer-major
//!               step rows:   one row of |V| per entry of header.steps
//! ```
//!
//! `header.payload_crc32` is the CRC-32 (IEEE) of the payload bytes. The
//! header is serialized from a fixed struct layout, so write → read → write
//! reproduces the file byte for byte.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{
    precompute_cache, LayerId, LayerScope, ModelBackend, TokenId, VisionLogitCache, VisionRows,
    Vocabulary,
};
use crate::distmath::LogitVector;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"VRTRACE\x01";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub vocab: Vocabulary,
    pub n_vision: usize,
    /// 1-based decoder layer numbers of the vision grid, in payload order.
    pub layer_ids: Vec<LayerId>,
    pub eos_id: TokenId,
    pub dtype: String,
    pub prompt_tokens: Vec<TokenId>,
    /// Generated-token prefix of each step row, in payload order.
    pub steps: Vec<Vec<TokenId>>,
    pub payload_crc32: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Annotations>,
}

/// Optional evaluation labels carried alongside the logits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    /// Object words mentions are matched against.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub object_words: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gt_objects: Vec<String>,
    /// Expected answer for yes/no prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<bool>,
}

/// Descriptive fields of a trace that are not logits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceMeta {
    pub prompt_tokens: Vec<TokenId>,
    pub annotations: Option<Annotations>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    header: TraceHeader,
    vision: VisionLogitCache,
    steps: Vec<Vec<f32>>,
}

impl TraceFile {
    /// Assembles a trace from a vision grid and step rows keyed by prefix.
    pub fn new(
        vocab: Vocabulary,
        eos_id: TokenId,
        vision: VisionLogitCache,
        steps: Vec<(Vec<TokenId>, Vec<f32>)>,
        meta: TraceMeta,
    ) -> Result<Self> {
        let (prefixes, rows): (Vec<_>, Vec<_>) = steps.into_iter().unzip();
        let mut header = TraceHeader {
            format_version: FORMAT_VERSION,
            vocab,
            n_vision: vision.vision_count(),
            layer_ids: vision.layer_ids().to_vec(),
            eos_id,
            dtype: DTYPE.to_string(),
            prompt_tokens: meta.prompt_tokens,
            steps: prefixes,
            payload_crc32: 0,
            annotations: meta.annotations,
        };
        let trace = Self {
            header: header.clone(),
            vision,
            steps: rows,
        };
        trace.check_shapes()?;
        header.payload_crc32 = crc32fast::hash(&trace.payload_bytes());
        Ok(Self { header, ..trace })
    }

    /// Records the full candidate-layer grid and the step logits at each
    /// prefix of `paths` (every proper prefix plus the path itself).
    pub fn record<B: ModelBackend + ?Sized>(
        backend: &B,
        paths: &[Vec<TokenId>],
        meta: TraceMeta,
    ) -> Result<Self> {
        let layers = backend.candidate_layers();
        let vision = precompute_cache(backend, &LayerScope::Explicit(layers))?;
        let mut seen = std::collections::HashSet::new();
        let mut steps = Vec::new();
        for path in paths {
            let eos_at = path.iter().position(|&t| t == backend.eos_token());
            let stop = eos_at.unwrap_or(path.len());
            for t in 0..=stop.min(path.len()) {
                if t == path.len() && eos_at.is_some() {
                    break;
                }
                let prefix = path[..t].to_vec();
                if !seen.insert(prefix.clone()) {
                    continue;
                }
                let row = backend.step_logits(&prefix)?;
                steps.push((prefix, row.values().iter().map(|&v| v as f32).collect()));
            }
        }
        Self::new(
            backend.vocab().clone(),
            backend.eos_token(),
            vision,
            steps,
            meta,
        )
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn vision(&self) -> &VisionLogitCache {
        &self.vision
    }

    pub fn step_rows(&self) -> &[Vec<f32>] {
        &self.steps
    }

    pub fn annotations(&self) -> Option<&Annotations> {
        self.header.annotations.as_ref()
    }

    /// Offline backend answering from the recorded rows.
    pub fn backend(&self) -> TraceBackend<'_> {
        let index = self
            .header
            .steps
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        TraceBackend { trace: self, index }
    }

    /// Vision cache over the layers of `scope`, resolved against the
    /// recorded layers.
    pub fn cache_for(&self, scope: &LayerScope) -> Result<VisionLogitCache> {
        precompute_cache(&self.backend(), scope)
    }

    fn check_shapes(&self) -> Result<()> {
        let h = &self.header;
        let v = h.vocab.len();
        if v == 0 {
            return Err(Error::Format("empty vocabulary".into()));
        }
        if h.eos_id >= v {
            return Err(Error::Format(format!(
                "eos id {} outside vocabulary",
                h.eos_id
            )));
        }
        if self.vision.vocab_len() != v {
            return Err(Error::Format(format!(
                "vision rows have {} entries, vocabulary has {v}",
                self.vision.vocab_len()
            )));
        }
        if let Some(row) = self.steps.iter().find(|r| r.len() != v) {
            return Err(Error::Format(format!(
                "step row has {} entries, vocabulary has {v}",
                row.len()
            )));
        }
        if h.steps.len() != self.steps.len() {
            return Err(Error::Format(
                "prefix table and step rows differ in count".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &h.steps {
            if let Some(&t) = p.iter().find(|&&t| t >= v) {
                return Err(Error::Format(format!(
                    "prefix token {t} outside vocabulary"
                )));
            }
            if !seen.insert(p) {
                return Err(Error::Format(format!("duplicate prefix {p:?}")));
            }
        }
        for (i, row) in self.steps.iter().enumerate() {
            if let Some(j) = row.iter().position(|x| !x.is_finite()) {
                return Err(Error::Format(format!(
                    "non-finite value in step row {i} at {j}"
                )));
            }
        }
        Ok(())
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let n = self.vision.raw().len() + self.steps.iter().map(Vec::len).sum::<usize>();
        let mut out = Vec::with_capacity(4 * n);
        for x in self.vision.raw().iter().chain(self.steps.iter().flatten()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload = self.payload_bytes();
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..8] != MAGIC {
            return Err(Error::Format("missing trace magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format(format!("header length {header_len} exceeds file")))?;
        let header: TraceHeader = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Version(header.format_version));
        }
        if header.dtype != DTYPE {
            return Err(Error::Format(format!(
                "unsupported dtype {:?}",
                header.dtype
            )));
        }

        let payload = &bytes[header_end..];
        let v = header.vocab.len();
        let rows = header.layer_ids.len() * header.n_vision + header.steps.len();
        let expected = rows
            .checked_mul(v)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, header shape implies {expected}",
                payload.len()
            )));
        }
        let actual = crc32fast::hash(payload);
        if actual != header.payload_crc32 {
            return Err(Error::Checksum {
                expected: header.payload_crc32,
                actual,
            });
        }

        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let grid = header.layer_ids.len() * header.n_vision * v;
        let vision = VisionLogitCache::from_raw(
            header.layer_ids.clone(),
            header.n_vision,
            v,
            floats[..grid].to_vec(),
        )
        .map_err(|e| Error::Format(format!("vision grid: {e}")))?;
        let steps = floats[grid..]
            .chunks_exact(v.max(1))
            .map(<[f32]>::to_vec)
            .collect();
        let trace = Self {
            header,
            vision,
            steps,
        };
        trace.check_shapes()?;
        Ok(trace)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            format_version: self.header.format_version,
            vocab_len: self.header.vocab.len(),
            n_vision: self.header.n_vision,
            layer_ids: self.header.layer_ids.clone(),
            step_rows: self.steps.len(),
            longest_prefix: self.header.steps.iter().map(Vec::len).max().unwrap_or(0),
            payload_crc32: self.header.payload_crc32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub format_version: u32,
    pub vocab_len: usize,
    pub n_vision: usize,
    pub layer_ids: Vec<LayerId>,
    pub step_rows: usize,
    pub longest_prefix: usize,
    pub payload_crc32: u32,
}

/// [`ModelBackend`] over a recorded trace. Prefixes without a step row yield
/// [`Error::PrefixNotCovered`].
pub struct TraceBackend<'a> {
    trace: &'a TraceFile,
    index: HashMap<Vec<TokenId>, usize>,
}

impl ModelBackend for TraceBackend<'_> {
    fn vocab(&self) -> &Vocabulary {
        &self.trace.header.vocab
    }

    fn vision_token_count(&self) -> usize {
        self.trace.header.n_vision
    }

    fn candidate_layers(&self) -> Vec<LayerId> {
        self.trace.header.layer_ids.clone()
    }

    fn vision_logits(&self, layer: LayerId, index: usize) -> Result<LogitVector> {
        let pos = self
            .trace
            .header
            .layer_ids
            .iter()
            .position(|&l| l == layer)
            .ok_or(Error::UnknownLayer(layer))?;
        LogitVector::from_f32(
            self.trace.vision.row_f32(pos, index)?,
            crate::distmath::Space::Full,
        )
    }

    fn step_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        let i = self.index.get(prefix).ok_or(Error::PrefixNotCovered {
            prefix_len: prefix.len(),
        })?;
        LogitVector::from_f32(&self.trace.steps[*i], crate::distmath::Space::Full)
    }

    fn eos_token(&self) -> TokenId {
        self.trace.header.eos_id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TraceFile {
        let vocab = Vocabulary::new(["<e>", "a", "b"].map(String::from).to_vec());
        let cache = VisionLogitCache::from_raw(
            vec![2, 4],
            2,
            3,
            vec![
                0.5, -1.0, 2.0, 0.0, 0.25, 1.5, 3.0, -2.0, 0.125, 1.0, 1.0, 1.0,
            ],
        )
        .unwrap();
        TraceFile::new(
            vocab,
            0,
            cache,
            vec![
                (vec![], vec![0.0, 1.0, 0.5]),
                (vec![1], vec![2.0, 0.0, 0.0]),
            ],
            TraceMeta::default(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let t = tiny();
        let bytes = t.to_bytes().unwrap();
        let back = TraceFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = tiny().to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(
            TraceFile::from_bytes(&bytes),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_a_shape_error() {
        let bytes = tiny().to_bytes().unwrap();
        let err = TraceFile::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, Error::Format(m) if m.contains("payload")));
    }

    #[test]
    fn version_and_magic_checked() {
        let t = tiny();
        let mut h = t.header.clone();
        h.format_version = 7;
        let header = serde_json::to_vec(&h).unwrap();
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&t.payload_bytes());
        assert!(matches!(
            TraceFile::from_bytes(&bytes),
            Err(Error::Version(7))
        ));
        assert!(matches!(
            TraceFile::from_bytes(b"not a trace file"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn backend_serves_rows_and_reports_gaps() {
        let t = tiny();
        let b = t.backend();
        assert_eq!(b.step_logits(&[1]).unwrap().values(), &[2.0, 0.0, 0.0]);
        assert!(matches!(
            b.step_logits(&[2]),
            Err(Error::PrefixNotCovered { prefix_len: 1 })
        ));
        assert_eq!(b.vision_logits(4, 0).unwrap().values(), &[3.0, -2.0, 0.125]);
        assert_eq!(b.vision_logits(4, 1).unwrap().values(), &[1.0, 1.0, 1.0]);
        assert!(matches!(b.vision_logits(3, 0), Err(Error::UnknownLayer(3))));
        let last = t.cache_for(&LayerScope::Last).unwrap();
        assert_eq!(last.layer_ids(), &[4]);
    }

    #[test]
    fn rejects_wrong_row_width() {
        let vocab = Vocabulary::new(["<e>", "a"].map(String::from).to_vec());
        let cache = VisionLogitCache::from_raw(vec![1], 1, 2, vec![0.0, 0.0]).unwrap();
        let err = TraceFile::new(
            vocab,
            0,
            cache,
            vec![(vec![], vec![0.0; 3])],
            TraceMeta::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
