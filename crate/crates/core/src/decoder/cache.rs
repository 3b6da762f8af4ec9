use serde::{Deserialize, Serialize};

use super::backend::{LayerId, ModelBackend};
use crate::constraint::ConstrainedSubset;
use crate::distmath::{log_softmax, LogitVector, ProbVector, Space};
use crate::error::{Error, Result};

/// Which decoder layers contribute vision tokens to the selection grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerScope {
    /// The deepest candidate layer only.
    Last,
    /// Every even-numbered layer (1-based numbering).
    AllEven,
    Explicit(Vec<LayerId>),
}

impl LayerScope {
    pub fn resolve(&self, available: &[LayerId]) -> Result<Vec<LayerId>> {
        let layers = match self {
            LayerScope::Last => available.iter().max().copied().into_iter().collect(),
            LayerScope::AllEven => available.iter().copied().filter(|l| l % 2 == 0).collect(),
            LayerScope::Explicit(list) => {
                if let Some(&bad) = list.iter().find(|l| !available.contains(l)) {
                    return Err(Error::UnknownLayer(bad));
                }
                list.clone()
            }
        };
        if layers.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "layer scope {self:?} resolves to no layers"
            )));
        }
        Ok(layers)
    }
}

impl std::str::FromStr for LayerScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(LayerScope::Last),
            "all_even" => Ok(LayerScope::AllEven),
            list => list
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<LayerId>()
                        .map_err(|_| Error::InvalidParameter(format!("bad layer list entry {t:?}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(LayerScope::Explicit),
        }
    }
}

/// Source of per-(layer, vision token) logit rows for selection.
pub trait VisionRows: Sync {
    fn layer_ids(&self) -> &[LayerId];

    fn vision_count(&self) -> usize;

    fn row(&self, layer_pos: usize, index: usize) -> Result<LogitVector>;

    /// Projection of one row onto the subset.
    fn project(
        &self,
        layer_pos: usize,
        index: usize,
        subset: &ConstrainedSubset,
    ) -> Result<ProbVector> {
        let row = self.row(layer_pos, index)?;
        log_softmax(&crate::distmath::restrict(&row, subset)?)
    }

    fn grid_len(&self) -> usize {
        self.layer_ids().len() * self.vision_count()
    }
}

/// Precomputed vision logits, `|J| * |v|` rows over the full vocabulary,
/// stored as `f32` and widened on read.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionLogitCache {
    layer_ids: Vec<LayerId>,
    vision_count: usize,
    vocab_len: usize,
    data: Vec<f32>,
}

impl VisionLogitCache {
    /// Row-major data: layer-major, then vision token, then vocabulary.
    pub fn from_raw(
        layer_ids: Vec<LayerId>,
        vision_count: usize,
        vocab_len: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if layer_ids.is_empty() || vision_count == 0 || vocab_len == 0 {
            return Err(Error::EmptyGrid);
        }
        let expected = layer_ids.len() * vision_count * vocab_len;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: expected,
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                value: f64::from(data[i]),
            });
        }
        Ok(Self {
            layer_ids,
            vision_count,
            vocab_len,
            data,
        })
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab_len
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    fn offset(&self, layer_pos: usize, index: usize) -> Result<usize> {
        if layer_pos >= self.layer_ids.len() {
            return Err(Error::IndexOutOfRange {
                index: layer_pos,
                len: self.layer_ids.len(),
            });
        }
        if index >= self.vision_count {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.vision_count,
            });
        }
        Ok((layer_pos * self.vision_count + index) * self.vocab_len)
    }

    pub fn row_f32(&self, layer_pos: usize, index: usize) -> Result<&[f32]> {
        let start = self.offset(layer_pos, index)?;
        Ok(&self.data[start..start + self.vocab_len])
    }
}

impl VisionRows for VisionLogitCache {
    fn layer_ids(&self) -> &[LayerId] {
        &self.layer_ids
    }

    fn vision_count(&self) -> usize {
        self.vision_count
    }

    fn row(&self, layer_pos: usize, index: usize) -> Result<LogitVector> {
        LogitVector::from_f32(self.row_f32(layer_pos, index)?, Space::Full)
    }

    fn project(
        &self,
        layer_pos: usize,
        index: usize,
        subset: &ConstrainedSubset,
    ) -> Result<ProbVector> {
        let row = self.row_f32(layer_pos, index)?;
        let values = subset
            .indices()
            .iter()
            .map(|&i| {
                row.get(i)
                    .map(|&v| f64::from(v))
                    .ok_or(Error::IndexOutOfRange {
                        index: i,
                        len: row.len(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        log_softmax(&LogitVector::new(values, subset.space())?)
    }
}

/// Vision rows fetched from the backend on every access, at full precision.
///
/// This is the uncached reference path.
pub struct LiveVision<'a, B: ?Sized> {
    backend: &'a B,
    layer_ids: Vec<LayerId>,
}

impl<'a, B: ModelBackend + ?Sized> LiveVision<'a, B> {
    pub fn new(backend: &'a B, scope: &LayerScope) -> Result<Self> {
        if backend.vision_token_count() == 0 {
            return Err(Error::EmptyGrid);
        }
        let layer_ids = scope.resolve(&backend.candidate_layers())?;
        Ok(Self { backend, layer_ids })
    }
}

impl<B: ModelBackend + ?Sized> VisionRows for LiveVision<'_, B> {
    fn layer_ids(&self) -> &[LayerId] {
        &self.layer_ids
    }

    fn vision_count(&self) -> usize {
        self.backend.vision_token_count()
    }

    fn row(&self, layer_pos: usize, index: usize) -> Result<LogitVector> {
        let layer = *self
            .layer_ids
            .get(layer_pos)
            .ok_or(Error::IndexOutOfRange {
                index: layer_pos,
                len: self.layer_ids.len(),
            })?;
        self.backend.vision_logits(layer, index)
    }
}

/// Projects every (layer, vision token) pair once, before decoding starts.
pub fn precompute_cache<B: ModelBackend + ?Sized>(
    backend: &B,
    scope: &LayerScope,
) -> Result<VisionLogitCache> {
    let vision_count = backend.vision_token_count();
    if vision_count == 0 {
        return Err(Error::EmptyGrid);
    }
    let layer_ids = scope.resolve(&backend.candidate_layers())?;
    let vocab_len = backend.vocab().len();
    let mut data = Vec::with_capacity(layer_ids.len() * vision_count * vocab_len);
    for &layer in &layer_ids {
        for i in 0..vision_count {
            let row = backend.vision_logits(layer, i)?;
            if row.len() != vocab_len || row.space() != Space::Full {
                return Err(Error::Backend(format!(
                    "vision row ({layer}, {i}) has length {} over {:?}, expected {vocab_len} over full vocabulary",
                    row.len(),
                    row.space()
                )));
            }
            data.extend(row.values().iter().map(|&v| v as f32));
        }
    }
    VisionLogitCache::from_raw(layer_ids, vision_count, vocab_len, data)
}
