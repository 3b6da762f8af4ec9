use serde::{Deserialize, Serialize};

use crate::distmath::LogitVector;
use crate::error::Result;

pub type TokenId = usize;

/// Decoder layer number, 1-based.
pub type LayerId = u32;

/// Token id to string map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// First id whose string equals `s`.
    pub fn id_of(&self, s: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == s)
    }

    /// Concatenates token strings; unknown ids are skipped.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter().filter_map(|&i| self.token(i)).collect()
    }
}

/// The model side of decoding, reduced to language-head projections.
///
/// `vision_logits` must return the same vector for the same `(layer, index)`
/// on every call, and `step_logits` must be a pure function of the prefix.
pub trait ModelBackend: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    fn vision_token_count(&self) -> usize;

    /// Layers whose vision hidden states can be projected, ascending.
    fn candidate_layers(&self) -> Vec<LayerId>;

    fn vision_logits(&self, layer: LayerId, index: usize) -> Result<LogitVector>;

    /// Next-token logits after the emitted prefix (prompt excluded).
    fn step_logits(&self, prefix: &[TokenId]) -> Result<LogitVector>;

    fn eos_token(&self) -> TokenId;
}

impl<B: ModelBackend + ?Sized> ModelBackend for &B {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn vision_token_count(&self) -> usize {
        (**self).vision_token_count()
    }
    fn candidate_layers(&self) -> Vec<LayerId> {
        (**self).candidate_layers()
    }
    fn vision_logits(&self, layer: LayerId, index: usize) -> Result<LogitVector> {
        (**self).vision_logits(layer, index)
    }
    fn step_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        (**self).step_logits(prefix)
    }
    fn eos_token(&self) -> TokenId {
        (**self).eos_token()
    }
}
