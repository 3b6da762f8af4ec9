//! A deterministic synthetic vision-language backend with known ground truth.
//!
//! Captions follow a fixed grammar, `There are <obj>, <obj> and <obj>.`, and
//! every logit is a pure function of the scene, the bias profile and the
//! emitted prefix. At each object slot the intended object competes with its
//! co-occurrence partner, whose logit is raised by the bias strength; past a
//! per-object margin the greedy argmax names the partner instead, while the
//! intended object stays second.
//!
//! Vision rows peak on the object bound to the vision token and carry a weaker
//! secondary peak on the object's look-alike partner. Every row also has a few
//! spurious peaks on distractor tokens, so full-vocabulary top-1 is often
//! junk, and background rows peak on one object unrelated to the scene.
//! All logits are rounded to `f32` so that traces replay exactly.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{LayerId, ModelBackend, TokenId, Vocabulary};
use crate::distmath::LogitVector;
use crate::error::{Error, Result};
use crate::seed;

pub const EOS: TokenId = 0;
pub const THERE: TokenId = 1;
pub const ARE: TokenId = 2;
pub const COMMA: TokenId = 3;
pub const AND: TokenId = 4;
pub const PERIOD: TokenId = 5;
const FIRST_OBJECT: TokenId = 6;

pub const DEFAULT_VOCAB_SIZE: usize = 256;
pub const DEFAULT_LAYERS: u32 = 8;
pub const DEFAULT_VISION_TOKENS: usize = 32;

/// Objects listed in look-alike pairs: entries `2k` and `2k + 1` are partners.
pub const DEFAULT_OBJECTS: [&str; 24] = [
    "dog",
    "cat",
    "car",
    "truck",
    "fork",
    "knife",
    "cup",
    "bowl",
    "chair",
    "couch",
    "horse",
    "cow",
    "bus",
    "train",
    "bird",
    "kite",
    "laptop",
    "keyboard",
    "pizza",
    "sandwich",
    "boat",
    "surfboard",
    "umbrella",
    "handbag",
];

// Step-logit levels at an object slot.
const CONFIDENT: f64 = 20.0;
const TARGET: f64 = 10.0;
const UNMENTIONED_PRESENT: f64 = 7.0;
const ABSENT: f64 = 4.0;
const MENTIONED: f64 = 3.0;
const FUNCTION_AT_SLOT: f64 = -2.0;
const DISTRACTOR_CENTER: f64 = -3.0;
/// Margin by which the intended object leads its partner before bias,
/// drawn per (scene, object) from this range.
const MARGIN_RANGE: (f64, f64) = (0.5, 2.5);

// Vision-row shape.
const PEAK_SCALE: f64 = 4.0;
const PARTNER_GAP: f64 = 2.5;
const JUNK_PEAKS: usize = 3;
const VISION_NOISE: f64 = 0.5;
const LAYER_JITTER: f64 = 0.01;

fn f32_exact(x: f64) -> f64 {
    f64::from(x as f32)
}

/// Object words with their single-token ids, plus look-alike partners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInventory {
    words: Vec<String>,
    token_ids: Vec<TokenId>,
    partners: Vec<Option<usize>>,
    vocab: Vocabulary,
}

impl ObjectInventory {
    /// Builds a vocabulary of `vocab_size` tokens: six grammar tokens, the
    /// objects, then distractors. Consecutive word pairs become partners.
    pub fn new(words: &[&str], vocab_size: usize) -> Result<Self> {
        let needed = FIRST_OBJECT + words.len();
        if vocab_size < needed {
            return Err(Error::InvalidParameter(format!(
                "vocabulary of {vocab_size} cannot hold {} objects",
                words.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = words.iter().find(|w| !seen.insert(**w)) {
            return Err(Error::InvalidParameter(format!("duplicate object {dup:?}")));
        }
        let mut tokens: Vec<String> = ["</s>", " There", " are", ",", " and", "."]
            .map(String::from)
            .to_vec();
        tokens.extend(words.iter().map(|w| format!(" {w}")));
        tokens.extend((needed..vocab_size).map(|i| format!(" x{i:03}")));
        let partners = (0..words.len())
            .map(|i| {
                let j = i ^ 1;
                (j < words.len()).then_some(j)
            })
            .collect();
        Ok(Self {
            words: words.iter().map(|w| w.to_string()).collect(),
            token_ids: (0..words.len()).map(|i| FIRST_OBJECT + i).collect(),
            partners,
            vocab: Vocabulary::new(tokens),
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    pub fn token(&self, object: usize) -> TokenId {
        self.token_ids[object]
    }

    pub fn word(&self, object: usize) -> &str {
        &self.words[object]
    }

    pub fn partner(&self, object: usize) -> Option<usize> {
        self.partners[object]
    }

    /// Inventory index of an object token.
    pub fn object_of(&self, token: TokenId) -> Option<usize> {
        token
            .checked_sub(FIRST_OBJECT)
            .filter(|&i| i < self.words.len())
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn is_distractor(&self, token: TokenId) -> bool {
        token >= FIRST_OBJECT + self.words.len()
    }
}

impl Default for ObjectInventory {
    fn default() -> Self {
        Self::new(&DEFAULT_OBJECTS, DEFAULT_VOCAB_SIZE).expect("default inventory fits")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub scene_id: u64,
    pub seed: u64,
    /// Inventory indices in caption order.
    pub present: Vec<usize>,
    /// Per vision token: the bound object, or `None` for background.
    pub layout: Vec<Option<usize>>,
}

impl SyntheticScene {
    pub fn ground_truth(&self) -> &[usize] {
        &self.present
    }
}

/// Draws `n_objects` distinct objects and binds each of the
/// `n_vision_tokens` tokens to an object or to background. Every present
/// object gets at least one token.
pub fn build_scene(
    inventory: &ObjectInventory,
    seed: u64,
    n_objects: usize,
    n_vision_tokens: usize,
) -> Result<SyntheticScene> {
    if n_objects == 0 || n_objects > inventory.len() {
        return Err(Error::InvalidParameter(format!(
            "n_objects must lie in 1..={}, got {n_objects}",
            inventory.len()
        )));
    }
    if n_vision_tokens < n_objects {
        return Err(Error::InvalidParameter(format!(
            "{n_vision_tokens} vision tokens cannot cover {n_objects} objects"
        )));
    }
    let mut rng = seed::rng(seed, &[0x5ce7e]);
    let mut all: Vec<usize> = (0..inventory.len()).collect();
    all.shuffle(&mut rng);
    let present: Vec<usize> = all[..n_objects].to_vec();

    let mut layout: Vec<Option<usize>> = present.iter().map(|&o| Some(o)).collect();
    for _ in n_objects..n_vision_tokens {
        if rng.random_bool(0.5) {
            layout.push(None);
        } else {
            layout.push(Some(present[rng.random_range(0..n_objects)]));
        }
    }
    layout.shuffle(&mut rng);
    Ok(SyntheticScene {
        scene_id: seed,
        seed,
        present,
        layout,
    })
}

pub fn ground_truth(scene: &SyntheticScene) -> Vec<usize> {
    scene.present.clone()
}

/// Language-prior contamination and vision-row sharpness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProfile {
    /// Object word → (co-occurring word, bias strength).
    pub cooccurrence: BTreeMap<String, (String, f64)>,
    /// Vision peak sharpness; the bound object's logit is `4 * sharpness`.
    pub sharpness: f64,
    pub noise_seed: u64,
}

impl BiasProfile {
    /// Every look-alike pair biased both ways with the same strength.
    pub fn uniform(inventory: &ObjectInventory, beta: f64) -> Self {
        let cooccurrence = (0..inventory.len())
            .filter_map(|o| {
                inventory.partner(o).map(|p| {
                    (
                        inventory.word(o).to_string(),
                        (inventory.word(p).to_string(), beta),
                    )
                })
            })
            .collect();
        Self {
            cooccurrence,
            sharpness: 2.0,
            noise_seed: 0,
        }
    }

    pub fn none() -> Self {
        Self {
            cooccurrence: BTreeMap::new(),
            sharpness: 2.0,
            noise_seed: 0,
        }
    }
}

/// The synthetic backend for one scene.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    inventory: Arc<ObjectInventory>,
    scene: SyntheticScene,
    /// Per inventory object: (partner object, bias).
    bias: Vec<Option<(usize, f64)>>,
    sharpness: f64,
    noise_seed: u64,
    layers: u32,
}

pub fn toy_backend(
    inventory: Arc<ObjectInventory>,
    scene: SyntheticScene,
    bias: &BiasProfile,
) -> Result<ToyBackend> {
    if scene.present.is_empty() || scene.layout.is_empty() {
        return Err(Error::InvalidParameter("scene has no objects".into()));
    }
    if !bias.sharpness.is_finite() || bias.sharpness <= 0.0 {
        return Err(Error::InvalidParameter("sharpness must be > 0".into()));
    }
    let mut table = vec![None; inventory.len()];
    for (word, (partner, beta)) in &bias.cooccurrence {
        let o = inventory
            .index_of(word)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown object {word:?}")))?;
        let p = inventory
            .index_of(partner)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown object {partner:?}")))?;
        if !beta.is_finite() || *beta < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "negative bias for {word:?}"
            )));
        }
        table[o] = Some((p, *beta));
    }
    Ok(ToyBackend {
        inventory,
        scene,
        bias: table,
        sharpness: bias.sharpness,
        noise_seed: bias.noise_seed,
        layers: DEFAULT_LAYERS,
    })
}

/// What the grammar expects after a prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Fixed(TokenId),
    /// The k-th object slot (0-based).
    Object(usize),
}

impl ToyBackend {
    pub fn scene(&self) -> &SyntheticScene {
        &self.scene
    }

    pub fn inventory(&self) -> &ObjectInventory {
        &self.inventory
    }

    pub fn with_layers(mut self, layers: u32) -> Self {
        self.layers = layers.max(1);
        self
    }

    /// Margin of the intended object over its partner before bias.
    pub fn margin(&self, object: usize) -> f64 {
        let mut rng = seed::rng(self.scene.seed, &[0x3a6, object as u64]);
        rng.random_range(MARGIN_RANGE.0..MARGIN_RANGE.1)
    }

    pub fn slot(&self, prefix: &[TokenId]) -> Slot {
        let n = self.scene.present.len();
        let mentioned = prefix
            .iter()
            .filter(|&&t| self.inventory.object_of(t).is_some())
            .count();
        match prefix.last() {
            None => Slot::Fixed(THERE),
            Some(&THERE) => Slot::Fixed(ARE),
            Some(&ARE) | Some(&COMMA) | Some(&AND) if mentioned < n => Slot::Object(mentioned),
            Some(&t) if self.inventory.object_of(t).is_some() => {
                if mentioned >= n {
                    Slot::Fixed(PERIOD)
                } else if mentioned + 1 == n {
                    Slot::Fixed(AND)
                } else {
                    Slot::Fixed(COMMA)
                }
            }
            Some(&PERIOD) => Slot::Fixed(EOS),
            Some(_) => Slot::Fixed(PERIOD),
        }
    }

    fn prefix_rng(&self, prefix: &[TokenId]) -> rand_chacha::ChaCha8Rng {
        let mut parts = vec![0x57e9, prefix.len() as u64];
        parts.extend(prefix.iter().map(|&t| t as u64));
        seed::rng(self.scene.seed ^ self.noise_seed, &parts)
    }

    fn raw_step_logits(&self, prefix: &[TokenId]) -> Vec<f64> {
        let inv = &self.inventory;
        let vocab_len = inv.vocab().len();
        let mut rng = self.prefix_rng(prefix);
        let mut logits: Vec<f64> = (0..vocab_len)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        match self.slot(prefix) {
            Slot::Fixed(tok) => logits[tok] = CONFIDENT,
            Slot::Object(k) => {
                let target = self.scene.present[k];
                let mentioned: Vec<usize> =
                    prefix.iter().filter_map(|&t| inv.object_of(t)).collect();
                for (tok, l) in logits.iter_mut().enumerate() {
                    let noise = *l;
                    *l = if let Some(o) = inv.object_of(tok) {
                        if o == target {
                            TARGET
                        } else if mentioned.contains(&o) {
                            MENTIONED + 0.25 * noise
                        } else if self.scene.present.contains(&o) {
                            UNMENTIONED_PRESENT + 0.25 * noise
                        } else {
                            ABSENT + 0.25 * noise
                        }
                    } else if inv.is_distractor(tok) {
                        DISTRACTOR_CENTER + noise
                    } else {
                        FUNCTION_AT_SLOT + 0.25 * noise
                    };
                }
                if let Some((partner, beta)) = self.bias[target] {
                    let pt = inv.token(partner);
                    let biased = TARGET - self.margin(target) + beta;
                    logits[pt] = logits[pt].max(biased);
                }
            }
        }
        logits.into_iter().map(f32_exact).collect()
    }

    fn raw_vision_logits(&self, layer: LayerId, index: usize) -> Vec<f64> {
        let inv = &self.inventory;
        let vocab_len = inv.vocab().len();
        let peak = PEAK_SCALE * self.sharpness;

        let mut rng = seed::rng(self.scene.seed ^ self.noise_seed, &[0x7151, index as u64]);
        let mut row: Vec<f64> = (0..vocab_len)
            .map(|_| rng.random_range(-VISION_NOISE..VISION_NOISE))
            .collect();
        let first_distractor = FIRST_OBJECT + inv.len();
        if first_distractor < vocab_len {
            for _ in 0..JUNK_PEAKS {
                let t = rng.random_range(first_distractor..vocab_len);
                row[t] = peak * rng.random_range(0.85..1.15);
            }
        }
        match self.scene.layout[index] {
            Some(o) => {
                row[inv.token(o)] = peak;
                if let Some(p) = inv.partner(o) {
                    row[inv.token(p)] = peak - PARTNER_GAP;
                }
            }
            None => {
                let scene_related = |o: usize| {
                    self.scene
                        .present
                        .iter()
                        .any(|&p| p == o || inv.partner(p) == Some(o))
                };
                let absent: Vec<usize> = (0..inv.len()).filter(|&o| !scene_related(o)).collect();
                if !absent.is_empty() {
                    let o = absent[rng.random_range(0..absent.len())];
                    row[inv.token(o)] = peak * rng.random_range(0.85..1.15);
                }
            }
        }
        let mut jitter = seed::rng(
            self.scene.seed ^ self.noise_seed,
            &[0x1a7e, u64::from(layer), index as u64],
        );
        row.iter()
            .map(|v| f32_exact(v + LAYER_JITTER * jitter.random_range(-1.0..1.0)))
            .collect()
    }
}

impl ModelBackend for ToyBackend {
    fn vocab(&self) -> &Vocabulary {
        self.inventory.vocab()
    }

    fn vision_token_count(&self) -> usize {
        self.scene.layout.len()
    }

    fn candidate_layers(&self) -> Vec<LayerId> {
        (1..=self.layers).collect()
    }

    fn vision_logits(&self, layer: LayerId, index: usize) -> Result<LogitVector> {
        if layer == 0 || layer > self.layers {
            return Err(Error::UnknownLayer(layer));
        }
        if index >= self.scene.layout.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.scene.layout.len(),
            });
        }
        LogitVector::full(self.raw_vision_logits(layer, index))
    }

    fn step_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        LogitVector::full(self.raw_step_logits(prefix))
    }

    fn eos_token(&self) -> TokenId {
        EOS
    }
}

/// Wraps a backend so every vision row is constant, i.e. a neutral expert.
pub struct UniformVision<B>(pub B);

impl<B: ModelBackend> ModelBackend for UniformVision<B> {
    fn vocab(&self) -> &Vocabulary {
        self.0.vocab()
    }
    fn vision_token_count(&self) -> usize {
        self.0.vision_token_count()
    }
    fn candidate_layers(&self) -> Vec<LayerId> {
        self.0.candidate_layers()
    }
    fn vision_logits(&self, _layer: LayerId, _index: usize) -> Result<LogitVector> {
        LogitVector::full(vec![0.0; self.0.vocab().len()])
    }
    fn step_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        self.0.step_logits(prefix)
    }
    fn eos_token(&self) -> TokenId {
        self.0.eos_token()
    }
}

/// Object mentions in an emitted token sequence, in order, duplicates kept.
pub fn mentions(inventory: &ObjectInventory, tokens: &[TokenId]) -> Vec<usize> {
    tokens
        .iter()
        .filter_map(|&t| inventory.object_of(t))
        .collect()
}

/// Settings for a reproducible batch of scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSuite {
    pub n_scenes: usize,
    pub master_seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub n_vision_tokens: usize,
}

impl Default for SceneSuite {
    fn default() -> Self {
        Self {
            n_scenes: 200,
            master_seed: 0,
            min_objects: 2,
            max_objects: 4,
            n_vision_tokens: DEFAULT_VISION_TOKENS,
        }
    }
}

impl SceneSuite {
    /// Scene `k` depends only on `(master_seed, k)`.
    pub fn scene(&self, inventory: &ObjectInventory, k: usize) -> Result<SyntheticScene> {
        let s = seed::derive_seed(self.master_seed, k as u64);
        let lo = self.min_objects.max(1);
        let hi = self.max_objects.max(lo);
        let n = lo + (s % (hi - lo + 1) as u64) as usize;
        let mut scene = build_scene(inventory, s, n, self.n_vision_tokens)?;
        scene.scene_id = k as u64;
        Ok(scene)
    }

    pub fn scenes(&self, inventory: &ObjectInventory) -> Result<Vec<SyntheticScene>> {
        (0..self.n_scenes)
            .map(|k| self.scene(inventory, k))
            .collect()
    }
}
