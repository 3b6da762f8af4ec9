//! Batch runner: every grid point × every sample, then metric tables.
//!
//! Per-sample seeds come from [`crate::seed::derive_seed`] on the master
//! seed and the sample's position in the source list, and are shared by all
//! grid points. Samples run in parallel; results are assembled in sample
//! order, so the report does not depend on scheduling.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig, GridPoint, MetricKind};
use super::trace::TraceFile;
use crate::decoder::{
    decode, replay, DecodeResult, DecodingConfig, RecordLevel, Sampling, StopReason, TokenId,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::metrics::{binary_qa, chair, parse_yes_no, BinaryQa, CaptionEval, ChairScores};
use crate::seed::derive_seed;
use crate::toy::{toy_backend, ObjectInventory, ToyBackend};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Maps emitted tokens to object mentions by exact match of the trimmed
/// token string against an object word list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionMatcher {
    words: Vec<String>,
}

impl MentionMatcher {
    pub fn new(words: Vec<String>) -> Self {
        Self { words }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn object_of(&self, vocab: &Vocabulary, token: TokenId) -> Option<usize> {
        let s = vocab.token(token)?.trim();
        self.words.iter().position(|w| w == s)
    }

    pub fn mentions(&self, vocab: &Vocabulary, tokens: &[TokenId]) -> Vec<usize> {
        tokens
            .iter()
            .filter_map(|&t| self.object_of(vocab, t))
            .collect()
    }

    /// Vocabulary ids of every object word that is a single token, ascending.
    pub fn object_tokens(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        (0..vocab.len())
            .filter(|&t| self.object_of(vocab, t).is_some())
            .collect()
    }
}

enum SampleData {
    Toy(ToyBackend),
    Trace(Box<TraceFile>),
}

/// One loaded input with its evaluation labels.
pub struct Sample {
    pub id: String,
    pub index: usize,
    data: SampleData,
    matcher: MentionMatcher,
    gt: Option<BTreeSet<usize>>,
    answer: Option<bool>,
}

impl Sample {
    pub fn decode(&self, config: &DecodingConfig) -> Result<DecodeResult> {
        match &self.data {
            SampleData::Toy(b) => decode(b, config),
            SampleData::Trace(t) => replay(t, config),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        match &self.data {
            SampleData::Toy(b) => crate::decoder::ModelBackend::vocab(b),
            SampleData::Trace(t) => &t.header().vocab,
        }
    }

    pub fn matcher(&self) -> &MentionMatcher {
        &self.matcher
    }

    pub fn ground_truth(&self) -> Option<&BTreeSet<usize>> {
        self.gt.as_ref()
    }

    pub fn toy(&self) -> Option<&ToyBackend> {
        match &self.data {
            SampleData::Toy(b) => Some(b),
            SampleData::Trace(_) => None,
        }
    }

    pub fn trace(&self) -> Option<&TraceFile> {
        match &self.data {
            SampleData::Trace(t) => Some(t),
            SampleData::Toy(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub sample_id: String,
    pub error: String,
}

/// Loads every sample of the source. A sample that cannot be loaded becomes
/// a failure entry instead of aborting the batch.
pub fn load_samples(
    source: &DataSource,
) -> Result<Vec<std::result::Result<Sample, SampleFailure>>> {
    match source {
        DataSource::Toy(toy) => {
            let inventory = Arc::new(ObjectInventory::default());
            let bias = toy.bias(&inventory);
            let matcher = MentionMatcher::new(inventory.words().to_vec());
            let scenes = toy.suite.scenes(&inventory)?;
            Ok(scenes
                .into_iter()
                .enumerate()
                .map(|(index, scene)| {
                    let id = format!("scene-{:04}", scene.scene_id);
                    let gt = scene.present.iter().copied().collect();
                    toy_backend(inventory.clone(), scene, &bias)
                        .map(|b| Sample {
                            id: id.clone(),
                            index,
                            data: SampleData::Toy(b),
                            matcher: matcher.clone(),
                            gt: Some(gt),
                            answer: None,
                        })
                        .map_err(|e| SampleFailure {
                            sample_id: id,
                            error: e.to_string(),
                        })
                })
                .collect())
        }
        DataSource::Trace(src) => Ok(src
            .paths
            .iter()
            .enumerate()
            .map(|(index, path)| load_trace_sample(index, path))
            .collect()),
    }
}

fn load_trace_sample(index: usize, path: &Path) -> std::result::Result<Sample, SampleFailure> {
    let fallback_id = path.display().to_string();
    let trace = TraceFile::read(path).map_err(|e| SampleFailure {
        sample_id: fallback_id.clone(),
        error: e.to_string(),
    })?;
    let ann = trace.annotations().cloned().unwrap_or_default();
    let id = ann.sample_id.clone().unwrap_or(fallback_id);
    let matcher = MentionMatcher::new(ann.object_words.clone());
    let gt = if ann.object_words.is_empty() {
        None
    } else {
        let mut set = BTreeSet::new();
        for w in &ann.gt_objects {
            let i = ann
                .object_words
                .iter()
                .position(|o| o == w)
                .ok_or_else(|| SampleFailure {
                    sample_id: id.clone(),
                    error: format!("ground-truth object {w:?} is not in the object list"),
                })?;
            set.insert(i);
        }
        Some(set)
    };
    Ok(Sample {
        id,
        index,
        data: SampleData::Trace(Box::new(trace)),
        matcher,
        gt,
        answer: ann.answer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub stop_reason: StopReason,
    pub mentions: Vec<String>,
    pub hallucinated: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ground_truth: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chair: Option<ChairScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_qa: Option<BinaryQa>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub label: String,
    pub decoding: DecodingConfig,
    pub metrics: PointMetrics,
    pub samples: Vec<SampleOutcome>,
    pub failures: Vec<SampleFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub grid_size: usize,
    pub n_samples: usize,
    pub master_seed: u64,
    pub points: Vec<PointReport>,
    /// Samples that could not be loaded at all.
    pub load_failures: Vec<SampleFailure>,
}

impl ExperimentReport {
    pub fn failure_count(&self) -> usize {
        self.load_failures.len() + self.points.iter().map(|p| p.failures.len()).sum::<usize>()
    }

    pub fn point(&self, label_prefix: &str) -> Option<&PointReport> {
        self.points
            .iter()
            .find(|p| p.label.starts_with(label_prefix))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes the report and a `<name>.meta.json` sidecar with wall-clock data.
    pub fn write(&self, path: &Path, elapsed: std::time::Duration) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))?;
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let meta = serde_json::json!({
            "finished_unix": stamp,
            "elapsed_ms": elapsed.as_millis() as u64,
        });
        let mut side = path.as_os_str().to_owned();
        side.push(".meta.json");
        let side = PathBuf::from(side);
        std::fs::write(&side, serde_json::to_string_pretty(&meta)? + "\n")
            .map_err(|e| Error::io(&side, e))
    }
}

/// The decoding settings a grid point uses for one sample.
pub fn sample_config(
    point: &DecodingConfig,
    master_seed: u64,
    sample_index: usize,
) -> DecodingConfig {
    let sample_seed = derive_seed(master_seed, sample_index as u64);
    let mut d = point.clone();
    d.selection.seed = derive_seed(point.selection.seed, sample_seed);
    if let Sampling::Categorical { seed } = d.sampling {
        d.sampling = Sampling::Categorical {
            seed: derive_seed(seed, sample_seed),
        };
    }
    d
}

fn run_sample(
    sample: &Sample,
    point: &GridPoint,
    point_index: usize,
    cfg: &ExperimentConfig,
) -> std::result::Result<SampleOutcome, SampleFailure> {
    let fail = |e: Error| SampleFailure {
        sample_id: sample.id.clone(),
        error: e.to_string(),
    };
    let mut d = sample_config(&point.decoding, cfg.master_seed, sample.index);
    if cfg.provenance_dir.is_some() {
        d.record_level = RecordLevel::FullProvenance;
    }
    let result = sample.decode(&d).map_err(fail)?;

    let provenance = match &cfg.provenance_dir {
        Some(dir) => {
            let sub = dir.join(format!("point-{point_index:03}"));
            std::fs::create_dir_all(&sub).map_err(|e| fail(Error::io(&sub, e)))?;
            let safe: String = sample
                .id
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                        c
                    } else {
                        '_'
                    }
                })
                .collect();
            let path = sub.join(format!("{safe}.json"));
            let json = serde_json::to_string(&result).map_err(|e| fail(e.into()))?;
            std::fs::write(&path, json).map_err(|e| fail(Error::io(&path, e)))?;
            Some(path)
        }
        None => None,
    };

    let vocab = sample.vocab();
    let words = sample.matcher.words();
    let mentions = sample.matcher.mentions(vocab, &result.tokens);
    let hallucinated = match &sample.gt {
        Some(gt) => mentions
            .iter()
            .filter(|m| !gt.contains(m))
            .map(|&m| words[m].clone())
            .collect(),
        None => Vec::new(),
    };
    Ok(SampleOutcome {
        sample_id: sample.id.clone(),
        tokens: result.tokens,
        text: result.text,
        stop_reason: result.stop_reason,
        mentions: mentions.iter().map(|&m| words[m].clone()).collect(),
        hallucinated,
        ground_truth: sample
            .gt
            .iter()
            .flatten()
            .map(|&g| words[g].clone())
            .collect(),
        provenance,
    })
}

fn point_metrics(
    cfg: &ExperimentConfig,
    samples: &[&Sample],
    outcomes: &[(usize, SampleOutcome)],
    failures: &mut Vec<SampleFailure>,
) -> Result<PointMetrics> {
    let mut m = PointMetrics::default();
    for kind in &cfg.metrics {
        match kind {
            MetricKind::Chair => {
                let mut caps = Vec::new();
                for (i, o) in outcomes {
                    let s = samples[*i];
                    match &s.gt {
                        Some(gt) => caps.push(CaptionEval {
                            mentions: s.matcher.mentions(s.vocab(), &o.tokens),
                            gt: gt.clone(),
                        }),
                        None => failures.push(SampleFailure {
                            sample_id: s.id.clone(),
                            error: "no object annotations for CHAIR".into(),
                        }),
                    }
                }
                m.chair = (!caps.is_empty()).then(|| chair(&caps)).transpose()?;
            }
            MetricKind::BinaryQa => {
                let mut preds = Vec::new();
                let mut labels = Vec::new();
                for (i, o) in outcomes {
                    let s = samples[*i];
                    match s.answer {
                        Some(a) => {
                            preds.push(parse_yes_no(&o.text));
                            labels.push(a);
                        }
                        None => failures.push(SampleFailure {
                            sample_id: s.id.clone(),
                            error: "no yes/no label".into(),
                        }),
                    }
                }
                m.binary_qa = (!preds.is_empty())
                    .then(|| binary_qa(&preds, &labels))
                    .transpose()?;
            }
        }
    }
    Ok(m)
}

/// Runs every grid point over every sample.
///
/// Per-sample errors are recorded in the report; only configuration errors
/// abort the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let points = cfg.grid_points();
    let loaded = load_samples(&cfg.source)?;
    let n_samples = loaded.len();
    let mut samples = Vec::new();
    let mut load_failures = Vec::new();
    for s in loaded {
        match s {
            Ok(s) => samples.push(s),
            Err(f) => load_failures.push(f),
        }
    }
    let sample_refs: Vec<&Sample> = samples.iter().collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;

    let mut reports = Vec::with_capacity(points.len());
    for (pi, point) in points.iter().enumerate() {
        let results: Vec<std::result::Result<SampleOutcome, SampleFailure>> = pool.install(|| {
            sample_refs
                .par_iter()
                .map(|s| run_sample(s, point, pi, cfg))
                .collect()
        });
        let mut outcomes = Vec::new();
        let mut failures = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(o) => outcomes.push((i, o)),
                Err(f) => failures.push(f),
            }
        }
        let metrics = point_metrics(cfg, &sample_refs, &outcomes, &mut failures)?;
        reports.push(PointReport {
            label: point.label.clone(),
            decoding: point.decoding.clone(),
            metrics,
            samples: outcomes.into_iter().map(|(_, o)| o).collect(),
            failures,
        });
    }

    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        grid_size: points.len(),
        n_samples,
        master_seed: cfg.master_seed,
        points: reports,
        load_failures,
    })
}

/// Recomputes CHAIR for a stored point from its outcomes' mention and
/// ground-truth words.
pub fn recompute_chair(point: &PointReport) -> Result<ChairScores> {
    let mut words: Vec<String> = Vec::new();
    let mut caps = Vec::new();
    for o in &point.samples {
        let mut id = |w: &str| -> usize {
            match words.iter().position(|x| x == w) {
                Some(i) => i,
                None => {
                    words.push(w.to_string());
                    words.len() - 1
                }
            }
        };
        let mentions = o.mentions.iter().map(|m| id(m)).collect();
        let gt = o.ground_truth.iter().map(|g| id(g)).collect();
        caps.push(CaptionEval { mentions, gt });
    }
    chair(&caps)
}

/// Writes one trace per toy scene, recorded along the greedy path and the
/// path of `revisit`, with object annotations. Returns the paths in scene order.
pub fn write_toy_traces(
    source: &super::config::ToySource,
    revisit: &DecodingConfig,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    use super::trace::{Annotations, TraceMeta};
    let inventory = Arc::new(ObjectInventory::default());
    let bias = source.bias(&inventory);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scenes = source.suite.scenes(&inventory)?;
    let results: Vec<Result<PathBuf>> = scenes
        .into_par_iter()
        .map(|scene| {
            let id = format!("scene-{:04}", scene.scene_id);
            let annotations = Annotations {
                sample_id: Some(id.clone()),
                object_words: inventory.words().to_vec(),
                gt_objects: scene
                    .present
                    .iter()
                    .map(|&o| inventory.word(o).to_string())
                    .collect(),
                answer: None,
            };
            let b = toy_backend(inventory.clone(), scene, &bias)?;
            let greedy = decode(&b, &DecodingConfig::greedy())?;
            let rev = decode(&b, revisit)?;
            let meta = TraceMeta {
                prompt_tokens: Vec::new(),
                annotations: Some(annotations),
            };
            let trace = TraceFile::record(&b, &[greedy.tokens, rev.tokens], meta)?;
            let path = dir.join(format!("{id}.vrt"));
            trace.write(&path)?;
            Ok(path)
        })
        .collect();
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Mode;
    use crate::harness::config::{AblationGrid, ToySource, TraceSource};
    use crate::toy::SceneSuite;

    fn toy_cfg(n: usize, beta: f64) -> ExperimentConfig {
        ExperimentConfig {
            source: DataSource::Toy(ToySource {
                suite: SceneSuite {
                    n_scenes: n,
                    ..SceneSuite::default()
                },
                beta,
                ..ToySource::default()
            }),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn neutral_bias_gives_identical_rows() {
        let mut cfg = toy_cfg(12, 0.0);
        cfg.grid.mode = vec![Mode::GreedyBaseline, Mode::Revisit];
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.grid_size, 2);
        assert_eq!(r.points[0].metrics.chair, r.points[1].metrics.chair);
        let texts = |p: &PointReport| p.samples.iter().map(|s| s.text.clone()).collect::<Vec<_>>();
        assert_eq!(texts(&r.points[0]), texts(&r.points[1]));
        assert_eq!(r.failure_count(), 0);
    }

    #[test]
    fn report_is_deterministic_across_worker_counts() {
        let mut cfg = toy_cfg(10, 1.5);
        cfg.grid.selection = vec![crate::selection::Criterion::Random];
        cfg.workers = Some(1);
        let a = run_experiment(&cfg).unwrap().to_json().unwrap();
        cfg.workers = Some(4);
        let b = run_experiment(&cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_trace_fails_only_its_sample() {
        let dir = tempfile::tempdir().unwrap();
        let inv = Arc::new(ObjectInventory::default());
        let scene = crate::toy::build_scene(&inv, 3, 2, 8).unwrap();
        let b = toy_backend(inv.clone(), scene.clone(), &crate::toy::BiasProfile::none()).unwrap();
        let g = decode(&b, &DecodingConfig::greedy()).unwrap();
        let meta = super::super::trace::TraceMeta {
            prompt_tokens: vec![],
            annotations: Some(super::super::trace::Annotations {
                sample_id: Some("good".into()),
                object_words: inv.words().to_vec(),
                gt_objects: scene
                    .present
                    .iter()
                    .map(|&o| inv.word(o).to_string())
                    .collect(),
                answer: None,
            }),
        };
        let t = TraceFile::record(&b, &[g.tokens], meta).unwrap();
        let good = dir.path().join("good.vrt");
        t.write(&good).unwrap();
        let bad = dir.path().join("bad.vrt");
        std::fs::write(&bad, b"garbage").unwrap();

        let cfg = ExperimentConfig {
            source: DataSource::Trace(TraceSource {
                paths: vec![good, bad],
            }),
            grid: AblationGrid {
                mode: vec![Mode::GreedyBaseline],
                ..AblationGrid::default()
            },
            ..ExperimentConfig::default()
        };
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.n_samples, 2);
        assert_eq!(r.load_failures.len(), 1);
        assert_eq!(r.points[0].samples.len(), 1);
        assert_eq!(r.points[0].samples[0].sample_id, "good");
        assert_eq!(r.points[0].metrics.chair.unwrap().chair_s, 0.0);
    }
}
