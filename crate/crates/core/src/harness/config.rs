//! Experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{DecodingConfig, LayerScope, Mode};
use crate::error::{Error, Result};
use crate::fusion::FusionPolicy;
use crate::selection::Criterion;
use crate::toy::{BiasProfile, ObjectInventory, SceneSuite};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Baseline settings; grid axes override individual fields.
    pub decoding: DecodingConfig,
    pub source: DataSource,
    pub metrics: Vec<MetricKind>,
    /// Report path; `None` keeps the report in memory only.
    pub output: Option<PathBuf>,
    /// Directory for per-sample provenance records.
    pub provenance_dir: Option<PathBuf>,
    pub grid: AblationGrid,
    /// Worker threads; `None` uses all cores.
    pub workers: Option<usize>,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            decoding: DecodingConfig::default(),
            source: DataSource::Toy(ToySource::default()),
            metrics: vec![MetricKind::Chair],
            output: None,
            provenance_dir: None,
            grid: AblationGrid::default(),
            workers: None,
            master_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Toy(ToySource),
    Trace(TraceSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySource {
    pub suite: SceneSuite,
    /// Bias strength applied to every look-alike pair.
    pub beta: f64,
    pub sharpness: f64,
    pub noise_seed: u64,
}

impl Default for ToySource {
    fn default() -> Self {
        Self {
            suite: SceneSuite::default(),
            beta: 1.5,
            sharpness: 2.0,
            noise_seed: 0,
        }
    }
}

impl ToySource {
    pub fn bias(&self, inventory: &ObjectInventory) -> BiasProfile {
        BiasProfile {
            sharpness: self.sharpness,
            noise_seed: self.noise_seed,
            ..BiasProfile::uniform(inventory, self.beta)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceSource {
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Chair,
    BinaryQa,
}

/// Axes of the ablation grid. An empty axis keeps the baseline value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub mode: Vec<Mode>,
    pub alpha: Vec<f64>,
    pub selection: Vec<Criterion>,
    pub fusion: Vec<FusionPolicy>,
    pub layer_scope: Vec<LayerScope>,
    pub constrain_vocab: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub label: String,
    pub decoding: DecodingConfig,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

fn scope_label(s: &LayerScope) -> String {
    match s {
        LayerScope::Last => "last".into(),
        LayerScope::AllEven => "all_even".into(),
        LayerScope::Explicit(l) => l.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
    }
}

impl AblationGrid {
    /// Cross product in axis order mode, alpha, selection, fusion,
    /// layer_scope, constrain_vocab. Greedy points ignore the other axes and
    /// appear once.
    pub fn points(&self, base: &DecodingConfig) -> Vec<GridPoint> {
        let mut out = Vec::new();
        let mut greedy_done = false;
        for mode in axis(&self.mode, base.mode) {
            if mode == Mode::GreedyBaseline {
                if !greedy_done {
                    greedy_done = true;
                    out.push(GridPoint {
                        label: "mode=greedy_baseline".into(),
                        decoding: DecodingConfig {
                            mode,
                            ..base.clone()
                        },
                    });
                }
                continue;
            }
            for &alpha in &axis(&self.alpha, base.alpha) {
                for &criterion in &axis(&self.selection, base.selection.criterion) {
                    for &fusion in &axis(&self.fusion, base.fusion) {
                        for scope in axis(&self.layer_scope, base.layer_scope.clone()) {
                            for &constrain in &axis(&self.constrain_vocab, base.constrain_vocab) {
                                let mut d = base.clone();
                                d.mode = mode;
                                d.alpha = alpha;
                                d.selection.criterion = criterion;
                                d.fusion = fusion;
                                d.layer_scope = scope.clone();
                                d.constrain_vocab = constrain;
                                let fusion_name = match fusion.kind {
                                    crate::fusion::FusionKind::Poe => "poe",
                                    crate::fusion::FusionKind::Interpolate => "interpolate",
                                };
                                out.push(GridPoint {
                                    label: format!(
                                        "mode=revisit alpha={alpha:e} select={criterion} fusion={fusion_name}:{} layers={} vocab={}",
                                        fusion.weight,
                                        scope_label(&scope),
                                        if constrain { "constrained" } else { "full" },
                                    ),
                                    decoding: d,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == Some(0) {
            return Err(Error::InvalidParameter("workers must be >= 1".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::InvalidParameter("no metrics requested".into()));
        }
        for p in self.grid_points() {
            p.decoding
                .validate()
                .map_err(|e| Error::InvalidParameter(format!("grid point {}: {e}", p.label)))?;
        }
        match &self.source {
            DataSource::Toy(_) if self.metrics.contains(&MetricKind::BinaryQa) => Err(
                Error::InvalidParameter("toy captions carry no yes/no labels".into()),
            ),
            DataSource::Toy(t) if t.suite.n_scenes == 0 => {
                Err(Error::InvalidParameter("toy source has no scenes".into()))
            }
            DataSource::Trace(t) if t.paths.is_empty() => {
                Err(Error::InvalidParameter("trace source has no paths".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn grid_points(&self) -> Vec<GridPoint> {
        self.grid.points(&self.decoding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_grid_is_the_baseline() {
        let cfg = ExperimentConfig::default();
        let pts = cfg.grid_points();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].decoding, cfg.decoding);
    }

    #[test]
    fn cross_product_size_and_greedy_collapse() {
        let grid = AblationGrid {
            mode: vec![Mode::GreedyBaseline, Mode::Revisit],
            alpha: vec![1e-1, 1e-3],
            selection: vec![Criterion::MinJsd, Criterion::MaxJsd, Criterion::Random],
            ..AblationGrid::default()
        };
        let pts = grid.points(&DecodingConfig::default());
        assert_eq!(pts.len(), 1 + 2 * 3);
        assert_eq!(pts[0].decoding.mode, Mode::GreedyBaseline);
        let labels: std::collections::HashSet<_> = pts.iter().map(|p| &p.label).collect();
        assert_eq!(labels.len(), pts.len());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let text = r#"{
            "source": {"toy": {"suite": {"n_scenes": 3}, "beta": 1.0}},
            "grid": {"selection": ["min_jsd", "random"], "layer_scope": ["last", {"explicit": [2, 4]}]},
            "master_seed": 9
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.grid_points().len(), 4);
        let again = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);

        assert!(ExperimentConfig::from_json(r#"{"grid": {"alpha": [2.0]}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"workers": 0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }
}
