use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use visref_core::harness::config::{DataSource, ToySource, TraceSource};
use visref_core::harness::experiment::{load_samples, recompute_chair, write_toy_traces};
use visref_core::harness::{
    analyze, run_experiment, AnalysisConfig, ExperimentConfig, ExperimentReport,
};
use visref_core::toy::SceneSuite;
use visref_core::{
    Criterion, DecodingConfig, FusionKind, LayerScope, Mode, RecordLevel, TraceFile,
};

/// Vision-token referenced decoding: decode, ablate and analyse.
#[derive(Parser)]
#[command(name = "visref", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Global {
    /// Plausibility ratio for the candidate set.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Selection criterion: min_jsd, max_jsd, random, min_kl or max_cosine.
    #[arg(long = "select", global = true)]
    select: Option<Criterion>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fusion rule: poe or interpolate.
    #[arg(long, global = true)]
    fusion: Option<FusionKind>,
    #[arg(long = "fusion-weight", global = true)]
    fusion_weight: Option<f64>,
    /// last, all_even, or a comma-separated list of 1-based layers.
    #[arg(long, global = true)]
    layers: Option<LayerScope>,
    #[arg(long = "max-tokens", global = true)]
    max_tokens: Option<usize>,
    /// revisit or greedy_baseline.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Output file or directory; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

impl Global {
    fn apply(&self, d: &mut DecodingConfig) {
        if let Some(a) = self.alpha {
            d.alpha = a;
        }
        if let Some(c) = self.select {
            d.selection.criterion = c;
        }
        if let Some(f) = self.fusion {
            d.fusion.kind = f;
        }
        if let Some(w) = self.fusion_weight {
            d.fusion.weight = w;
        }
        if let Some(l) = &self.layers {
            d.layer_scope = l.clone();
        }
        if let Some(m) = self.max_tokens {
            d.max_tokens = m;
        }
        if let Some(m) = self.mode {
            d.mode = m;
        }
    }
}

#[derive(Args, Clone)]
struct ToyArgs {
    /// Number of toy scenes.
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    /// Co-occurrence bias strength.
    #[arg(long, default_value_t = 1.5)]
    beta: f64,
    #[arg(long, default_value_t = 2.0)]
    sharpness: f64,
}

impl ToyArgs {
    fn source(&self, seed: u64) -> ToySource {
        ToySource {
            suite: SceneSuite {
                n_scenes: self.scenes,
                master_seed: seed,
                ..SceneSuite::default()
            },
            beta: self.beta,
            sharpness: self.sharpness,
            noise_seed: 0,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Decode one toy scene or one trace.
    Decode {
        /// Replay this trace instead of a toy scene.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Toy scene index.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, default_value_t = 1.5)]
        beta: f64,
        /// tokens_only or full_provenance.
        #[arg(long, default_value = "tokens_only")]
        record: String,
    },
    /// Run an experiment config, usually an ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recall@k and max-avg of grounding signals.
    Analyze {
        /// Traces to analyse; toy scenes when none are given.
        #[arg(long = "trace")]
        traces: Vec<PathBuf>,
        #[command(flatten)]
        toy: ToyArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,50")]
        ks: Vec<usize>,
    },
    /// Recompute CHAIR tables from a stored report.
    Metrics { report: PathBuf },
    /// Write toy scenes as trace files.
    GenScenes {
        #[command(flatten)]
        toy: ToyArgs,
    },
    /// Check trace files and print their shape.
    ValidateTrace {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let g = &cli.global;
    let seed = g.seed.unwrap_or(0);
    match &cli.command {
        Command::Decode {
            trace,
            scene,
            beta,
            record,
        } => {
            let mut d = DecodingConfig::default();
            g.apply(&mut d);
            d.selection.seed = seed;
            d.record_level = match record.as_str() {
                "tokens_only" => RecordLevel::TokensOnly,
                "full_provenance" => RecordLevel::FullProvenance,
                other => bail!("unknown record level {other:?}"),
            };
            let result = match trace {
                Some(path) => visref_core::replay(&TraceFile::read(path)?, &d)?,
                None => {
                    let src = ToyArgs {
                        scenes: scene + 1,
                        beta: *beta,
                        sharpness: 2.0,
                    }
                    .source(seed);
                    let samples = load_samples(&DataSource::Toy(src))?;
                    let sample = samples
                        .into_iter()
                        .nth(*scene)
                        .expect("suite has scene + 1 entries")
                        .map_err(|f| anyhow::anyhow!(f.error))?;
                    sample.decode(&d)?
                }
            };
            emit(&result, g.out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { config } => {
            let mut cfg = ExperimentConfig::load(config)?;
            g.apply(&mut cfg.decoding);
            if let Some(s) = g.seed {
                cfg.master_seed = s;
            }
            if let Some(o) = &g.out {
                cfg.output = Some(o.clone());
            }
            cfg.validate()?;
            eprintln!(
                "grid: {} point(s); running {} sample(s) each",
                cfg.grid_points().len(),
                match &cfg.source {
                    DataSource::Toy(t) => t.suite.n_scenes,
                    DataSource::Trace(t) => t.paths.len(),
                }
            );
            let start = Instant::now();
            let report = run_experiment(&cfg)?;
            match &cfg.output {
                Some(p) => report.write(p, start.elapsed())?,
                None => print!("{}", report.to_json()?),
            }
            for p in &report.points {
                if let Some(c) = p.metrics.chair {
                    eprintln!(
                        "{:<90} CHAIR_S {:6.2}  CHAIR_I {:6.2}  F1 {:6.2}",
                        p.label,
                        100.0 * c.chair_s,
                        100.0 * c.chair_i,
                        100.0 * c.f1
                    );
                }
            }
            let failures = report.failure_count();
            if failures > 0 {
                eprintln!("{failures} sample failure(s)");
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze { traces, toy, ks } => {
            let source = if traces.is_empty() {
                DataSource::Toy(toy.source(seed))
            } else {
                DataSource::Trace(TraceSource {
                    paths: traces.clone(),
                })
            };
            let mut samples = Vec::new();
            let mut failed = 0;
            for s in load_samples(&source)? {
                match s {
                    Ok(s) => samples.push(s),
                    Err(f) => {
                        eprintln!("{}: {}", f.sample_id, f.error);
                        failed += 1;
                    }
                }
            }
            let cfg = AnalysisConfig {
                ks: ks.clone(),
                layer_scope: g.layers.clone().unwrap_or(LayerScope::AllEven),
            };
            emit(&analyze(&samples, &cfg)?, g.out.as_deref())?;
            Ok(if failed > 0 {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Metrics { report } => {
            let text = std::fs::read_to_string(report)
                .with_context(|| format!("reading {}", report.display()))?;
            let report: ExperimentReport = serde_json::from_str(&text)?;
            let rows = report
                .points
                .iter()
                .map(|p| {
                    Ok(serde_json::json!({
                        "label": p.label,
                        "chair": recompute_chair(p)?,
                    }))
                })
                .collect::<visref_core::Result<Vec<_>>>()?;
            emit(&rows, g.out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::GenScenes { toy } => {
            let Some(dir) = &g.out else {
                bail!("gen-scenes needs --out DIR");
            };
            let mut d = DecodingConfig::default();
            g.apply(&mut d);
            d.selection.seed = seed;
            let paths = write_toy_traces(&toy.source(seed), &d, dir)?;
            let config = ExperimentConfig {
                source: DataSource::Trace(TraceSource {
                    paths: paths.clone(),
                }),
                ..ExperimentConfig::default()
            };
            let cfg_path = dir.join("experiment.json");
            std::fs::write(&cfg_path, serde_json::to_string_pretty(&config)? + "\n")?;
            eprintln!("wrote {} trace(s) and {}", paths.len(), cfg_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::ValidateTrace { paths } => {
            let mut bad = 0;
            let mut summaries = Vec::new();
            for p in paths {
                match TraceFile::read(p) {
                    Ok(t) => summaries.push(serde_json::json!({
                        "path": p,
                        "ok": true,
                        "summary": t.summary(),
                    })),
                    Err(e) => {
                        bad += 1;
                        summaries.push(serde_json::json!({
                            "path": p,
                            "ok": false,
                            "error": e.to_string(),
                        }));
                    }
                }
            }
            emit(&summaries, g.out.as_deref())?;
            Ok(if bad > 0 {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
