//! Command-line workflows. The binary parses [`Cli`] and calls [`run`].

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::clustering::{self, KMeansConfig};
use crate::error::{Error, Result};
use crate::graph::{self, ExportFormat, NodeTable};
use crate::metrics::CycleMode;
use crate::numfmt;
use crate::pipeline::{self, AnalysisConfig, SUMMARY_JSON};
use crate::report::{self, RunSummary};
use crate::synth::{self, SynthConfig};
use crate::trace::{self, PoolingMode};

pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Debug, Parser)]
#[command(name = "reason-graph", version, about = "Reasoning graphs from hidden-state traces")]
pub struct Cli {
    /// Worker threads for parallel stages (defaults to all cores).
    #[arg(long, global = true, env = "REASON_GRAPH_THREADS")]
    pub threads: Option<usize>,

    /// Fixed-order reductions so results are bit-identical at any thread count.
    #[arg(long, global = true, default_value_t = true, action = clap::ArgAction::Set)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a bundle against every format and data invariant.
    Validate { bundle: PathBuf },
    /// Fit a codebook and write codebook.json + centroids.bin.
    Cluster {
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        kmeans: KMeansArgs,
    },
    /// Cluster, build graphs, compute metrics and summarize one bundle.
    Analyze {
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        kmeans: KMeansArgs,
        #[arg(long, default_value = "max-repeats")]
        cycle_mode: CycleMode,
        /// Reuse a codebook directory instead of fitting one.
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Analyze bundles of one model and dataset at several layers.
    Sweep {
        #[arg(required = true)]
        bundles: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        kmeans: KMeansArgs,
        #[arg(long, default_value = "max-repeats")]
        cycle_mode: CycleMode,
        /// Keep only these layer ratios (comma separated).
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<f64>>,
    },
    /// Per-layer metric deltas (A - B) between two analyze or sweep outputs.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<f64>>,
    },
    /// Write a synthetic bundle with ground truth.
    Synth(SynthArgs),
    /// Write per-question edge lists and node coordinate tables.
    ExportEdges {
        bundle: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Project node coordinates onto this many principal components.
        #[arg(long)]
        pca_dims: Option<usize>,
        /// Export only this question.
        #[arg(long)]
        question: Option<String>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct KMeansArgs {
    #[arg(long, default_value_t = 200)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Independent k-means++ seedings; the lowest-inertia fit is kept.
    #[arg(long, default_value_t = 1)]
    pub n_init: usize,
}

impl KMeansArgs {
    fn config(&self, deterministic: bool) -> KMeansConfig {
        KMeansConfig {
            k: self.k,
            seed: self.seed,
            max_iters: self.max_iters,
            rel_tol: self.tol,
            deterministic,
            n_init: self.n_init,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub n_questions: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 20)]
    pub clusters: usize,
    /// Minimum centre distance in units of sigma.
    #[arg(long, default_value_t = 10.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 4)]
    pub walk_min: usize,
    #[arg(long, default_value_t = 12)]
    pub walk_max: usize,
    #[arg(long, default_value_t = 0.1)]
    pub revisit_prob: f64,
    #[arg(long, default_value_t = 0.05)]
    pub jump_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Emit token matrices with between MIN and MAX rows per segment.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub tokens: Option<Vec<usize>>,
    #[arg(long)]
    pub correct_prob: Option<f64>,
    #[arg(long, default_value = "synth")]
    pub model_id: String,
    #[arg(long, default_value = "synthetic")]
    pub dataset_id: String,
    #[arg(long, default_value_t = 0.9)]
    pub layer_ratio: f64,
    #[arg(long, default_value_t = 10)]
    pub num_layers: u32,
    /// Write a base-like and a reasoner-like bundle under OUT/base and OUT/reasoner.
    #[arg(long, conflicts_with = "layers")]
    pub pair: bool,
    /// Write one bundle per layer ratio under OUT/layer_<i>, walks growing with depth.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<f64>>,
    /// Walk-length increase per layer for --layers.
    #[arg(long, default_value_t = 3)]
    pub growth: usize,
}

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        SynthConfig {
            n_questions: self.n_questions,
            d: self.dim,
            n_true_clusters: self.clusters,
            cluster_separation: self.separation,
            sigma: self.sigma,
            walk_length_range: (self.walk_min, self.walk_max),
            revisit_prob: self.revisit_prob,
            long_jump_prob: self.jump_prob,
            seed: self.seed,
            walk_stream: 0,
            tokens_per_segment: self.tokens.as_ref().map(|t| (t[0], t[1])),
            correct_prob: self.correct_prob,
            model_id: self.model_id.clone(),
            dataset_id: self.dataset_id.clone(),
            layer_index: synth::layer_index_for(self.layer_ratio, self.num_layers),
            layer_ratio: self.layer_ratio,
            num_layers: Some(self.num_layers),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    #[serde(serialize_with = "numfmt::ser_opt_f64")]
    pub preferred_layer_ratio: Option<f64>,
    pub summaries: Vec<RunSummary>,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

fn layer_selected(filter: &Option<Vec<f64>>, ratio: f64) -> bool {
    filter
        .as_ref()
        .is_none_or(|keep| keep.iter().any(|k| (k - ratio).abs() < 1e-6))
}

/// Summaries stored in an analyze (`summary.json`) or sweep (`sweep.json`) directory.
pub fn load_run(dir: &Path) -> Result<Vec<RunSummary>> {
    let sweep_path = dir.join(SWEEP_JSON);
    if sweep_path.exists() {
        let raw = fs::read(&sweep_path).map_err(|e| Error::io(&sweep_path, e))?;
        let out: SweepOutput = serde_json::from_slice(&raw)
            .map_err(|e| Error::format(SWEEP_JSON, format!("{}: {e}", sweep_path.display())))?;
        Ok(out.summaries)
    } else {
        Ok(vec![pipeline::read_summary(dir.join(SUMMARY_JSON))?])
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn install_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // a pool may already exist when called more than once in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Runs one parsed command; progress goes to stderr, results to files.
pub fn run(cli: Cli) -> Result<()> {
    install_threads(cli.threads);
    let deterministic = cli.deterministic;
    match cli.command {
        Command::Validate { bundle } => {
            let b = trace::read_bundle(&bundle)?;
            let report = serde_json::json!({
                "valid": true,
                "model_id": b.model_id,
                "dataset_id": b.dataset_id,
                "layer_index": b.layer_index,
                "questions": b.questions.len(),
                "segments": b.num_segments(),
                "hidden_dim": b.hidden_dim,
            });
            println!("{report}");
            Ok(())
        }
        Command::Cluster { bundle, out, kmeans } => {
            let mut b = trace::read_bundle(&bundle)?;
            if b.pooling_mode == PoolingMode::Tokens {
                b = trace::pool_segments(b)?;
            }
            let cb = clustering::fit_codebook(&b, &kmeans.config(deterministic))?;
            for w in &cb.warnings {
                eprintln!("warning: {w}");
            }
            clustering::write_codebook(&cb, &out)
        }
        Command::Analyze {
            bundle,
            out,
            kmeans,
            cycle_mode,
            codebook,
        } => {
            let config = AnalysisConfig {
                kmeans: kmeans.config(deterministic),
                cycle_mode,
            };
            let b = trace::read_bundle(&bundle)?;
            let analysis = match codebook {
                Some(dir) => pipeline::analyze_with_codebook(b, clustering::read_codebook(dir)?, &config)?,
                None => pipeline::analyze(b, &config)?,
            };
            for w in &analysis.codebook.warnings {
                eprintln!("warning: {w}");
            }
            pipeline::write_analysis(&analysis, &out)
        }
        Command::Sweep {
            bundles,
            out,
            kmeans,
            cycle_mode,
            layers,
        } => {
            let config = AnalysisConfig {
                kmeans: kmeans.config(deterministic),
                cycle_mode,
            };
            let loaded = bundles
                .iter()
                .map(trace::read_bundle)
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|b| layer_selected(&layers, b.layer_ratio))
                .collect::<Vec<_>>();
            if loaded.is_empty() {
                return Err(Error::contract("no bundle matches the layer filter"));
            }
            let runs = report::sweep_runs(loaded, &config)?;
            for (i, run) in runs.iter().enumerate() {
                let dir = out.join(format!("{i:02}_layer{}", run.summary.identity.layer_index));
                pipeline::write_analysis(run, dir)?;
            }
            let summaries: Vec<RunSummary> = runs.into_iter().map(|r| r.summary).collect();
            let preferred = report::preferred_layer(&summaries);
            if let Some(p) = preferred {
                eprintln!(
                    "preferred layer: ratio {} (index {})",
                    summaries[p].identity.layer_ratio, summaries[p].identity.layer_index
                );
            }
            write_file(&out.join(SWEEP_CSV), report::summaries_csv(&summaries))?;
            write_file(
                &out.join(SWEEP_JSON),
                pretty_json(&SweepOutput {
                    preferred_layer_ratio: preferred.map(|p| summaries[p].identity.layer_ratio),
                    summaries,
                }),
            )
        }
        Command::Compare {
            run_a,
            run_b,
            out,
            layers,
        } => {
            let pick = |dir: &Path| -> Result<Vec<RunSummary>> {
                Ok(load_run(dir)?
                    .into_iter()
                    .filter(|s| layer_selected(&layers, s.identity.layer_ratio))
                    .collect())
            };
            let report = report::compare(&pick(&run_a)?, &pick(&run_b)?)?;
            write_file(&out.join(COMPARISON_CSV), report.to_csv())?;
            write_file(&out.join(COMPARISON_JSON), pretty_json(&report))
        }
        Command::Synth(args) => {
            let config = args.config();
            let outputs: Vec<(PathBuf, _)> = if args.pair {
                let pair = synth::reasoner_base_pair(&config)?;
                vec![
                    (args.out.join("base"), pair.base),
                    (args.out.join("reasoner"), pair.reasoner),
                ]
            } else if let Some(ratios) = &args.layers {
                synth::layer_sweep(&config, ratios, args.growth)?
                    .into_iter()
                    .enumerate()
                    .map(|(i, gen)| (args.out.join(format!("layer_{i}")), gen))
                    .collect()
            } else {
                vec![(args.out.clone(), synth::generate(&config)?)]
            };
            for (dir, (bundle, truth)) in outputs {
                trace::write_bundle(&bundle, &dir)?;
                write_file(&dir.join(GROUND_TRUTH_FILE), pretty_json(&truth))?;
            }
            Ok(())
        }
        Command::ExportEdges {
            bundle,
            codebook,
            out,
            format,
            pca_dims,
            question,
        } => {
            let format: ExportFormat = format.parse()?;
            let mut b = trace::read_bundle(&bundle)?;
            if b.pooling_mode == PoolingMode::Tokens {
                b = trace::pool_segments(b)?;
            }
            let cb = clustering::read_codebook(codebook)?;
            let table = match pca_dims {
                Some(m) => report::pca_coords(&cb, m)?,
                None => NodeTable::from_codebook(&cb),
            };
            let assignment = clustering::assign(&b, &cb)?;
            let graphs = graph::build_all(&assignment, &cb, &b)?;
            let mut written = 0;
            for (i, g) in graphs.iter().enumerate() {
                if question.as_ref().is_some_and(|q| q != &g.question_id) {
                    continue;
                }
                let stem = format!("{i:05}_{}", sanitize(&g.question_id));
                let ext = format.extension();
                write_file(&out.join(format!("{stem}.edges.{ext}")), graph::export_edges(g, format))?;
                write_file(
                    &out.join(format!("{stem}.nodes.{ext}")),
                    graph::export_nodes(g, &table, format)?,
                )?;
                written += 1;
            }
            if written == 0 {
                return Err(Error::contract(format!(
                    "question {:?} not found in bundle",
                    question.unwrap_or_default()
                )));
            }
            Ok(())
        }
    }
}

/// Machine-readable error line written to stderr by the binary.
pub fn error_json(err: &Error) -> String {
    serde_json::json!({
        "error": err.kind(),
        "exit_code": err.exit_code(),
        "message": err.to_string(),
    })
    .to_string()
}
