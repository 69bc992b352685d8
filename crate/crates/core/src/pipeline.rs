//! End-to-end analysis of one bundle: pool, cluster, build graphs, measure,
//! summarize.

use std::fs;
use std::path::Path;

use crate::clustering::{self, Assignment, Codebook, KMeansConfig};
use crate::error::{Error, Result};
use crate::graph::{self, ReasoningGraph};
use crate::metrics::{self, CycleMode, GraphMetrics};
use crate::report::{self, RunIdentity, RunSummary};
use crate::trace::{self, PoolingMode, TraceBundle};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnalysisConfig {
    pub kmeans: KMeansConfig,
    pub cycle_mode: CycleMode,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub bundle: TraceBundle,
    pub codebook: Codebook,
    pub assignment: Assignment,
    pub graphs: Vec<ReasoningGraph>,
    pub metrics: Vec<GraphMetrics>,
    pub summary: RunSummary,
}

pub fn identity(bundle: &TraceBundle, codebook: &Codebook, config: &AnalysisConfig) -> RunIdentity {
    RunIdentity {
        model_id: bundle.model_id.clone(),
        dataset_id: bundle.dataset_id.clone(),
        layer_index: bundle.layer_index,
        layer_ratio: bundle.layer_ratio,
        k: codebook.num_clusters,
        seed: codebook.seed,
        cycle_mode: config.cycle_mode,
    }
}

/// Pools the bundle if needed, fits a codebook and measures every question.
pub fn analyze(bundle: TraceBundle, config: &AnalysisConfig) -> Result<Analysis> {
    let bundle = match bundle.pooling_mode {
        PoolingMode::Tokens => trace::pool_segments(bundle)?,
        PoolingMode::Pooled => bundle,
    };
    let codebook = clustering::fit_codebook(&bundle, &config.kmeans)?;
    analyze_with_codebook(bundle, codebook, config)
}

/// Same as [`analyze`] with a codebook fitted elsewhere.
pub fn analyze_with_codebook(
    bundle: TraceBundle,
    codebook: Codebook,
    config: &AnalysisConfig,
) -> Result<Analysis> {
    let bundle = match bundle.pooling_mode {
        PoolingMode::Tokens => trace::pool_segments(bundle)?,
        PoolingMode::Pooled => bundle,
    };
    let assignment = clustering::assign(&bundle, &codebook)?;
    let graphs = graph::build_all(&assignment, &codebook, &bundle)?;
    let metrics = metrics::compute_all(&graphs, config.cycle_mode)?;
    let summary = report::summarize(&metrics, identity(&bundle, &codebook, config))?;
    Ok(Analysis {
        bundle,
        codebook,
        assignment,
        graphs,
        metrics,
        summary,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes codebook, metrics.jsonl, summary.json and summary.csv into `dir`.
pub fn write_analysis(analysis: &Analysis, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    clustering::write_codebook(&analysis.codebook, dir)?;
    write(&dir.join(METRICS_FILE), &metrics::to_jsonl(&analysis.metrics))?;
    write(&dir.join(SUMMARY_JSON), &analysis.summary.to_json())?;
    write(
        &dir.join(SUMMARY_CSV),
        report::summaries_csv(std::slice::from_ref(&analysis.summary)).as_bytes(),
    )
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<RunSummary> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&raw).map_err(|e| Error::format(SUMMARY_JSON, format!("{}: {e}", path.display())))
}
