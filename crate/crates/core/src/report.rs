//! Corpus summaries, layer sweeps and run-vs-run comparisons.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clustering::Codebook;
use crate::error::{Error, Result};
use crate::graph::NodeTable;
use crate::metrics::{CycleMode, GraphMetrics};
use crate::numfmt::{self, fmt_opt, fmt_sig};
use crate::pipeline::{self, AnalysisConfig};
use crate::trace::TraceBundle;

pub const HISTOGRAM_BINS: usize = 20;

/// Two layer ratios closer than this are the same layer.
const LAYER_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunIdentity {
    pub model_id: String,
    pub dataset_id: String,
    pub layer_index: u32,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub layer_ratio: f64,
    /// Live cluster count of the codebook.
    pub k: usize,
    pub seed: u64,
    pub cycle_mode: CycleMode,
}

/// Fixed-width histogram: bin `i` covers `[min + i*width, min + (i+1)*width)`,
/// the last bin also holds `max`. A zero-width range is a single bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub min: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub max: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    fn new(sorted: &[f64]) -> Option<Self> {
        let (&min, &max) = (sorted.first()?, sorted.last()?);
        let bin_width = (max - min) / HISTOGRAM_BINS as f64;
        let mut counts = if bin_width > 0.0 {
            vec![0; HISTOGRAM_BINS]
        } else {
            vec![0; 1]
        };
        let last = counts.len() - 1;
        for &x in sorted {
            let i = if bin_width > 0.0 {
                (((x - min) / bin_width).floor() as usize).min(last)
            } else {
                0
            };
            counts[i] += 1;
        }
        Some(Histogram {
            min,
            max,
            bin_width,
            counts,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    #[serde(serialize_with = "numfmt::ser_opt_f64")]
    pub mean: Option<f64>,
    #[serde(serialize_with = "numfmt::ser_opt_f64")]
    pub median: Option<f64>,
    pub null_count: usize,
    pub histogram: Option<Histogram>,
}

impl Distribution {
    fn from_values(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut null_count = 0;
        let mut v: Vec<f64> = values
            .into_iter()
            .filter_map(|x| {
                if x.is_none() {
                    null_count += 1;
                }
                x
            })
            .collect();
        // sorting first makes the sum independent of input order
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mean = (n > 0).then(|| v.iter().sum::<f64>() / n as f64);
        let median = match n {
            0 => None,
            _ if n % 2 == 1 => Some(v[n / 2]),
            _ => Some((v[n / 2 - 1] + v[n / 2]) / 2.0),
        };
        Distribution {
            mean,
            median,
            null_count,
            histogram: Histogram::new(&v),
        }
    }

    fn samples(&self) -> usize {
        self.histogram
            .as_ref()
            .map_or(0, |h| h.counts.iter().sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub n_questions: usize,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub cycle_detection_ratio: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub cycle_count_mean: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub diameter_mean: f64,
    #[serde(serialize_with = "numfmt::ser_opt_f64")]
    pub avg_path_length_mean: Option<f64>,
    #[serde(serialize_with = "numfmt::ser_opt_f64")]
    pub clustering_coefficient_mean: Option<f64>,
    #[serde(serialize_with = "numfmt::ser_opt_f64")]
    pub small_world_mean: Option<f64>,
}

/// Summaries of the questions answered correctly and incorrectly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub correct: Option<StratumSummary>,
    pub incorrect: Option<StratumSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub identity: RunIdentity,
    pub n_questions: usize,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub cycle_detection_ratio: f64,
    pub cycle_count: Distribution,
    pub diameter: Distribution,
    pub avg_path_length: Distribution,
    pub clustering_coefficient: Distribution,
    pub small_world: Distribution,
    /// Questions carrying an `answer_correct` label.
    pub n_labeled: usize,
    #[serde(serialize_with = "numfmt::ser_opt_f64")]
    pub accuracy: Option<f64>,
    pub strata: Option<Strata>,
}

fn ratio(count: usize, total: usize) -> f64 {
    // single correctly-rounded division of two exact integers
    count as f64 / total as f64
}

fn stratum(metrics: &[&GraphMetrics]) -> Option<StratumSummary> {
    if metrics.is_empty() {
        return None;
    }
    let n = metrics.len();
    let dist = |f: fn(&GraphMetrics) -> Option<f64>| {
        Distribution::from_values(metrics.iter().map(|m| f(m))).mean
    };
    Some(StratumSummary {
        n_questions: n,
        cycle_detection_ratio: ratio(metrics.iter().filter(|m| m.has_cycle).count(), n),
        cycle_count_mean: dist(|m| Some(m.cycle_count as f64)).unwrap_or(0.0),
        diameter_mean: dist(|m| Some(m.diameter)).unwrap_or(0.0),
        avg_path_length_mean: dist(|m| m.avg_path_length),
        clustering_coefficient_mean: dist(|m| m.clustering_coefficient),
        small_world_mean: dist(|m| m.small_world),
    })
}

pub fn summarize(metrics: &[GraphMetrics], identity: RunIdentity) -> Result<RunSummary> {
    if metrics.is_empty() {
        return Err(Error::contract("cannot summarize an empty metrics list"));
    }
    let n = metrics.len();
    let with_cycle = metrics.iter().filter(|m| m.has_cycle).count();
    let labeled: Vec<bool> = metrics.iter().filter_map(|m| m.answer_correct).collect();
    let strata = (!labeled.is_empty()).then(|| {
        let pick = |want: bool| -> Vec<&GraphMetrics> {
            metrics
                .iter()
                .filter(|m| m.answer_correct == Some(want))
                .collect()
        };
        Strata {
            correct: stratum(&pick(true)),
            incorrect: stratum(&pick(false)),
        }
    });
    Ok(RunSummary {
        identity,
        n_questions: n,
        cycle_detection_ratio: ratio(with_cycle, n),
        cycle_count: Distribution::from_values(metrics.iter().map(|m| Some(m.cycle_count as f64))),
        diameter: Distribution::from_values(metrics.iter().map(|m| Some(m.diameter))),
        avg_path_length: Distribution::from_values(metrics.iter().map(|m| m.avg_path_length)),
        clustering_coefficient: Distribution::from_values(
            metrics.iter().map(|m| m.clustering_coefficient),
        ),
        small_world: Distribution::from_values(metrics.iter().map(|m| m.small_world)),
        n_labeled: labeled.len(),
        accuracy: (!labeled.is_empty())
            .then(|| ratio(labeled.iter().filter(|&&c| c).count(), labeled.len())),
        strata,
    })
}

pub const SUMMARY_CSV_HEADER: &str = "model_id,dataset_id,layer_index,layer_ratio,k,seed,cycle_mode,\
n_questions,cycle_detection_ratio,cycle_count_mean,cycle_count_median,diameter_mean,diameter_median,\
avg_path_length_mean,avg_path_length_null_count,clustering_coefficient_mean,clustering_coefficient_null_count,\
small_world_mean,small_world_null_count,accuracy";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

impl RunSummary {
    pub fn csv_row(&self) -> String {
        let id = &self.identity;
        let mode = match id.cycle_mode {
            CycleMode::MaxRepeats => "max-repeats",
            CycleMode::FirstRepeat => "first-repeat",
        };
        [
            csv_field(&id.model_id),
            csv_field(&id.dataset_id),
            id.layer_index.to_string(),
            fmt_sig(id.layer_ratio),
            id.k.to_string(),
            id.seed.to_string(),
            mode.to_owned(),
            self.n_questions.to_string(),
            fmt_sig(self.cycle_detection_ratio),
            fmt_opt(self.cycle_count.mean),
            fmt_opt(self.cycle_count.median),
            fmt_opt(self.diameter.mean),
            fmt_opt(self.diameter.median),
            fmt_opt(self.avg_path_length.mean),
            self.avg_path_length.null_count.to_string(),
            fmt_opt(self.clustering_coefficient.mean),
            self.clustering_coefficient.null_count.to_string(),
            fmt_opt(self.small_world.mean),
            self.small_world.null_count.to_string(),
            fmt_opt(self.accuracy),
        ]
        .join(",")
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("summary serializes");
        out.push(b'\n');
        out
    }
}

/// Header plus one row per summary.
pub fn summaries_csv(summaries: &[RunSummary]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for s in summaries {
        out.push_str(&s.csv_row());
        out.push('\n');
    }
    out
}

/// Runs the full pipeline on each bundle and returns summaries ordered by
/// layer ratio. All bundles must share model and dataset.
pub fn sweep(bundles: Vec<TraceBundle>, config: &AnalysisConfig) -> Result<Vec<RunSummary>> {
    Ok(sweep_runs(bundles, config)?
        .into_iter()
        .map(|run| run.summary)
        .collect())
}

/// Like [`sweep`] but keeps every stage's output.
pub fn sweep_runs(
    mut bundles: Vec<TraceBundle>,
    config: &AnalysisConfig,
) -> Result<Vec<pipeline::Analysis>> {
    let Some(first) = bundles.first() else {
        return Err(Error::contract("sweep needs at least one bundle"));
    };
    let (model, dataset) = (first.model_id.clone(), first.dataset_id.clone());
    for b in &bundles {
        if b.model_id != model || b.dataset_id != dataset {
            return Err(Error::contract(format!(
                "sweep bundles must share model and dataset: ({model:?}, {dataset:?}) vs ({:?}, {:?})",
                b.model_id, b.dataset_id
            )));
        }
    }
    bundles.sort_by(|a, b| a.layer_ratio.total_cmp(&b.layer_ratio));
    bundles
        .into_iter()
        .map(|b| pipeline::analyze(b, config))
        .collect()
}

/// Index of the summary at 90% depth if present, else the deepest layer.
pub fn preferred_layer(summaries: &[RunSummary]) -> Option<usize> {
    summaries
        .iter()
        .position(|s| (s.identity.layer_ratio - 0.9).abs() < 1e-6)
        .or_else(|| {
            summaries
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.identity.layer_ratio.total_cmp(&b.1.identity.layer_ratio))
                .map(|(i, _)| i)
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    /// `None` for the all-layer row.
    #[serde(serialize_with = "numfmt::ser_opt_f64")]
    pub layer_ratio: Option<f64>,
    #[serde(serialize_with = "numfmt::ser_opt_f64")]
    pub a: Option<f64>,
    #[serde(serialize_with = "numfmt::ser_opt_f64")]
    pub b: Option<f64>,
    /// `a - b`.
    #[serde(serialize_with = "numfmt::ser_opt_f64")]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub a: Vec<RunIdentity>,
    pub b: Vec<RunIdentity>,
    pub rows: Vec<ComparisonRow>,
}

pub const COMPARED_METRICS: [&str; 7] = [
    "cycle_detection_ratio",
    "cycle_count",
    "diameter",
    "avg_path_length",
    "clustering_coefficient",
    "small_world",
    "accuracy",
];

/// Value of `metric` in `s` and the number of samples it averages.
fn metric_value(s: &RunSummary, metric: &str) -> (Option<f64>, usize) {
    let dist = |d: &Distribution| (d.mean, d.samples());
    match metric {
        "cycle_detection_ratio" => (Some(s.cycle_detection_ratio), s.n_questions),
        "cycle_count" => dist(&s.cycle_count),
        "diameter" => dist(&s.diameter),
        "avg_path_length" => dist(&s.avg_path_length),
        "clustering_coefficient" => dist(&s.clustering_coefficient),
        "small_world" => dist(&s.small_world),
        "accuracy" => (s.accuracy, s.n_labeled),
        other => unreachable!("unknown metric {other}"),
    }
}

/// Sample-weighted mean across layers, equal to pooling every question.
fn pooled(summaries: &[&RunSummary], metric: &str) -> Option<f64> {
    let mut num = 0f64;
    let mut den = 0usize;
    for s in summaries {
        if let (Some(v), n) = metric_value(s, metric) {
            num += v * n as f64;
            den += n;
        }
    }
    (den > 0).then(|| num / den as f64)
}

fn sorted_layers<'a>(runs: &'a [RunSummary], side: &str) -> Result<Vec<&'a RunSummary>> {
    let mut v: Vec<&RunSummary> = runs.iter().collect();
    v.sort_by(|x, y| x.identity.layer_ratio.total_cmp(&y.identity.layer_ratio));
    for w in v.windows(2) {
        if (w[1].identity.layer_ratio - w[0].identity.layer_ratio).abs() < LAYER_EPS {
            return Err(Error::contract(format!(
                "run {side} lists layer ratio {} twice",
                w[0].identity.layer_ratio
            )));
        }
    }
    Ok(v)
}

/// Per-layer and overall deltas `a - b` of every compared metric.
pub fn compare(a: &[RunSummary], b: &[RunSummary]) -> Result<ComparisonReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("comparison needs at least one layer on each side"));
    }
    let (sa, sb) = (sorted_layers(a, "a")?, sorted_layers(b, "b")?);
    let same = sa.len() == sb.len()
        && sa
            .iter()
            .zip(&sb)
            .all(|(x, y)| (x.identity.layer_ratio - y.identity.layer_ratio).abs() < LAYER_EPS);
    if !same {
        let layers = |v: &[&RunSummary]| {
            v.iter()
                .map(|s| fmt_sig(s.identity.layer_ratio))
                .collect::<Vec<_>>()
                .join(", ")
        };
        return Err(Error::contract(format!(
            "layer sets differ: a has [{}], b has [{}]",
            layers(&sa),
            layers(&sb)
        )));
    }

    let delta = |x: Option<f64>, y: Option<f64>| Some(x? - y?);
    let mut rows = Vec::new();
    for metric in COMPARED_METRICS {
        for (x, y) in sa.iter().zip(&sb) {
            let (va, vb) = (metric_value(x, metric).0, metric_value(y, metric).0);
            rows.push(ComparisonRow {
                metric: metric.to_owned(),
                layer_ratio: Some(x.identity.layer_ratio),
                a: va,
                b: vb,
                delta: delta(va, vb),
            });
        }
        let (va, vb) = (pooled(&sa, metric), pooled(&sb, metric));
        rows.push(ComparisonRow {
            metric: metric.to_owned(),
            layer_ratio: None,
            a: va,
            b: vb,
            delta: delta(va, vb),
        });
    }
    Ok(ComparisonReport {
        a: sa.iter().map(|s| s.identity.clone()).collect(),
        b: sb.iter().map(|s| s.identity.clone()).collect(),
        rows,
    })
}

impl ComparisonReport {
    /// `metric,layer,a,b,delta`; the all-layer row has layer `all`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,layer,a,b,delta\n");
        for r in &self.rows {
            let layer = r.layer_ratio.map_or_else(|| "all".to_owned(), fmt_sig);
            writeln!(
                out,
                "{},{},{},{},{}",
                r.metric,
                layer,
                fmt_opt(r.a),
                fmt_opt(r.b),
                fmt_opt(r.delta)
            )
            .unwrap();
        }
        out
    }

    pub fn row(&self, metric: &str, layer_ratio: Option<f64>) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| {
            r.metric == metric
                && match (r.layer_ratio, layer_ratio) {
                    (None, None) => true,
                    (Some(x), Some(y)) => (x - y).abs() < LAYER_EPS,
                    _ => false,
                }
        })
    }
}

/// Projects centroids onto their top `m` principal components. Components
/// come from the SVD of the centred centroid matrix; each output column is
/// sign-fixed so its largest-magnitude entry is positive.
pub fn pca_coords(codebook: &Codebook, m: usize) -> Result<NodeTable> {
    let (k, d) = (codebook.num_clusters, codebook.dim);
    if m > d {
        return Err(Error::contract(format!(
            "cannot project {d}-dimensional centroids onto {m} components"
        )));
    }
    let mut mean = vec![0f64; d];
    for row in codebook.centroid_rows() {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    for a in &mut mean {
        *a /= k as f64;
    }
    let centred = DMatrix::from_fn(k, d, |i, j| codebook.centroid(i)[j] - mean[j]);
    let svd = centred.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| {
        svd.singular_values[y]
            .total_cmp(&svd.singular_values[x])
            .then(x.cmp(&y))
    });

    let mut coords = vec![vec![0f64; m]; k];
    for (c, &j) in order.iter().take(m).enumerate() {
        let sigma = svd.singular_values[j];
        let col: Vec<f64> = (0..k).map(|i| u[(i, j)] * sigma).collect();
        let pivot = col
            .iter()
            .copied()
            .fold(0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (row, v) in coords.iter_mut().zip(col) {
            row[c] = sign * v;
        }
    }
    Ok(NodeTable { dim: m, coords })
}
