//! K-means codebook over segment vectors.
//!
//! Seeding is greedy k-means++ driven by a ChaCha8 generator seeded with the
//! configured 64-bit seed (`rand_chacha::ChaCha8Rng::seed_from_u64`), so a
//! codebook depends only on the input bytes and the config. Lloyd iterations
//! skip the full centroid scan for points whose bounds prove the assignment
//! cannot change; the resulting assignments equal an exhaustive scan.
//!
//! Node indices are 0-based throughout.

use std::collections::HashMap;
use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{PoolingMode, TraceBundle};

pub const CODEBOOK_FILE: &str = "codebook.json";
pub const CENTROIDS_FILE: &str = "centroids.bin";

/// Relative slack applied to pruning bounds so rounding in the bound
/// bookkeeping can never skip a point whose nearest centroid changed.
const BOUND_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the relative inertia improvement drops below this.
    pub rel_tol: f64,
    /// Sum centroid updates in a fixed order so results do not depend on
    /// the worker count.
    pub deterministic: bool,
    /// Independent seedings; the lowest final inertia wins. Restart `r` draws
    /// from ChaCha stream `r`, so restart 0 is the single-start fit.
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 200,
            seed: 0,
            max_iters: 100,
            rel_tol: 1e-4,
            deterministic: true,
            n_init: 1,
        }
    }
}

/// Row-major matrix of segment vectors, widened to f64.
#[derive(Debug, Clone)]
pub struct Points {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim > 0 && data.len().is_multiple_of(dim));
        Points {
            n: data.len() / dim,
            dim,
            data,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// All segment vectors of a pooled bundle, questions and segments in order.
    pub fn from_bundle(bundle: &TraceBundle) -> Result<Self> {
        if bundle.pooling_mode != PoolingMode::Pooled {
            return Err(Error::contract(
                "clustering needs a pooled bundle; run pool_segments first",
            ));
        }
        let mut data = Vec::with_capacity(bundle.num_segments() * bundle.hidden_dim);
        for q in &bundle.questions {
            for s in &q.segments {
                data.extend(s.data.iter().map(|&v| v as f64));
            }
        }
        Ok(Points::new(bundle.hidden_dim, data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    /// Live cluster count (may be below `requested_clusters`, see `warnings`).
    pub num_clusters: usize,
    pub requested_clusters: usize,
    pub dim: usize,
    /// `num_clusters x dim`, row-major. Persisted separately in centroids.bin.
    #[serde(skip)]
    pub centroids: Vec<f64>,
    pub inertia: f64,
    pub seed: u64,
    pub iterations_run: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    #[serde(default = "one")]
    pub n_init: usize,
    /// Restart that produced these centroids.
    #[serde(default)]
    pub best_init: usize,
    /// Inertia after the initial assignment and after every accepted iteration.
    pub inertia_history: Vec<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn one() -> usize {
    1
}

impl Codebook {
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centroid_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.centroids.chunks_exact(self.dim)
    }

    /// Builds a codebook from explicit centroids (no fitting metadata).
    pub fn from_centroids(dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::contract(format!(
                "{} centroid values do not form rows of dim {dim}",
                centroids.len()
            )));
        }
        let k = centroids.len() / dim;
        Ok(Codebook {
            num_clusters: k,
            requested_clusters: k,
            dim,
            centroids,
            inertia: 0.0,
            seed: 0,
            iterations_run: 0,
            max_iters: 0,
            rel_tol: 0.0,
            n_init: 0,
            best_init: 0,
            inertia_history: Vec::new(),
            warnings: Vec::new(),
        })
    }
}

/// Per-question centroid paths and per-segment distances to the assigned centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub paths: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

const LANES: usize = 16;

/// Squared distance with a fixed 16-lane summation order. The order does not
/// depend on the instruction set, so every build produces the same bits.
#[inline(always)]
fn sq_dist_lanes(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut tail = 0f64;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    let mut w = LANES;
    while w > 1 {
        w /= 2;
        for i in 0..w {
            acc[i] += acc[i + w];
        }
    }
    acc[0] + tail
}

// Same arithmetic as `sq_dist_lanes`, just wider registers. No FMA: fused
// multiply-add would change the rounding.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn sq_dist_avx2(a: &[f64], b: &[f64]) -> f64 {
    sq_dist_lanes(a, b)
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if a.len() >= 64 && std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { sq_dist_avx2(a, b) };
    }
    sq_dist_lanes(a, b)
}

/// Rows scanned together against each centroid, so a centroid is pulled into
/// cache once per block instead of once per row.
const SCAN_BLOCK: usize = 32;

/// Nearest centroid (lowest index wins ties), its squared distance and the
/// runner-up squared distance, for each listed row.
fn scan_rows(points: &Points, rows: &[usize], centroids: &[f64]) -> Vec<(usize, f64, f64)> {
    let dim = points.dim;
    let blocks: Vec<Vec<(usize, f64, f64)>> = rows
        .par_chunks(SCAN_BLOCK)
        .map(|block| {
            let mut best = vec![(0usize, f64::INFINITY, f64::INFINITY); block.len()];
            for (j, c) in centroids.chunks_exact(dim).enumerate() {
                for (b, &i) in best.iter_mut().zip(block) {
                    let d = sq_dist(points.row(i), c);
                    if d < b.1 {
                        *b = (j, d, b.1);
                    } else if d < b.2 {
                        b.2 = d;
                    }
                }
            }
            best
        })
        .collect();
    blocks.into_iter().flatten().collect()
}

/// Number of distinct rows, counting stops once `cap` is reached.
fn count_distinct(points: &Points, cap: usize) -> usize {
    let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
    let mut distinct = 0;
    for i in 0..points.n {
        let row = points.row(i);
        let mut h = DefaultHasher::new();
        for v in row {
            v.to_bits().hash(&mut h);
        }
        let bucket = buckets.entry(h.finish()).or_default();
        let seen = bucket.iter().any(|&j| {
            points
                .row(j)
                .iter()
                .zip(row)
                .all(|(a, b)| a.to_bits() == b.to_bits())
        });
        if !seen {
            bucket.push(i);
            distinct += 1;
            if distinct >= cap {
                break;
            }
        }
    }
    distinct
}

/// Greedy k-means++: each new centre is the best of several D^2-sampled
/// candidates. Returns the centres plus the matching Lloyd state.
///
/// Distances from a candidate are skipped for points where the triangle
/// inequality already shows the candidate is farther than their current
/// centre; such points would contribute their current distance anyway, so
/// the chosen centres equal the unpruned procedure.
fn kmeans_pp(points: &Points, k: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, LloydState) {
    let n = points.n;
    let dim = points.dim;
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(points.row(first));
    let first_row = points.row(first);
    let sq: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(points.row(i), first_row))
        .collect();
    let mut st = LloydState {
        assign: vec![0; n],
        upper: sq.iter().map(|d| d.sqrt()).collect(),
        sq,
        lower: vec![f64::INFINITY; n],
    };
    let mut cumulative = vec![0f64; n];

    for _ in 1..k {
        let mut total = 0f64;
        for (c, d) in cumulative.iter_mut().zip(&st.sq) {
            total += d;
            *c = total;
        }
        if total <= 0.0 {
            break;
        }
        // Trial rows depend only on the cumulative weights, so all candidates
        // are drawn up front and scored in a single pass over the points.
        let cands: Vec<usize> = (0..trials)
            .map(|_| {
                let r = rng.random::<f64>() * total;
                let mut idx = cumulative.partition_point(|&c| c <= r).min(n - 1);
                while st.sq[idx] == 0.0 && idx > 0 {
                    idx -= 1;
                }
                idx
            })
            .collect();
        let to_centres: Vec<Vec<f64>> = cands
            .iter()
            .map(|&idx| {
                centroids
                    .chunks_exact(dim)
                    .map(|c| sq_dist(points.row(idx), c).sqrt())
                    .collect()
            })
            .collect();
        // per point, per trial: squared distance, or NaN when pruned
        let d2: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let reach = 2.0 * st.upper[i] * (1.0 + BOUND_SLACK);
                let near = st.assign[i];
                cands.iter().zip(&to_centres).map(move |(&idx, tc)| {
                    if tc[near] >= reach {
                        f64::NAN
                    } else {
                        sq_dist(points.row(i), points.row(idx))
                    }
                })
            })
            .collect();
        let mut potentials = vec![0f64; trials];
        for (row, &m) in d2.chunks_exact(trials).zip(&st.sq) {
            for (p, &d) in potentials.iter_mut().zip(row) {
                *p += if d < m { d } else { m };
            }
        }
        let mut t = 0;
        for (j, &p) in potentials.iter().enumerate() {
            if p < potentials[t] {
                t = j;
            }
        }
        let (idx, to_centres) = (cands[t], &to_centres[t]);
        let d2 = d2.iter().skip(t).step_by(trials).copied();
        let new = centroids.len() / dim;
        centroids.extend_from_slice(points.row(idx));
        for (i, d) in d2.enumerate() {
            if d.is_nan() {
                let bound = to_centres[st.assign[i]] - st.upper[i];
                st.lower[i] = st.lower[i].min(bound);
            } else if d < st.sq[i] {
                st.lower[i] = st.lower[i].min(st.upper[i]);
                st.assign[i] = new;
                st.sq[i] = d;
                st.upper[i] = d.sqrt();
            } else {
                st.lower[i] = st.lower[i].min(d.sqrt());
            }
        }
    }
    (centroids, st)
}

struct LloydState {
    assign: Vec<usize>,
    /// Exact squared distance to the assigned centroid.
    sq: Vec<f64>,
    /// `sqrt(sq)`.
    upper: Vec<f64>,
    /// Lower bound on the distance to every other centroid.
    lower: Vec<f64>,
}

impl LloydState {
    #[cfg(test)]
    fn full(points: &Points, centroids: &[f64]) -> Self {
        let rows: Vec<usize> = (0..points.n).collect();
        let mut st = LloydState {
            assign: Vec::with_capacity(points.n),
            sq: Vec::with_capacity(points.n),
            upper: Vec::with_capacity(points.n),
            lower: Vec::with_capacity(points.n),
        };
        for (j, d, s) in scan_rows(points, &rows, centroids) {
            st.assign.push(j);
            st.sq.push(d);
            st.upper.push(d.sqrt());
            st.lower.push(s.sqrt());
        }
        st
    }

    fn inertia(&self) -> f64 {
        self.sq.iter().sum()
    }

    fn counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0usize; k];
        for &a in &self.assign {
            counts[a] += 1;
        }
        counts
    }

    /// Moves each empty centroid onto the point farthest from its own
    /// centroid, taken from a cluster that keeps at least one member.
    fn repair_empty(&mut self, points: &Points, centroids: &mut [f64]) -> usize {
        let dim = points.dim;
        let k = centroids.len() / dim;
        let mut counts = self.counts(k);
        let mut repaired = 0;
        for j in 0..k {
            if counts[j] != 0 {
                continue;
            }
            let mut pick: Option<usize> = None;
            for i in 0..points.n {
                if counts[self.assign[i]] < 2 {
                    continue;
                }
                if pick.is_none_or(|p| self.sq[i] > self.sq[p]) {
                    pick = Some(i);
                }
            }
            let Some(p) = pick else { break };
            centroids[j * dim..(j + 1) * dim].copy_from_slice(points.row(p));
            counts[self.assign[p]] -= 1;
            counts[j] = 1;
            self.assign[p] = j;
            self.sq[p] = 0.0;
            self.upper[p] = 0.0;
            self.lower[p] = 0.0;
            repaired += 1;
        }
        repaired
    }

    fn reassign(&mut self, points: &Points, centroids: &[f64], shifts: &[f64]) {
        let dim = points.dim;
        let k = centroids.len() / dim;
        // half the distance from each centroid to its nearest neighbour
        let half_gap: Vec<f64> = (0..k)
            .into_par_iter()
            .map(|j| {
                let cj = &centroids[j * dim..(j + 1) * dim];
                let mut m = f64::INFINITY;
                for (jj, c) in centroids.chunks_exact(dim).enumerate() {
                    if jj != j {
                        m = m.min(sq_dist(cj, c));
                    }
                }
                0.5 * m.sqrt()
            })
            .collect();
        let (mut top, mut top_idx, mut second) = (0f64, usize::MAX, 0f64);
        for (j, &s) in shifts.iter().enumerate() {
            if s > top {
                second = top;
                top = s;
                top_idx = j;
            } else if s > second {
                second = s;
            }
        }

        let stale: Vec<bool> = self
            .assign
            .par_iter()
            .zip(self.sq.par_iter_mut())
            .zip(self.upper.par_iter_mut())
            .zip(self.lower.par_iter_mut())
            .enumerate()
            .map(|(i, (((a, sq), u), l))| {
                let moved = if *a == top_idx { second } else { top };
                *l -= moved;
                *sq = sq_dist(points.row(i), &centroids[*a * dim..(*a + 1) * dim]);
                *u = sq.sqrt();
                let bound = half_gap[*a].max(*l);
                *u >= bound * (1.0 - BOUND_SLACK)
            })
            .collect();
        let rows: Vec<usize> = (0..points.n).filter(|&i| stale[i]).collect();
        for (&i, (j, d, s)) in rows.iter().zip(scan_rows(points, &rows, centroids)) {
            self.assign[i] = j;
            self.sq[i] = d;
            self.upper[i] = d.sqrt();
            self.lower[i] = s.sqrt();
        }
    }
}

fn update_centroids(points: &Points, assign: &[usize], k: usize, deterministic: bool) -> Vec<f64> {
    let dim = points.dim;
    let mut out = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for &a in assign {
        counts[a] += 1;
    }
    if deterministic {
        // members summed in point order, one cluster per task
        let mut members: Vec<Vec<usize>> = counts.iter().map(|&c| Vec::with_capacity(c)).collect();
        for (i, &a) in assign.iter().enumerate() {
            members[a].push(i);
        }
        out.par_chunks_mut(dim)
            .zip(members.par_iter())
            .for_each(|(c, idx)| {
                for &i in idx {
                    for (s, v) in c.iter_mut().zip(points.row(i)) {
                        *s += v;
                    }
                }
            });
    } else {
        out = (0..points.n)
            .into_par_iter()
            .fold(
                || vec![0f64; k * dim],
                |mut acc, i| {
                    let a = assign[i];
                    for (s, v) in acc[a * dim..(a + 1) * dim].iter_mut().zip(points.row(i)) {
                        *s += v;
                    }
                    acc
                },
            )
            .reduce(
                || vec![0f64; k * dim],
                |mut x, y| {
                    for (a, b) in x.iter_mut().zip(y) {
                        *a += b;
                    }
                    x
                },
            );
    }
    for (c, &n) in out.chunks_exact_mut(dim).zip(&counts) {
        if n > 0 {
            let n = n as f64;
            for v in c {
                *v /= n;
            }
        }
    }
    out
}

struct Fit {
    centroids: Vec<f64>,
    history: Vec<f64>,
    iterations_run: usize,
    warnings: Vec<String>,
}

fn fit_once(points: &Points, k: usize, config: &KMeansConfig, rng: &mut ChaCha8Rng) -> Fit {
    let dim = points.dim;
    let mut warnings = Vec::new();
    let (mut centroids, mut state) = kmeans_pp(points, k, rng);
    let mut history = vec![state.inertia()];
    let mut iterations_run = 0;

    for it in 1..=config.max_iters {
        let prev = *history.last().unwrap();
        let before = centroids.clone();
        if state.repair_empty(points, &mut centroids) > 0 {
            warnings.push(format!("iteration {it}: repaired empty clusters"));
        }
        let updated = update_centroids(points, &state.assign, k, config.deterministic);
        let shifts: Vec<f64> = centroids
            .chunks_exact(dim)
            .zip(updated.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .collect();
        centroids = updated;
        state.reassign(points, &centroids, &shifts);
        let inertia = state.inertia();
        if inertia > prev {
            // rounding-level increase at convergence; keep the better centroids
            centroids = before;
            break;
        }
        history.push(inertia);
        iterations_run = it;
        if prev == 0.0 || (prev - inertia) / prev < config.rel_tol {
            break;
        }
    }

    Fit {
        centroids,
        history,
        iterations_run,
        warnings,
    }
}

/// Fits a codebook over the rows of `points`.
pub fn fit_points(points: &Points, config: &KMeansConfig) -> Result<Codebook> {
    if points.n == 0 {
        return Err(Error::contract("cannot fit a codebook over zero segments"));
    }
    if config.k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    if !(config.rel_tol >= 0.0) {
        return Err(Error::contract(format!("rel_tol {} must be non-negative", config.rel_tol)));
    }
    if config.n_init == 0 {
        return Err(Error::contract("n_init must be at least 1"));
    }
    let dim = points.dim;
    let mut warnings = Vec::new();
    let distinct = count_distinct(points, config.k);
    let k = config.k.min(distinct);
    if k < config.k {
        warnings.push(format!(
            "requested k={} but only {distinct} distinct segment vectors; using k={k}",
            config.k
        ));
    }

    let mut best: Option<(usize, Fit)> = None;
    for r in 0..config.n_init {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(r as u64);
        let fit = fit_once(points, k, config, &mut rng);
        let inertia = *fit.history.last().unwrap();
        if best.as_ref().is_none_or(|(_, b)| inertia < *b.history.last().unwrap()) {
            best = Some((r, fit));
        }
    }
    let (best_init, fit) = best.expect("n_init >= 1");
    let Fit {
        centroids,
        history,
        iterations_run,
        warnings: fit_warnings,
    } = fit;
    warnings.extend(fit_warnings);

    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let key: Vec<u64> = c.iter().map(|v| v.to_bits()).collect();
        if let Some(prev) = seen.insert(key, j) {
            warnings.push(format!("centroids {prev} and {j} coincide after fitting"));
        }
    }

    Ok(Codebook {
        num_clusters: k,
        requested_clusters: config.k,
        dim,
        centroids,
        inertia: *history.last().unwrap(),
        seed: config.seed,
        iterations_run,
        max_iters: config.max_iters,
        rel_tol: config.rel_tol,
        n_init: config.n_init,
        best_init,
        inertia_history: history,
        warnings,
    })
}

/// Fits the codebook over every segment vector of a pooled bundle.
pub fn fit_codebook(bundle: &TraceBundle, config: &KMeansConfig) -> Result<Codebook> {
    fit_points(&Points::from_bundle(bundle)?, config)
}

/// Maps every segment to its nearest centroid by exhaustive scan; ties go to
/// the lowest index.
pub fn assign(bundle: &TraceBundle, codebook: &Codebook) -> Result<Assignment> {
    if bundle.hidden_dim != codebook.dim {
        return Err(Error::contract(format!(
            "bundle hidden_dim {} does not match codebook dim {}",
            bundle.hidden_dim, codebook.dim
        )));
    }
    let points = Points::from_bundle(bundle)?;
    let rows: Vec<usize> = (0..points.n).collect();
    let mut it = scan_rows(&points, &rows, &codebook.centroids)
        .into_iter()
        .map(|(j, d, _)| (j, d.sqrt()));
    let mut paths = Vec::with_capacity(bundle.questions.len());
    let mut distances = Vec::with_capacity(bundle.questions.len());
    for q in &bundle.questions {
        let (p, d): (Vec<usize>, Vec<f64>) = it.by_ref().take(q.segments.len()).unzip();
        paths.push(p);
        distances.push(d);
    }
    Ok(Assignment { paths, distances })
}

/// Euclidean distance between centroids `a` and `b`.
pub fn centroid_distance(codebook: &Codebook, a: usize, b: usize) -> Result<f64> {
    let k = codebook.num_clusters;
    if a >= k || b >= k {
        return Err(Error::contract(format!(
            "centroid index out of range: ({a}, {b}) with {k} centroids"
        )));
    }
    Ok(sq_dist(codebook.centroid(a), codebook.centroid(b)).sqrt())
}

pub fn write_codebook(codebook: &Codebook, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin: Vec<u8> = codebook
        .centroids
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let bin_path = dir.join(CENTROIDS_FILE);
    fs::write(&bin_path, bin).map_err(|e| Error::io(&bin_path, e))?;
    let mut json = serde_json::to_vec_pretty(codebook).expect("codebook serializes");
    json.push(b'\n');
    let json_path = dir.join(CODEBOOK_FILE);
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))
}

pub fn read_codebook(dir: impl AsRef<Path>) -> Result<Codebook> {
    let dir = dir.as_ref();
    let json_path = dir.join(CODEBOOK_FILE);
    let raw = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let mut cb: Codebook = serde_json::from_slice(&raw)
        .map_err(|e| Error::format(CODEBOOK_FILE, format!("{}: {e}", json_path.display())))?;
    let bin_path = dir.join(CENTROIDS_FILE);
    let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected = cb.num_clusters * cb.dim * 8;
    if bin.len() != expected || cb.dim == 0 {
        return Err(Error::Corruption(format!(
            "{CENTROIDS_FILE} has {} bytes, expected {expected} for {} x {} float64",
            bin.len(),
            cb.num_clusters,
            cb.dim
        )));
    }
    cb.centroids = bin
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(cb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize, seed: u64) -> KMeansConfig {
        KMeansConfig {
            k,
            seed,
            ..KMeansConfig::default()
        }
    }

    fn random_points(n: usize, dim: usize, seed: u64) -> Points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Points::new(dim, (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn two_points_two_clusters() {
        let p = Points::new(2, vec![0.0, 0.0, 3.0, 4.0]);
        let cb = fit_points(&p, &cfg(2, 0)).unwrap();
        assert_eq!(cb.inertia, 0.0);
        let mut rows: Vec<Vec<f64>> = cb.centroid_rows().map(<[f64]>::to_vec).collect();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(rows, vec![vec![0.0, 0.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn identical_points_single_cluster() {
        let p = Points::new(3, [1.5, -2.0, 7.25].repeat(10));
        let cb = fit_points(&p, &cfg(1, 3)).unwrap();
        assert_eq!(cb.centroid(0), &[1.5, -2.0, 7.25]);
        assert_eq!(cb.inertia, 0.0);
    }

    #[test]
    fn k_clamped_to_distinct_count() {
        let mut data = [0.0, 1.0].repeat(5);
        data.extend([2.0, 2.0].repeat(5));
        let cb = fit_points(&Points::new(2, data), &cfg(4, 0)).unwrap();
        assert_eq!(cb.num_clusters, 2);
        assert_eq!(cb.requested_clusters, 4);
        assert_eq!(cb.warnings.len(), 1);
        assert_ne!(cb.centroid(0), cb.centroid(1));
    }

    #[test]
    fn rejects_empty_input() {
        let p = Points {
            n: 0,
            dim: 2,
            data: vec![],
        };
        assert!(matches!(fit_points(&p, &cfg(2, 0)), Err(Error::Contract(_))));
    }

    #[test]
    fn inertia_is_monotone_and_deterministic() {
        let p = random_points(500, 6, 11);
        let a = fit_points(&p, &cfg(12, 5)).unwrap();
        let b = fit_points(&p, &cfg(12, 5)).unwrap();
        assert!(a.inertia_history.windows(2).all(|w| w[1] <= w[0]));
        let bits = |c: &Codebook| c.centroids.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = fit_points(&p, &cfg(12, 6)).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    /// Plain Lloyd with exhaustive assignment; the pruned iteration must match it.
    fn reference_lloyd(points: &Points, mut centroids: Vec<f64>, iters: usize) -> Vec<f64> {
        let dim = points.dim;
        let k = centroids.len() / dim;
        for _ in 0..iters {
            let assign: Vec<usize> = (0..points.n)
                .map(|i| {
                    let mut best = (0, f64::INFINITY);
                    for j in 0..k {
                        let d = sq_dist(points.row(i), &centroids[j * dim..(j + 1) * dim]);
                        if d < best.1 {
                            best = (j, d);
                        }
                    }
                    best.0
                })
                .collect();
            let counts = {
                let mut c = vec![0; k];
                assign.iter().for_each(|&a| c[a] += 1);
                c
            };
            if counts.contains(&0) {
                return centroids;
            }
            centroids = update_centroids(points, &assign, k, true);
        }
        centroids
    }

    #[test]
    fn pruned_iterations_match_plain_lloyd() {
        let p = random_points(400, 5, 2);
        let config = KMeansConfig {
            k: 10,
            seed: 9,
            max_iters: 15,
            rel_tol: 0.0,
            deterministic: true,
            n_init: 1,
        };
        let cb = fit_points(&p, &config).unwrap();
        let (init, _) = kmeans_pp(&p, 10, &mut ChaCha8Rng::seed_from_u64(9));
        if cb.warnings.is_empty() {
            let want = reference_lloyd(&p, init, cb.iterations_run);
            assert_eq!(cb.centroids, want);
        }
    }

    /// Greedy k-means++ without any pruning.
    fn reference_kmeans_pp(points: &Points, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = points.n;
        let trials = 2 + (k as f64).ln().floor() as usize;
        let first = rng.random_range(0..n);
        let mut centroids = points.row(first).to_vec();
        let dists = |c: &[f64]| (0..n).map(|i| sq_dist(points.row(i), c)).collect::<Vec<_>>();
        let mut min_d2 = dists(points.row(first));
        for _ in 1..k {
            let mut cumulative = Vec::with_capacity(n);
            let mut total = 0.0;
            for d in &min_d2 {
                total += d;
                cumulative.push(total);
            }
            let mut best: Option<(f64, Vec<f64>, usize)> = None;
            for _ in 0..trials {
                let r = rng.random::<f64>() * total;
                let mut idx = cumulative.partition_point(|&c| c <= r).min(n - 1);
                while min_d2[idx] == 0.0 && idx > 0 {
                    idx -= 1;
                }
                let d2 = dists(points.row(idx));
                let pot: f64 = d2.iter().zip(&min_d2).map(|(a, b)| a.min(*b)).sum();
                if best.as_ref().is_none_or(|b| pot < b.0) {
                    best = Some((pot, d2, idx));
                }
            }
            let (_, d2, idx) = best.unwrap();
            centroids.extend_from_slice(points.row(idx));
            for (m, d) in min_d2.iter_mut().zip(d2) {
                *m = m.min(d);
            }
        }
        centroids
    }

    #[test]
    fn pruned_seeding_matches_reference() {
        for seed in 0..5 {
            // clumpy data so pruning actually fires
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let centres: Vec<f64> = (0..8 * 4).map(|_| rng.random_range(-20.0..20.0)).collect();
            let data: Vec<f64> = (0..600)
                .flat_map(|i| {
                    let c = (i % 8) * 4;
                    (0..4).map(|t| centres[c + t] + rng.random_range(-1.0..1.0)).collect::<Vec<_>>()
                })
                .collect();
            let p = Points::new(4, data);
            let (got, st) = kmeans_pp(&p, 12, &mut ChaCha8Rng::seed_from_u64(seed));
            let want = reference_kmeans_pp(&p, 12, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(got, want);
            let full = LloydState::full(&p, &got);
            assert_eq!(st.assign, full.assign);
            assert_eq!(st.sq, full.sq);
            for i in 0..p.n {
                assert!(st.lower[i] <= full.lower[i] * (1.0 + 1e-9), "row {i}");
            }
        }
    }

    #[test]
    fn wide_kernel_matches_portable_bits() {
        let p = random_points(6, 1037, 3);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(sq_dist(p.row(i), p.row(j)).to_bits(), sq_dist_lanes(p.row(i), p.row(j)).to_bits());
            }
        }
    }

    #[test]
    fn restarts_keep_the_lowest_inertia() {
        let p = random_points(300, 3, 7);
        let single = fit_points(&p, &cfg(9, 4)).unwrap();
        let multi = fit_points(&p, &KMeansConfig { n_init: 6, ..cfg(9, 4) }).unwrap();
        assert!(multi.inertia <= single.inertia);
        assert!(multi.best_init < 6);
        if multi.best_init == 0 {
            assert_eq!(multi.centroids, single.centroids);
        }
        assert!(matches!(
            fit_points(&p, &KMeansConfig { n_init: 0, ..cfg(9, 4) }),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn nondeterministic_mode_is_close() {
        let p = random_points(300, 4, 4);
        let det = fit_points(&p, &cfg(5, 1)).unwrap();
        let fast = fit_points(
            &p,
            &KMeansConfig {
                deterministic: false,
                ..cfg(5, 1)
            },
        )
        .unwrap();
        assert!((det.inertia - fast.inertia).abs() <= 1e-9 * det.inertia.max(1.0));
    }

    #[test]
    fn empty_cluster_repair_takes_farthest_point() {
        let p = Points::new(1, vec![0.0, 1.0, 10.0, 11.0]);
        let mut centroids = vec![0.5, 10.5, 100.0];
        let mut st = LloydState::full(&p, &centroids);
        assert_eq!(st.counts(3), vec![2, 2, 0]);
        assert_eq!(st.repair_empty(&p, &mut centroids), 1);
        // every point sits 0.5 from its centroid; lowest index wins
        assert_eq!(centroids, vec![0.5, 10.5, 0.0]);
        assert_eq!(st.counts(3), vec![1, 2, 1]);
    }

    fn codebook(rows: &[&[f64]]) -> Codebook {
        Codebook::from_centroids(rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn centroid_distance_basics() {
        let cb = codebook(&[&[0.0, 0.0], &[3.0, 4.0]]);
        assert_eq!(centroid_distance(&cb, 0, 1).unwrap(), 5.0);
        assert_eq!(centroid_distance(&cb, 1, 1).unwrap(), 0.0);
        assert!(matches!(centroid_distance(&cb, 0, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn centroid_distance_matches_naive_sum() {
        let p = random_points(30, 7, 8);
        let cb = Codebook::from_centroids(7, p.data.clone()).unwrap();
        for a in 0..30 {
            for b in 0..30 {
                let mut s = 0f64;
                for t in 0..7 {
                    s += (p.row(a)[t] - p.row(b)[t]).powi(2);
                }
                let d = centroid_distance(&cb, a, b).unwrap();
                assert!((d - s.sqrt()).abs() < 1e-9);
                assert_eq!(d, centroid_distance(&cb, b, a).unwrap());
            }
        }
    }

    #[test]
    fn codebook_round_trip() {
        let p = random_points(100, 3, 1);
        let cb = fit_points(&p, &cfg(4, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_codebook(&cb, dir.path()).unwrap();
        assert_eq!(read_codebook(dir.path()).unwrap(), cb);
    }
}
