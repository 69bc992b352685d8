//! Synthetic trace bundles with known ground truth.
//!
//! Cluster centres sit on a scaled integer lattice, jittered by at most a
//! tenth of the lattice spacing, so any two centres are at least
//! `cluster_separation * sigma` apart. Centres are numbered along a reflected
//! Gray code, which makes consecutive ring positions lattice neighbours.
//!
//! Each question is a walk over ring positions. At every step the walk
//! returns to an earlier centre with probability `revisit_prob`, jumps to
//! roughly the opposite side of the ring with probability `long_jump_prob`,
//! and otherwise advances one ring position in its direction. Every step
//! emits one segment sampled from the centre's isotropic Gaussian.
//!
//! Randomness: ChaCha8 seeded with `seed`; centres use stream 0, each
//! question's walk and noise use their own streams.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{cycle_stats, CycleMode};
use crate::trace::{PoolingMode, QuestionTrace, SegmentRecord, TraceBundle, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_questions: usize,
    pub d: usize,
    pub n_true_clusters: usize,
    /// Minimum centre distance, in units of `sigma`.
    pub cluster_separation: f64,
    /// Per-coordinate standard deviation of segment noise.
    pub sigma: f64,
    /// Inclusive range of walk lengths (segments per question).
    pub walk_length_range: (usize, usize),
    pub revisit_prob: f64,
    pub long_jump_prob: f64,
    pub seed: u64,
    /// Selects the per-question random streams; bundles sharing `seed` but
    /// differing here share geometry and have independent walks.
    pub walk_stream: u64,
    /// Emit token matrices with this inclusive range of rows per segment
    /// instead of pooled vectors.
    pub tokens_per_segment: Option<(usize, usize)>,
    /// Probability that a question is labelled correct; `None` leaves labels unset.
    pub correct_prob: Option<f64>,
    pub model_id: String,
    pub dataset_id: String,
    pub layer_index: u32,
    pub layer_ratio: f64,
    pub num_layers: Option<u32>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_questions: 50,
            d: 16,
            n_true_clusters: 20,
            cluster_separation: 10.0,
            sigma: 1.0,
            walk_length_range: (4, 12),
            revisit_prob: 0.1,
            long_jump_prob: 0.05,
            seed: 0,
            walk_stream: 0,
            tokens_per_segment: None,
            correct_prob: None,
            model_id: "synth".into(),
            dataset_id: "synthetic".into(),
            layer_index: 8,
            layer_ratio: 0.9,
            num_layers: Some(10),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::contract(format!("{name} {p} outside [0, 1]")))
            }
        };
        prob("revisit_prob", self.revisit_prob)?;
        prob("long_jump_prob", self.long_jump_prob)?;
        if let Some(c) = self.correct_prob {
            prob("correct_prob", c)?;
        }
        if self.n_questions == 0 || self.d == 0 || self.n_true_clusters == 0 {
            return Err(Error::contract(
                "n_questions, d and n_true_clusters must be positive",
            ));
        }
        if !(self.cluster_separation > 0.0) || !(self.sigma > 0.0) {
            return Err(Error::contract("cluster_separation and sigma must be positive"));
        }
        let (lo, hi) = self.walk_length_range;
        if lo == 0 || lo > hi {
            return Err(Error::contract(format!(
                "walk_length_range ({lo}, {hi}) must satisfy 1 <= min <= max"
            )));
        }
        if let Some((a, b)) = self.tokens_per_segment {
            if a == 0 || a > b {
                return Err(Error::contract(format!(
                    "tokens_per_segment ({a}, {b}) must satisfy 1 <= min <= max"
                )));
            }
        }
        if self.n_true_clusters < 2 && self.long_jump_prob > 0.0 {
            return Err(Error::contract(
                "long jumps need at least two clusters (n_true_clusters < 2 with long_jump_prob > 0)",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True centre per segment, per question.
    pub true_paths: Vec<Vec<usize>>,
    /// Steps that returned to an earlier centre.
    pub revisit_events: Vec<usize>,
    pub long_jumps: Vec<usize>,
    /// Max-repeats cycle count of each true path.
    pub true_cycle_counts: Vec<usize>,
    /// Distinct transitions of each true path, adjacent repeats skipped.
    pub transition_counts: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn labels(&self) -> Vec<usize> {
        self.true_paths.iter().flatten().copied().collect()
    }

    pub fn mean_walk_length(&self) -> f64 {
        let total: usize = self.true_paths.iter().map(Vec::len).sum();
        total as f64 / self.true_paths.len() as f64
    }
}

/// Digits of the reflected base-`base` Gray code of `i`, least significant first.
fn gray_digits(mut i: usize, base: usize, len: usize) -> Vec<usize> {
    let mut digits = Vec::with_capacity(len);
    for _ in 0..len {
        digits.push(i % base);
        i /= base;
    }
    // walking down from the top digit, an odd emitted digit reverses the
    // order of everything below it
    let mut reflected = false;
    for d in digits.iter_mut().rev() {
        if reflected {
            *d = base - 1 - *d;
        }
        if *d % 2 == 1 {
            reflected = !reflected;
        }
    }
    digits
}

/// Smallest lattice (base, digit count) with room for `n` points in `d` dims.
fn lattice_shape(n: usize, d: usize) -> (usize, usize) {
    let fits = |base: usize, len: usize| {
        (0..len).try_fold(1usize, |acc, _| acc.checked_mul(base)).is_none_or(|cap| cap >= n)
    };
    let mut base = 2;
    while !fits(base, d) {
        base += 1;
    }
    let mut len = 0;
    while !fits(base, len) {
        len += 1;
    }
    (base, len.max(1).min(d))
}

pub fn cluster_centers(config: &SynthConfig) -> Vec<Vec<f64>> {
    let n = config.n_true_clusters;
    let (base, len) = lattice_shape(n, config.d);
    let spacing = config.cluster_separation * config.sigma / 0.8;
    let jitter = 0.1 * spacing / (len as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    (0..n)
        .map(|i| {
            let mut c = vec![0f64; config.d];
            for (slot, g) in c.iter_mut().zip(gray_digits(i, base, len)) {
                *slot = g as f64 * spacing + rng.random_range(-jitter..=jitter);
            }
            c
        })
        .collect()
}

fn stream_rng(config: &SynthConfig, question: usize, kind: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1 + ((config.walk_stream << 40) | ((question as u64) << 1) | kind));
    rng
}

/// Uniform integer in `lo..=hi` from a single draw, so the stream position
/// after sampling does not depend on the range.
fn draw_in(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    let span = (hi - lo + 1) as f64;
    lo + ((rng.random::<f64>() * span) as usize).min(hi - lo)
}

struct Walk {
    path: Vec<usize>,
    revisits: usize,
    jumps: usize,
}

fn walk(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Walk {
    let n = config.n_true_clusters;
    let (lo, hi) = config.walk_length_range;
    let len = draw_in(rng, lo, hi);
    let start = draw_in(rng, 0, n - 1);
    let forward = rng.random::<f64>() < 0.5;
    let mut path = vec![start];
    let mut visited = BTreeSet::from([start]);
    let (mut revisits, mut jumps) = (0, 0);
    for _ in 1..len {
        let cur = *path.last().unwrap();
        let r = rng.random::<f64>();
        let pick = rng.random::<f64>();
        let next = if r < config.revisit_prob && visited.len() > 1 {
            let others: Vec<usize> = visited.iter().copied().filter(|&v| v != cur).collect();
            revisits += 1;
            others[((pick * others.len() as f64) as usize).min(others.len() - 1)]
        } else if r < config.revisit_prob + config.long_jump_prob && n >= 2 {
            jumps += 1;
            let spread = n / 8;
            let offset = (pick * (2 * spread + 1) as f64) as usize;
            let target = (cur + n / 2 + n - spread + offset) % n;
            if target == cur {
                (cur + 1) % n
            } else {
                target
            }
        } else if forward {
            (cur + 1) % n
        } else {
            (cur + n - 1) % n
        };
        visited.insert(next);
        path.push(next);
    }
    Walk {
        path,
        revisits,
        jumps,
    }
}

pub fn generate(config: &SynthConfig) -> Result<(TraceBundle, GroundTruth)> {
    config.validate()?;
    let centers = cluster_centers(config);
    let noise = Normal::new(0.0, config.sigma).expect("sigma validated positive");
    let mut questions = Vec::with_capacity(config.n_questions);
    let mut truth = GroundTruth {
        true_paths: Vec::new(),
        revisit_events: Vec::new(),
        long_jumps: Vec::new(),
        true_cycle_counts: Vec::new(),
        transition_counts: Vec::new(),
        centers: centers.clone(),
    };

    for q in 0..config.n_questions {
        let mut walk_rng = stream_rng(config, q, 0);
        let w = walk(config, &mut walk_rng);
        let answer_correct = config
            .correct_prob
            .map(|p| walk_rng.random::<f64>() < p);

        let mut noise_rng = stream_rng(config, q, 1);
        let segments = w
            .path
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let rows = match config.tokens_per_segment {
                    Some((a, b)) => draw_in(&mut noise_rng, a, b),
                    None => 1,
                };
                let mut data = Vec::with_capacity(rows * config.d);
                for _ in 0..rows {
                    data.extend(
                        centers[c]
                            .iter()
                            .map(|&m| (m + noise.sample(&mut noise_rng)) as f32),
                    );
                }
                SegmentRecord {
                    segment_id: i as u32,
                    token_count: rows,
                    data,
                    text: Some(format!("step {i} at cluster {c}")),
                }
            })
            .collect();
        questions.push(QuestionTrace {
            question_id: format!("synth-{q:05}"),
            answer_correct,
            truncated: None,
            segments,
        });

        truth.true_cycle_counts.push(cycle_stats(&w.path, CycleMode::MaxRepeats).cycle_count);
        truth
            .transition_counts
            .push(crate::graph::path_transitions(&w.path).len());
        truth.revisit_events.push(w.revisits);
        truth.long_jumps.push(w.jumps);
        truth.true_paths.push(w.path);
    }

    let bundle = TraceBundle {
        schema_version: SCHEMA_VERSION,
        model_id: config.model_id.clone(),
        dataset_id: config.dataset_id.clone(),
        layer_index: config.layer_index,
        layer_ratio: config.layer_ratio,
        num_layers: config.num_layers,
        hidden_dim: config.d,
        pooling_mode: if config.tokens_per_segment.is_some() {
            PoolingMode::Tokens
        } else {
            PoolingMode::Pooled
        },
        questions,
    };
    bundle.validate()?;
    Ok((bundle, truth))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WalkProfile {
    pub revisit_prob: f64,
    pub long_jump_prob: f64,
    pub walk_length_range: (usize, usize),
}

/// Short, mostly forward walks.
pub const BASE_PROFILE: WalkProfile = WalkProfile {
    revisit_prob: 0.05,
    long_jump_prob: 0.0,
    walk_length_range: (3, 6),
};

/// Longer walks that revisit and jump more often.
pub const REASONER_PROFILE: WalkProfile = WalkProfile {
    revisit_prob: 0.35,
    long_jump_prob: 0.15,
    walk_length_range: (8, 16),
};

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub base: (TraceBundle, GroundTruth),
    pub reasoner: (TraceBundle, GroundTruth),
}

fn with_profile(config: &SynthConfig, profile: WalkProfile, suffix: &str, stream: u64) -> SynthConfig {
    SynthConfig {
        revisit_prob: profile.revisit_prob,
        long_jump_prob: profile.long_jump_prob,
        walk_length_range: profile.walk_length_range,
        walk_stream: stream,
        model_id: format!("{}-{suffix}", config.model_id),
        ..config.clone()
    }
}

/// A base-like and a reasoner-like bundle over the same cluster geometry.
/// Walk parameters of `config` are replaced by [`BASE_PROFILE`] and
/// [`REASONER_PROFILE`].
pub fn reasoner_base_pair(config: &SynthConfig) -> Result<SynthPair> {
    let base = with_profile(config, BASE_PROFILE, "base", 2 * config.walk_stream);
    let reasoner = with_profile(config, REASONER_PROFILE, "reasoner", 2 * config.walk_stream + 1);
    Ok(SynthPair {
        base: generate(&base)?,
        reasoner: generate(&reasoner)?,
    })
}

/// Layer index for a relative depth: `round(ratio * num_layers) - 1`, clamped.
pub fn layer_index_for(ratio: f64, num_layers: u32) -> u32 {
    ((ratio * num_layers as f64).round() as i64 - 1).clamp(0, num_layers as i64 - 1) as u32
}

/// One bundle per layer ratio, sharing geometry and walk streams, with the
/// walk length range shifted up by `growth` per layer.
pub fn layer_sweep(
    config: &SynthConfig,
    ratios: &[f64],
    growth: usize,
) -> Result<Vec<(TraceBundle, GroundTruth)>> {
    let num_layers = config.num_layers.unwrap_or(100);
    ratios
        .iter()
        .enumerate()
        .map(|(i, &ratio)| {
            let (lo, hi) = config.walk_length_range;
            generate(&SynthConfig {
                walk_length_range: (lo + i * growth, hi + i * growth),
                layer_ratio: ratio,
                layer_index: layer_index_for(ratio, num_layers),
                num_layers: Some(num_layers),
                ..config.clone()
            })
        })
        .collect()
}

/// Fraction of items whose predicted cluster's majority true label matches
/// their own true label.
pub fn purity(truth: &[usize], predicted: &[usize]) -> f64 {
    assert_eq!(truth.len(), predicted.len());
    let mut table: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&t, &p) in truth.iter().zip(predicted) {
        *table.entry(p).or_default().entry(t).or_default() += 1;
    }
    let majority: usize = table
        .values()
        .map(|row| row.values().copied().max().unwrap_or(0))
        .sum();
    majority as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::sq_dist;
    use crate::trace::{read_bundle, write_bundle};

    #[test]
    fn gray_code_steps_one_digit() {
        for (base, len) in [(2usize, 5usize), (3, 3), (5, 2)] {
            let total = base.pow(len as u32);
            let codes: Vec<_> = (0..total).map(|i| gray_digits(i, base, len)).collect();
            let distinct: BTreeSet<_> = codes.iter().cloned().collect();
            assert_eq!(distinct.len(), total);
            for w in codes.windows(2) {
                let diff: usize = w[0]
                    .iter()
                    .zip(&w[1])
                    .map(|(a, b)| a.abs_diff(*b))
                    .sum();
                assert_eq!(diff, 1, "{:?} -> {:?}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn centers_respect_separation() {
        for (n, d) in [(20, 16), (30, 2), (7, 1), (64, 5120)] {
            let cfg = SynthConfig {
                n_true_clusters: n,
                d,
                cluster_separation: 10.0,
                sigma: 0.5,
                ..SynthConfig::default()
            };
            let c = cluster_centers(&cfg);
            for i in 0..n {
                for j in i + 1..n {
                    assert!(sq_dist(&c[i], &c[j]).sqrt() >= 5.0, "{n} {d} {i} {j}");
                }
            }
        }
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let cfg = SynthConfig::default();
        let (a, ta) = generate(&cfg).unwrap();
        let (b, tb) = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_bundle(&a, da.path()).unwrap();
        write_bundle(&b, db.path()).unwrap();
        for f in ["manifest.json", "vectors.bin"] {
            assert_eq!(
                std::fs::read(da.path().join(f)).unwrap(),
                std::fs::read(db.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn written_bundle_reads_back_with_counts() {
        let cfg = SynthConfig {
            n_questions: 50,
            ..SynthConfig::default()
        };
        let (b, truth) = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&b, dir.path()).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.questions.len(), 50);
        for (q, p) in back.questions.iter().zip(&truth.true_paths) {
            assert_eq!(q.segments.len(), p.len());
        }
    }

    #[test]
    fn no_revisit_walks_are_acyclic() {
        let cfg = SynthConfig {
            revisit_prob: 0.0,
            long_jump_prob: 0.0,
            walk_length_range: (2, 20),
            n_true_clusters: 20,
            ..SynthConfig::default()
        };
        let (_, truth) = generate(&cfg).unwrap();
        assert!(truth.true_cycle_counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn certain_revisits_always_cycle() {
        let cfg = SynthConfig {
            revisit_prob: 1.0,
            long_jump_prob: 0.0,
            walk_length_range: (3, 10),
            ..SynthConfig::default()
        };
        let (_, truth) = generate(&cfg).unwrap();
        assert!(truth.true_cycle_counts.iter().all(|&c| c >= 1));
        assert!(truth.revisit_events.iter().all(|&r| r >= 1));
    }

    #[test]
    fn tokens_mode_emits_matrices() {
        let cfg = SynthConfig {
            tokens_per_segment: Some((2, 5)),
            n_questions: 5,
            ..SynthConfig::default()
        };
        let (b, _) = generate(&cfg).unwrap();
        assert_eq!(b.pooling_mode, PoolingMode::Tokens);
        for s in b.questions.iter().flat_map(|q| &q.segments) {
            assert!((2..=5).contains(&s.token_count));
            assert_eq!(s.data.len(), s.token_count * cfg.d);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            SynthConfig {
                n_true_clusters: 1,
                long_jump_prob: 0.2,
                ..SynthConfig::default()
            },
            SynthConfig {
                revisit_prob: 1.5,
                ..SynthConfig::default()
            },
            SynthConfig {
                walk_length_range: (5, 2),
                ..SynthConfig::default()
            },
            SynthConfig {
                cluster_separation: 0.0,
                ..SynthConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(generate(&cfg), Err(Error::Contract(_))));
        }
        let single = SynthConfig {
            n_true_clusters: 1,
            long_jump_prob: 0.0,
            ..SynthConfig::default()
        };
        generate(&single).unwrap();
    }

    #[test]
    fn reasoner_walks_are_longer() {
        let pair = reasoner_base_pair(&SynthConfig::default()).unwrap();
        assert!(pair.reasoner.1.mean_walk_length() > pair.base.1.mean_walk_length());
        assert_eq!(pair.reasoner.1.centers, pair.base.1.centers);
        assert_ne!(pair.base.0.model_id, pair.reasoner.0.model_id);
    }

    #[test]
    fn layer_index_rounding() {
        assert_eq!(layer_index_for(0.9, 64), 57);
        assert_eq!(layer_index_for(0.1, 12), 0);
        assert_eq!(layer_index_for(1.0, 10), 9);
        assert_eq!(layer_index_for(0.01, 10), 0);
    }

    #[test]
    fn sweep_lengthens_walks() {
        let ratios = [0.1, 0.3, 0.5, 0.7, 0.9];
        let layers = layer_sweep(&SynthConfig::default(), &ratios, 3).unwrap();
        let lens: Vec<f64> = layers.iter().map(|(_, t)| t.mean_walk_length()).collect();
        assert!(lens.windows(2).all(|w| w[1] > w[0]), "{lens:?}");
        for ((b, _), r) in layers.iter().zip(ratios) {
            assert_eq!(b.layer_ratio, r);
            b.validate().unwrap();
        }
    }

    #[test]
    fn purity_examples() {
        assert_eq!(purity(&[0, 0, 1, 1], &[5, 5, 2, 2]), 1.0);
        assert_eq!(purity(&[0, 1, 0, 1], &[3, 3, 3, 3]), 0.5);
    }
}
