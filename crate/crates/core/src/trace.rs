//! Trace bundles: the on-disk capture of one (model, dataset, layer) run.
//!
//! A bundle is a directory holding `manifest.json` and `vectors.bin`. The
//! binary file is a concatenation of row-major little-endian float32
//! payloads, one per segment, located by the manifest's `byte_offset` and
//! `byte_length`. A pooled segment stores one row; a token segment stores
//! `token_count` rows.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VECTORS_FILE: &str = "vectors.bin";

const F32_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    /// One mean vector per segment.
    Pooled,
    /// One row per generated token.
    Tokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub segment_id: u32,
    /// Number of stored rows; always 1 for pooled segments.
    pub token_count: usize,
    /// Row-major `token_count x hidden_dim` values.
    pub data: Vec<f32>,
    pub text: Option<String>,
}

impl SegmentRecord {
    pub fn pooled(segment_id: u32, vector: Vec<f32>) -> Self {
        SegmentRecord {
            segment_id,
            token_count: 1,
            data: vector,
            text: None,
        }
    }

    pub fn rows(&self, dim: usize) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionTrace {
    pub question_id: String,
    pub answer_correct: Option<bool>,
    /// Set by extractors when generation hit its token limit.
    pub truncated: Option<bool>,
    /// Reasoning segments in generation order.
    pub segments: Vec<SegmentRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceBundle {
    pub schema_version: u32,
    pub model_id: String,
    pub dataset_id: String,
    /// 0-based transformer layer the states were captured at.
    pub layer_index: u32,
    pub layer_ratio: f64,
    pub num_layers: Option<u32>,
    pub hidden_dim: usize,
    pub pooling_mode: PoolingMode,
    pub questions: Vec<QuestionTrace>,
}

impl TraceBundle {
    pub fn num_segments(&self) -> usize {
        self.questions.iter().map(|q| q.segments.len()).sum()
    }

    /// Allowed gap between `layer_ratio` and `(layer_index + 1) / num_layers`.
    ///
    /// Rounding a requested ratio to a layer index moves it by up to half a
    /// layer, which exceeds 0.01 on shallow models.
    pub fn layer_ratio_tolerance(num_layers: u32) -> f64 {
        0.01f64.max(0.5 / num_layers as f64 + 1e-9)
    }

    /// Checks every in-memory invariant of the bundle.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        if self.hidden_dim == 0 {
            return Err(Error::format("hidden_dim", "must be positive"));
        }
        if !(self.layer_ratio > 0.0 && self.layer_ratio <= 1.0) {
            return Err(Error::format(
                "layer_ratio",
                format!("{} is outside (0, 1]", self.layer_ratio),
            ));
        }
        if let Some(n) = self.num_layers {
            if n == 0 || self.layer_index >= n {
                return Err(Error::format(
                    "num_layers",
                    format!("layer_index {} not below num_layers {n}", self.layer_index),
                ));
            }
            let implied = (self.layer_index as f64 + 1.0) / n as f64;
            if (implied - self.layer_ratio).abs() > Self::layer_ratio_tolerance(n) {
                return Err(Error::format(
                    "layer_ratio",
                    format!(
                        "{} inconsistent with layer_index {} of {n} layers (implies {implied:.4})",
                        self.layer_ratio, self.layer_index
                    ),
                ));
            }
        }

        let mut seen = HashSet::with_capacity(self.questions.len());
        for q in &self.questions {
            if !seen.insert(q.question_id.as_str()) {
                return Err(Error::format(
                    "question_id",
                    format!("duplicate question_id {:?}", q.question_id),
                ));
            }
            if q.segments.is_empty() {
                return Err(Error::Data(format!(
                    "question {:?} has no segments",
                    q.question_id
                )));
            }
            let mut prev_id: Option<u32> = None;
            for s in &q.segments {
                if prev_id.is_some_and(|p| s.segment_id <= p) {
                    return Err(Error::format(
                        "segment_id",
                        format!(
                            "question {:?}: segment ids must increase, {} follows {}",
                            q.question_id,
                            s.segment_id,
                            prev_id.unwrap()
                        ),
                    ));
                }
                prev_id = Some(s.segment_id);
                self.validate_segment(&q.question_id, s)?;
            }
        }
        Ok(())
    }

    fn validate_segment(&self, question_id: &str, s: &SegmentRecord) -> Result<()> {
        if s.token_count == 0 {
            return Err(Error::Data(format!(
                "question {question_id:?} segment {}: empty segment (token_count 0)",
                s.segment_id
            )));
        }
        if self.pooling_mode == PoolingMode::Pooled && s.token_count != 1 {
            return Err(Error::format(
                "token_count",
                format!(
                    "question {question_id:?} segment {}: pooled segments store one row, found {}",
                    s.segment_id, s.token_count
                ),
            ));
        }
        if s.data.len() != s.token_count * self.hidden_dim {
            return Err(Error::Data(format!(
                "question {question_id:?} segment {}: {} values for {} rows of dim {}",
                s.segment_id,
                s.data.len(),
                s.token_count,
                self.hidden_dim
            )));
        }
        if let Some(pos) = s.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "question {question_id:?} segment {}: non-finite value {} at element {pos}",
                s.segment_id, s.data[pos]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    model_id: String,
    dataset_id: String,
    layer_index: u32,
    layer_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_layers: Option<u32>,
    hidden_dim: usize,
    pooling_mode: PoolingMode,
    questions: Vec<ManifestQuestion>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestQuestion {
    question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truncated: Option<bool>,
    segments: Vec<ManifestSegment>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSegment {
    segment_id: u32,
    token_count: usize,
    byte_offset: u64,
    byte_length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

/// serde reports missing or mistyped fields as "... `name` ..."; pull the name out.
fn serde_field(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    msg.split('`')
        .nth(1)
        .map(str::to_owned)
        .unwrap_or_else(|| MANIFEST_FILE.to_owned())
}

/// Loads and fully validates the bundle at `dir`.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<TraceBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::format(serde_field(&e), format!("{}: {e}", manifest_path.display())))?;

    let vectors_path = dir.join(VECTORS_FILE);
    let payload = fs::read(&vectors_path).map_err(|e| Error::io(&vectors_path, e))?;

    if manifest.hidden_dim == 0 {
        return Err(Error::format("hidden_dim", "must be positive"));
    }
    let dim = manifest.hidden_dim;
    let file_len = payload.len() as u64;
    let mut cursor = 0u64;
    let mut questions = Vec::with_capacity(manifest.questions.len());
    for mq in manifest.questions {
        let mut segments = Vec::with_capacity(mq.segments.len());
        for ms in mq.segments {
            let expected = F32_BYTES * ms.token_count as u64 * dim as u64;
            if ms.byte_length != expected {
                return Err(Error::Corruption(format!(
                    "question {:?} segment {}: byte_length {} but token_count {} x hidden_dim {dim} needs {expected}",
                    mq.question_id, ms.segment_id, ms.byte_length, ms.token_count
                )));
            }
            if ms.byte_offset < cursor {
                return Err(Error::Corruption(format!(
                    "question {:?} segment {}: byte_offset {} overlaps or precedes previous payload ending at {cursor}",
                    mq.question_id, ms.segment_id, ms.byte_offset
                )));
            }
            let end = ms.byte_offset + ms.byte_length;
            if end > file_len {
                return Err(Error::Corruption(format!(
                    "question {:?} segment {}: payload at offset {} length {} runs past end of {VECTORS_FILE} ({file_len} bytes)",
                    mq.question_id, ms.segment_id, ms.byte_offset, ms.byte_length
                )));
            }
            let bytes = &payload[ms.byte_offset as usize..end as usize];
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            cursor = end;
            segments.push(SegmentRecord {
                segment_id: ms.segment_id,
                token_count: ms.token_count,
                data,
                text: ms.text,
            });
        }
        questions.push(QuestionTrace {
            question_id: mq.question_id,
            answer_correct: mq.answer_correct,
            truncated: mq.truncated,
            segments,
        });
    }
    if cursor != file_len {
        return Err(Error::Corruption(format!(
            "{VECTORS_FILE} has {file_len} bytes but manifest payloads end at offset {cursor}"
        )));
    }

    let bundle = TraceBundle {
        schema_version: manifest.schema_version,
        model_id: manifest.model_id,
        dataset_id: manifest.dataset_id,
        layer_index: manifest.layer_index,
        layer_ratio: manifest.layer_ratio,
        num_layers: manifest.num_layers,
        hidden_dim: dim,
        pooling_mode: manifest.pooling_mode,
        questions,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `bundle` to `dir` (created if missing). Payloads are laid out
/// contiguously in manifest order, so equal bundles give equal bytes.
pub fn write_bundle(bundle: &TraceBundle, dir: impl AsRef<Path>) -> Result<()> {
    bundle.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let vectors_path = dir.join(VECTORS_FILE);
    let file = fs::File::create(&vectors_path).map_err(|e| Error::io(&vectors_path, e))?;
    let mut out = BufWriter::new(file);
    let mut offset = 0u64;
    let mut questions = Vec::with_capacity(bundle.questions.len());
    for q in &bundle.questions {
        let mut segments = Vec::with_capacity(q.segments.len());
        for s in &q.segments {
            for v in &s.data {
                out.write_all(&v.to_le_bytes())
                    .map_err(|e| Error::io(&vectors_path, e))?;
            }
            let len = F32_BYTES * s.data.len() as u64;
            segments.push(ManifestSegment {
                segment_id: s.segment_id,
                token_count: s.token_count,
                byte_offset: offset,
                byte_length: len,
                text: s.text.clone(),
            });
            offset += len;
        }
        questions.push(ManifestQuestion {
            question_id: q.question_id.clone(),
            answer_correct: q.answer_correct,
            truncated: q.truncated,
            segments,
        });
    }
    out.flush().map_err(|e| Error::io(&vectors_path, e))?;

    let manifest = Manifest {
        schema_version: bundle.schema_version,
        model_id: bundle.model_id.clone(),
        dataset_id: bundle.dataset_id.clone(),
        layer_index: bundle.layer_index,
        layer_ratio: bundle.layer_ratio,
        num_layers: bundle.num_layers,
        hidden_dim: bundle.hidden_dim,
        pooling_mode: bundle.pooling_mode,
        questions,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
}

/// Replaces every token matrix with its column mean (64-bit accumulation,
/// stored as float32).
pub fn pool_segments(mut bundle: TraceBundle) -> Result<TraceBundle> {
    if bundle.pooling_mode != PoolingMode::Tokens {
        return Err(Error::contract(
            "pool_segments requires a bundle in tokens mode; this bundle is already pooled",
        ));
    }
    let dim = bundle.hidden_dim;
    if dim == 0 {
        return Err(Error::format("hidden_dim", "must be positive"));
    }
    for q in &mut bundle.questions {
        for s in &mut q.segments {
            if s.token_count == 0 || s.data.is_empty() {
                return Err(Error::Data(format!(
                    "question {:?} segment {}: cannot pool an empty segment",
                    q.question_id, s.segment_id
                )));
            }
            if s.data.len() != s.token_count * dim {
                return Err(Error::Data(format!(
                    "question {:?} segment {}: {} values for {} rows of dim {dim}",
                    q.question_id,
                    s.segment_id,
                    s.data.len(),
                    s.token_count
                )));
            }
            let mut acc = vec![0f64; dim];
            for row in s.data.chunks_exact(dim) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
            let n = s.token_count as f64;
            s.data = acc.into_iter().map(|a| (a / n) as f32).collect();
            s.token_count = 1;
        }
    }
    bundle.pooling_mode = PoolingMode::Pooled;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_bundle(mode: PoolingMode, rows: usize, dim: usize) -> TraceBundle {
        let mut questions = Vec::new();
        for qi in 0..2 {
            let segments = (0..3)
                .map(|si| SegmentRecord {
                    segment_id: si,
                    token_count: rows,
                    data: (0..rows * dim)
                        .map(|k| (qi * 100 + si as usize * 10 + k) as f32 * 0.25)
                        .collect(),
                    text: (si == 0).then(|| format!("step {si}")),
                })
                .collect();
            questions.push(QuestionTrace {
                question_id: format!("q{qi}"),
                answer_correct: (qi == 0).then_some(true),
                truncated: None,
                segments,
            });
        }
        TraceBundle {
            schema_version: SCHEMA_VERSION,
            model_id: "m".into(),
            dataset_id: "d".into(),
            layer_index: 8,
            layer_ratio: 0.9,
            num_layers: Some(10),
            hidden_dim: dim,
            pooling_mode: mode,
            questions,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let b = small_bundle(PoolingMode::Pooled, 1, 4);
        write_bundle(&b, dir.path()).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back, b);
        let lens: Vec<_> = back.questions.iter().map(|q| q.segments.len()).collect();
        assert_eq!(lens, vec![3, 3]);
    }

    #[test]
    fn token_segment_payload_size() {
        let dir = tempfile::tempdir().unwrap();
        let b = small_bundle(PoolingMode::Tokens, 5, 3);
        write_bundle(&b, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join(VECTORS_FILE)).unwrap();
        // 6 segments x 15 floats x 4 bytes
        assert_eq!(bytes.len(), 6 * 15 * 4);
        let first: Vec<f32> = bytes[..60]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(first, b.questions[0].segments[0].data);
    }

    #[test]
    fn repeated_writes_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let c = tempfile::tempdir().unwrap();
        let b = small_bundle(PoolingMode::Tokens, 2, 3);
        write_bundle(&b, a.path()).unwrap();
        write_bundle(&b, c.path()).unwrap();
        for f in [MANIFEST_FILE, VECTORS_FILE] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(c.path().join(f)).unwrap()
            );
        }
    }

    fn rewrite_manifest(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) {
        let p = dir.join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        edit(&mut v);
        fs::write(p, serde_json::to_vec(&v).unwrap()).unwrap();
    }

    #[test]
    fn byte_length_mismatch_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&small_bundle(PoolingMode::Pooled, 1, 4), dir.path()).unwrap();
        rewrite_manifest(dir.path(), |v| {
            v["questions"][0]["segments"][0]["byte_length"] = 28.into();
        });
        let err = read_bundle(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Corruption(_)), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&small_bundle(PoolingMode::Pooled, 1, 4), dir.path()).unwrap();
        let p = dir.path().join(VECTORS_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_bundle(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Corruption(_)));
        assert!(err.to_string().contains("offset 80"), "{err}");
    }

    #[test]
    fn trailing_bytes_are_corruption() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&small_bundle(PoolingMode::Pooled, 1, 4), dir.path()).unwrap();
        let p = dir.path().join(VECTORS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes.extend_from_slice(&[0; 4]);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            read_bundle(dir.path()).unwrap_err(),
            Error::Corruption(_)
        ));
    }

    #[test]
    fn overlapping_offsets_are_corruption() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&small_bundle(PoolingMode::Pooled, 1, 4), dir.path()).unwrap();
        rewrite_manifest(dir.path(), |v| {
            v["questions"][0]["segments"][1]["byte_offset"] = 8.into();
        });
        assert!(matches!(
            read_bundle(dir.path()).unwrap_err(),
            Error::Corruption(_)
        ));
    }

    #[test]
    fn missing_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&small_bundle(PoolingMode::Pooled, 1, 4), dir.path()).unwrap();
        rewrite_manifest(dir.path(), |v| {
            v.as_object_mut().unwrap().remove("hidden_dim");
        });
        match read_bundle(dir.path()).unwrap_err() {
            Error::Format { field, .. } => assert_eq!(field, "hidden_dim"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_finite_payload_names_segment() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&small_bundle(PoolingMode::Pooled, 1, 4), dir.path()).unwrap();
        let p = dir.path().join(VECTORS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        // question q1, segment 2 starts at float index 5 * 4
        bytes[20 * 4..21 * 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        let err = read_bundle(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let msg = err.to_string();
        assert!(msg.contains("\"q1\"") && msg.contains("segment 2"), "{msg}");
    }

    #[test]
    fn validation_rejects_bad_headers() {
        let mut b = small_bundle(PoolingMode::Pooled, 1, 4);
        b.questions[1].question_id = "q0".into();
        assert!(matches!(b.validate(), Err(Error::Format { field, .. }) if field == "question_id"));

        let mut b = small_bundle(PoolingMode::Pooled, 1, 4);
        b.layer_ratio = 0.5;
        assert!(matches!(b.validate(), Err(Error::Format { field, .. }) if field == "layer_ratio"));

        let mut b = small_bundle(PoolingMode::Pooled, 1, 4);
        b.questions[0].segments.clear();
        assert!(matches!(b.validate(), Err(Error::Data(_))));

        let mut b = small_bundle(PoolingMode::Tokens, 2, 4);
        b.questions[0].segments[1].token_count = 0;
        b.questions[0].segments[1].data.clear();
        assert!(matches!(b.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn shallow_model_rounding_is_accepted() {
        // 12 layers, ratio 0.1 rounds to layer index 0 (implied 1/12)
        let mut b = small_bundle(PoolingMode::Pooled, 1, 4);
        b.num_layers = Some(12);
        b.layer_index = 0;
        b.layer_ratio = 0.1;
        b.validate().unwrap();
    }

    #[test]
    fn pooling_mean() {
        let mut b = small_bundle(PoolingMode::Tokens, 2, 2);
        b.questions[0].segments[0].data = vec![1.0, 3.0, 3.0, 5.0];
        let pooled = pool_segments(b).unwrap();
        assert_eq!(pooled.pooling_mode, PoolingMode::Pooled);
        assert_eq!(pooled.questions[0].segments[0].data, vec![2.0, 4.0]);
        assert_eq!(pooled.questions[0].segments[0].token_count, 1);
        pooled.validate().unwrap();
    }

    #[test]
    fn single_token_pool_is_identity() {
        let b = small_bundle(PoolingMode::Tokens, 1, 3);
        let pooled = pool_segments(b.clone()).unwrap();
        for (q, p) in b.questions.iter().zip(&pooled.questions) {
            for (s, t) in q.segments.iter().zip(&p.segments) {
                assert_eq!(s.data, t.data);
            }
        }
    }

    #[test]
    fn pooling_rejects_pooled_and_empty() {
        let b = small_bundle(PoolingMode::Pooled, 1, 3);
        assert!(matches!(pool_segments(b), Err(Error::Contract(_))));

        let mut b = small_bundle(PoolingMode::Tokens, 2, 3);
        b.questions[1].segments[0].token_count = 0;
        b.questions[1].segments[0].data.clear();
        assert!(matches!(pool_segments(b), Err(Error::Data(_))));
    }

    #[test]
    fn pooling_matches_column_mean_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (rows, dim) = (100, 64);
        let data: Vec<f32> = (0..rows * dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut b = small_bundle(PoolingMode::Tokens, rows, dim);
        b.questions[0].segments[0].data = data.clone();
        let pooled = pool_segments(b).unwrap();
        let got = &pooled.questions[0].segments[0].data;
        for c in 0..dim {
            // column-wise summation, rows visited in reverse
            let mut s = 0f64;
            for r in (0..rows).rev() {
                s += data[r * dim + c] as f64;
            }
            let want = s / rows as f64;
            assert!((got[c] as f64 - want).abs() < 1e-6, "col {c}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn bundle_strategy() -> impl Strategy<Value = TraceBundle> {
            (1usize..5, 1usize..4, any::<bool>()).prop_flat_map(|(dim, rows, tokens)| {
                let mode = if tokens {
                    PoolingMode::Tokens
                } else {
                    PoolingMode::Pooled
                };
                let rows = if tokens { rows } else { 1 };
                let seg = proptest::collection::vec(
                    proptest::num::f32::NORMAL | proptest::num::f32::SUBNORMAL | proptest::num::f32::ZERO,
                    rows * dim,
                );
                let question = proptest::collection::vec(seg, 1..4);
                proptest::collection::vec((question, proptest::option::of(any::<bool>())), 1..4)
                    .prop_map(move |qs| TraceBundle {
                        schema_version: SCHEMA_VERSION,
                        model_id: "p".into(),
                        dataset_id: "d".into(),
                        layer_index: 0,
                        layer_ratio: 0.5,
                        num_layers: None,
                        hidden_dim: dim,
                        pooling_mode: mode,
                        questions: qs
                            .into_iter()
                            .enumerate()
                            .map(|(qi, (segs, correct))| QuestionTrace {
                                question_id: format!("q{qi}"),
                                answer_correct: correct,
                                truncated: None,
                                segments: segs
                                    .into_iter()
                                    .enumerate()
                                    .map(|(si, data)| SegmentRecord {
                                        segment_id: si as u32,
                                        token_count: rows,
                                        data,
                                        text: None,
                                    })
                                    .collect(),
                            })
                            .collect(),
                    })
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn write_read_is_bit_exact(b in bundle_strategy()) {
                let dir = tempfile::tempdir().unwrap();
                write_bundle(&b, dir.path()).unwrap();
                let back = read_bundle(dir.path()).unwrap();
                prop_assert_eq!(back.questions.len(), b.questions.len());
                for (x, y) in back.questions.iter().zip(&b.questions) {
                    for (s, t) in x.segments.iter().zip(&y.segments) {
                        let sb: Vec<u32> = s.data.iter().map(|v| v.to_bits()).collect();
                        let tb: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
                        prop_assert_eq!(sb, tb);
                    }
                }
                prop_assert_eq!(back, b);
            }

            #[test]
            fn pooling_constant_rows_is_exact(
                row in proptest::collection::vec(-1e6f32..1e6, 1..8),
                n in 1usize..20,
            ) {
                let dim = row.len();
                let mut b = small_bundle(PoolingMode::Tokens, 1, dim);
                b.questions.truncate(1);
                b.questions[0].segments.truncate(1);
                b.questions[0].segments[0].token_count = n;
                b.questions[0].segments[0].data = row.repeat(n);
                let pooled = pool_segments(b).unwrap();
                prop_assert_eq!(&pooled.questions[0].segments[0].data, &row);
            }
        }
    }
}
