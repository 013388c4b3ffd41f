//! Utterance records: on-disk format, validation, and synthetic corpora.
//!
//! A record is two files sharing a stem:
//!
//! * `<stem>.safetensors` holding the arrays `mel` (`f64`, `[F, L]`),
//!   `lip_raw` (`f64`, `[D_v, L_v]`), `text_ids` (`i64`, `[T]`) and
//!   `align_feat` (`f64`, `[D_a, L]`), all little-endian;
//! * `<stem>.meta`, a `key = value` text file with `ref_len`, `utt_id` and
//!   `sample_rate_hint`.
//!
//! Arrays are stored bins-by-frames as above; model code works on the
//! transposed frames-by-channels layout.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::config::KvMap;
use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE_HINT: u32 = 24_000;

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed array container: {0}")]
    Format(String),
    #[error("missing array `{0}`")]
    MissingArray(&'static str),
    #[error("array `{array}` has dtype {found}, expected {expected}")]
    WrongDtype {
        array: &'static str,
        found: String,
        expected: &'static str,
    },
    #[error("shape mismatch for `{array}`: {detail}")]
    ShapeMismatch { array: &'static str, detail: String },
    #[error("non-finite value in `{0}`")]
    NonFinite(&'static str),
    #[error("missing metadata key `{0}`")]
    MissingMeta(&'static str),
    #[error("bad metadata value for `{key}`: {value:?}")]
    BadMeta { key: String, value: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl RecordError {
    /// Stable identifier for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            RecordError::Io { .. } => "io",
            RecordError::Format(_) => "format",
            RecordError::MissingArray(_) => "missing-array",
            RecordError::WrongDtype { .. } => "wrong-dtype",
            RecordError::ShapeMismatch { .. } => "shape-mismatch",
            RecordError::NonFinite(_) => "non-finite",
            RecordError::MissingMeta(_) => "missing-meta",
            RecordError::BadMeta { .. } => "bad-meta",
            RecordError::Invariant(_) => "invariant",
        }
    }
}

/// One training or inference sample.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    /// Log-magnitude mel spectrogram, `[F × L]`.
    pub mel: Array2<f64>,
    /// Raw visual features, `[D_v × L_v]` with `L_v ≤ L`.
    pub lip_raw: Array2<f64>,
    /// Token ids.
    pub text_ids: Vec<usize>,
    /// Per-frame alignment features, `[D_a × L]`.
    pub align_feat: Array2<f64>,
    /// Frames of reference audio at the start of the utterance.
    pub ref_len: usize,
    pub utt_id: String,
    pub sample_rate_hint: u32,
}

impl UtteranceRecord {
    pub fn mel_bins(&self) -> usize {
        self.mel.nrows()
    }

    pub fn frames(&self) -> usize {
        self.mel.ncols()
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        let frames = self.frames();
        if frames == 0 {
            return Err(RecordError::ShapeMismatch {
                array: "mel",
                detail: "zero frames".into(),
            });
        }
        if self.lip_raw.ncols() == 0 || self.lip_raw.ncols() > frames {
            return Err(RecordError::ShapeMismatch {
                array: "lip_raw",
                detail: format!("{} video frames for {frames} mel frames", self.lip_raw.ncols()),
            });
        }
        if self.align_feat.ncols() != frames {
            return Err(RecordError::ShapeMismatch {
                array: "align_feat",
                detail: format!("{} frames, mel has {frames}", self.align_feat.ncols()),
            });
        }
        if self.text_ids.is_empty() {
            return Err(RecordError::ShapeMismatch {
                array: "text_ids",
                detail: "empty token sequence".into(),
            });
        }
        for (name, arr) in [
            ("mel", &self.mel),
            ("lip_raw", &self.lip_raw),
            ("align_feat", &self.align_feat),
        ] {
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(RecordError::NonFinite(name));
            }
        }
        if self.ref_len >= frames {
            return Err(RecordError::Invariant(format!(
                "ref_len {} must be below frame count {frames}",
                self.ref_len
            )));
        }
        Ok(())
    }

    /// Additionally checks that every token id is below `vocab_size`.
    pub fn validate_vocab(&self, vocab_size: usize) -> Result<(), RecordError> {
        self.validate()?;
        if let Some(&bad) = self.text_ids.iter().find(|&&t| t >= vocab_size) {
            return Err(RecordError::Invariant(format!(
                "token id {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(())
    }

    /// The array container bytes written by [`save_record`].
    pub fn to_bytes(&self) -> Result<Vec<u8>, RecordError> {
        self.container_bytes(&[])
    }

    fn container_bytes(&self, extras: &[(&str, &Array2<f64>)]) -> Result<Vec<u8>, RecordError> {
        let mel = f64_bytes(&self.mel);
        let lip = f64_bytes(&self.lip_raw);
        let align = f64_bytes(&self.align_feat);
        let ids: Vec<u8> = self.text_ids.iter().flat_map(|&t| (t as i64).to_le_bytes()).collect();
        let tensors = vec![
            ("mel", view(Dtype::F64, vec![self.mel.nrows(), self.mel.ncols()], &mel)?),
            (
                "lip_raw",
                view(Dtype::F64, vec![self.lip_raw.nrows(), self.lip_raw.ncols()], &lip)?,
            ),
            ("text_ids", view(Dtype::I64, vec![self.text_ids.len()], &ids)?),
            (
                "align_feat",
                view(
                    Dtype::F64,
                    vec![self.align_feat.nrows(), self.align_feat.ncols()],
                    &align,
                )?,
            ),
        ];
        let extra_bytes: Vec<Vec<u8>> = extras.iter().map(|(_, m)| f64_bytes(m)).collect();
        let mut tensors = tensors;
        for ((name, m), bytes) in extras.iter().zip(&extra_bytes) {
            tensors.push((name, view(Dtype::F64, vec![m.nrows(), m.ncols()], bytes)?));
        }
        safetensors::serialize(tensors, None).map_err(|e| RecordError::Format(e.to_string()))
    }

    fn meta_text(&self) -> String {
        let mut kv = KvMap::default();
        kv.insert("ref_len", self.ref_len);
        kv.insert("utt_id", &self.utt_id);
        kv.insert("sample_rate_hint", self.sample_rate_hint);
        kv.to_text()
    }
}

fn view(dtype: Dtype, shape: Vec<usize>, data: &[u8]) -> Result<TensorView<'_>, RecordError> {
    TensorView::new(dtype, shape, data).map_err(|e| RecordError::Format(e.to_string()))
}

fn f64_bytes(m: &Array2<f64>) -> Vec<u8> {
    m.as_standard_layout().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Sidecar metadata path for a record's array file.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

pub fn save_record(record: &UtteranceRecord, path: &Path) -> Result<(), RecordError> {
    let bytes = record.to_bytes()?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| RecordError::Io { path: p, source }
    };
    std::fs::write(path, bytes).map_err(io(path))?;
    let meta = meta_path(path);
    std::fs::write(&meta, record.meta_text()).map_err(io(&meta))?;
    Ok(())
}

fn read_matrix(st: &SafeTensors<'_>, name: &'static str) -> Result<Array2<f64>, RecordError> {
    let view = st.tensor(name).map_err(|_| RecordError::MissingArray(name))?;
    if view.dtype() != Dtype::F64 {
        return Err(RecordError::WrongDtype {
            array: name,
            found: format!("{:?}", view.dtype()),
            expected: "F64",
        });
    }
    let shape = view.shape();
    if shape.len() != 2 {
        return Err(RecordError::ShapeMismatch {
            array: name,
            detail: format!("rank {} array, expected rank 2", shape.len()),
        });
    }
    let data: Vec<f64> = view
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| RecordError::ShapeMismatch {
        array: name,
        detail: e.to_string(),
    })
}

fn read_meta(path: &Path) -> Result<(usize, String, u32), RecordError> {
    let text = std::fs::read_to_string(path).map_err(|source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut map: HashMap<String, String> = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| RecordError::Format(format!("metadata line {line:?}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &'static str| map.get(key).cloned().ok_or(RecordError::MissingMeta(key));
    let ref_raw = get("ref_len")?;
    let ref_len = ref_raw.parse().map_err(|_| RecordError::BadMeta {
        key: "ref_len".into(),
        value: ref_raw,
    })?;
    let utt_id = get("utt_id")?;
    let sample_rate_hint = match map.get("sample_rate_hint") {
        Some(raw) => raw.parse().map_err(|_| RecordError::BadMeta {
            key: "sample_rate_hint".into(),
            value: raw.clone(),
        })?,
        None => DEFAULT_SAMPLE_RATE_HINT,
    };
    Ok((ref_len, utt_id, sample_rate_hint))
}

/// Writes a generated utterance: a regular record whose `mel` is the full
/// generated sequence, plus the target-span frames as `mel_region` (`[F × span]`)
/// and the span bounds as `region_start`/`region_end` metadata.
pub fn save_generated(
    record: &UtteranceRecord,
    region: &Array2<f64>,
    span: (usize, usize),
    path: &Path,
) -> Result<(), RecordError> {
    if span.0 >= span.1 || span.1 > record.frames() || region.dim() != (record.mel_bins(), span.1 - span.0) {
        return Err(RecordError::ShapeMismatch {
            array: "mel_region",
            detail: format!(
                "{:?} for span [{}, {}) of {} frames",
                region.dim(),
                span.0,
                span.1,
                record.frames()
            ),
        });
    }
    let bytes = record.container_bytes(&[("mel_region", region)])?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| RecordError::Io { path: p, source }
    };
    std::fs::write(path, bytes).map_err(io(path))?;
    let meta = meta_path(path);
    let text = format!(
        "{}region_end = {}\nregion_start = {}\n",
        record.meta_text(),
        span.1,
        span.0
    );
    std::fs::write(&meta, text).map_err(io(&meta))?;
    Ok(())
}

/// The `mel_region` array and span of a file written by [`save_generated`].
pub fn load_generated_region(path: &Path) -> Result<(Array2<f64>, (usize, usize)), RecordError> {
    let bytes = std::fs::read(path).map_err(|source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| RecordError::Format(e.to_string()))?;
    let region = read_matrix(&st, "mel_region")?;
    let mut kv = KvMap::load(&meta_path(path)).map_err(|e| RecordError::Format(e.to_string()))?;
    let meta = |e: Error| RecordError::Format(e.to_string());
    let mut span = (usize::MAX, usize::MAX);
    kv.take("region_start", &mut span.0).map_err(meta)?;
    kv.take("region_end", &mut span.1).map_err(meta)?;
    if span.0 == usize::MAX {
        return Err(RecordError::MissingMeta("region_start"));
    }
    if span.1 == usize::MAX {
        return Err(RecordError::MissingMeta("region_end"));
    }
    if region.ncols() != span.1.saturating_sub(span.0) {
        return Err(RecordError::ShapeMismatch {
            array: "mel_region",
            detail: format!("{} frames for span [{}, {})", region.ncols(), span.0, span.1),
        });
    }
    Ok((region, span))
}

/// Reads and validates a record written by [`save_record`].
pub fn load_record(path: &Path) -> Result<UtteranceRecord, RecordError> {
    let bytes = std::fs::read(path).map_err(|source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| RecordError::Format(e.to_string()))?;
    let mel = read_matrix(&st, "mel")?;
    let lip_raw = read_matrix(&st, "lip_raw")?;
    let align_feat = read_matrix(&st, "align_feat")?;

    let ids = st
        .tensor("text_ids")
        .map_err(|_| RecordError::MissingArray("text_ids"))?;
    if ids.dtype() != Dtype::I64 {
        return Err(RecordError::WrongDtype {
            array: "text_ids",
            found: format!("{:?}", ids.dtype()),
            expected: "I64",
        });
    }
    if ids.shape().len() != 1 {
        return Err(RecordError::ShapeMismatch {
            array: "text_ids",
            detail: format!("rank {} array, expected rank 1", ids.shape().len()),
        });
    }
    let text_ids = ids
        .data()
        .chunks_exact(8)
        .map(|c| {
            let v = i64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            usize::try_from(v).map_err(|_| RecordError::Invariant(format!("negative token id {v}")))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let (ref_len, utt_id, sample_rate_hint) = read_meta(&meta_path(path))?;
    let record = UtteranceRecord {
        mel,
        lip_raw,
        text_ids,
        align_feat,
        ref_len,
        utt_id,
        sample_rate_hint,
    };
    record.validate()?;
    Ok(record)
}

/// Writes every record as `<dir>/<utt_id>.safetensors` (+ `.meta`).
pub fn save_corpus(records: &[UtteranceRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    records
        .iter()
        .map(|r| {
            let path = dir.join(format!("{}.safetensors", r.utt_id));
            save_record(r, &path)?;
            Ok(path)
        })
        .collect()
}

/// Loads every `*.safetensors` record in `dir`, ordered by file name.
pub fn load_corpus(dir: &Path) -> Result<Vec<UtteranceRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid("data", format!("no records in {}", dir.display())));
    }
    paths.iter().map(|p| Ok(load_record(p)?)).collect()
}

/// Parameters of a synthetic corpus. The seed fully determines the output.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub n_utterances: usize,
    pub frames_per_token: usize,
    pub mel_bins: usize,
    pub visual_dim: usize,
    pub align_dim: usize,
    pub seed: u64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Mel frames per video frame.
    pub lip_stride: usize,
    /// Standard deviation of additive Gaussian noise on mel and lip features.
    pub noise_std: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            n_utterances: 16,
            frames_per_token: 8,
            mel_bins: 100,
            visual_dim: 64,
            align_dim: 32,
            seed: 0,
            min_tokens: 4,
            max_tokens: 8,
            lip_stride: 2,
            noise_std: 0.01,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("n_utterances", self.n_utterances),
            ("frames_per_token", self.frames_per_token),
            ("mel_bins", self.mel_bins),
            ("visual_dim", self.visual_dim),
            ("align_dim", self.align_dim),
            ("min_tokens", self.min_tokens),
            ("max_tokens", self.max_tokens),
            ("lip_stride", self.lip_stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid(
                "vocab_size",
                "need at least one silence and one voiced token",
            ));
        }
        if self.align_dim < self.vocab_size {
            return Err(Error::invalid(
                "align_dim",
                format!(
                    "one-hot alignment features need align_dim >= vocab_size ({})",
                    self.vocab_size
                ),
            ));
        }
        if self.min_tokens > self.max_tokens {
            return Err(Error::invalid("min_tokens", "exceeds max_tokens"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn from_kv(mut kv: KvMap) -> Result<Self> {
        let mut s = Self::default();
        kv.take("vocab_size", &mut s.vocab_size)?;
        kv.take("n_utterances", &mut s.n_utterances)?;
        kv.take("frames_per_token", &mut s.frames_per_token)?;
        kv.take("mel_bins", &mut s.mel_bins)?;
        kv.take("visual_dim", &mut s.visual_dim)?;
        kv.take("align_dim", &mut s.align_dim)?;
        kv.take("seed", &mut s.seed)?;
        kv.take("min_tokens", &mut s.min_tokens)?;
        kv.take("max_tokens", &mut s.max_tokens)?;
        kv.take("lip_stride", &mut s.lip_stride)?;
        kv.take("noise_std", &mut s.noise_std)?;
        kv.finish()?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("vocab_size", self.vocab_size);
        kv.insert("n_utterances", self.n_utterances);
        kv.insert("frames_per_token", self.frames_per_token);
        kv.insert("mel_bins", self.mel_bins);
        kv.insert("visual_dim", self.visual_dim);
        kv.insert("align_dim", self.align_dim);
        kv.insert("seed", self.seed);
        kv.insert("min_tokens", self.min_tokens);
        kv.insert("max_tokens", self.max_tokens);
        kv.insert("lip_stride", self.lip_stride);
        kv.insert("noise_std", self.noise_std);
        kv
    }
}

/// Fixed per-token renderings shared by every utterance of a corpus.
#[derive(Clone, Debug)]
pub struct TokenTemplates {
    /// `[V × F]`; row 0 (silence) is all zeros.
    pub mel: Array2<f64>,
    /// `[V × D_v]`.
    pub lip: Array2<f64>,
}

impl TokenTemplates {
    fn draw(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> Self {
        let mel = Array2::from_shape_fn((spec.vocab_size, spec.mel_bins), |(k, _)| {
            let u: f64 = rng.random();
            if k == 0 {
                0.0
            } else {
                u
            }
        });
        let lip = Array2::from_shape_fn((spec.vocab_size, spec.visual_dim), |_| StandardNormal.sample(rng));
        Self { mel, lip }
    }

    pub fn for_spec(spec: &SyntheticTaskSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Self::draw(spec, &mut rng)
    }
}

/// Frame index → token index for a fixed number of frames per token.
pub fn token_schedule(text_ids: &[usize], frames_per_token: usize) -> Vec<usize> {
    text_ids
        .iter()
        .flat_map(|&t| std::iter::repeat_n(t, frames_per_token))
        .collect()
}

/// Deterministic corpus: token `k` renders its mel template for
/// `frames_per_token` frames, lip frames sample the same schedule every
/// `lip_stride` mel frames, and alignment features are one-hot token labels.
/// Token 0 is silence (all-zero mel template).
pub fn generate_synthetic_corpus(spec: &SyntheticTaskSpec) -> Result<Vec<UtteranceRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = TokenTemplates::draw(spec, &mut rng);
    let mut out = Vec::with_capacity(spec.n_utterances);
    for u in 0..spec.n_utterances {
        let n_tokens = rng.random_range(spec.min_tokens..=spec.max_tokens);
        let mut text_ids: Vec<usize> = (0..n_tokens).map(|_| rng.random_range(0..spec.vocab_size)).collect();
        if text_ids.iter().all(|&t| t == 0) {
            // Every utterance carries at least one voiced token.
            let pos = rng.random_range(0..n_tokens);
            text_ids[pos] = rng.random_range(1..spec.vocab_size);
        }
        let schedule = token_schedule(&text_ids, spec.frames_per_token);
        let frames = schedule.len();

        let mut mel = Array2::zeros((spec.mel_bins, frames));
        for (i, &tok) in schedule.iter().enumerate() {
            for f in 0..spec.mel_bins {
                let z: f64 = StandardNormal.sample(&mut rng);
                mel[[f, i]] = templates.mel[[tok, f]] + spec.noise_std * z;
            }
        }

        let video_frames = frames.div_ceil(spec.lip_stride);
        let mut lip_raw = Array2::zeros((spec.visual_dim, video_frames));
        for j in 0..video_frames {
            let tok = schedule[j * spec.lip_stride];
            for c in 0..spec.visual_dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                lip_raw[[c, j]] = templates.lip[[tok, c]] + spec.noise_std * z;
            }
        }

        let mut align_feat = Array2::zeros((spec.align_dim, frames));
        for (i, &tok) in schedule.iter().enumerate() {
            align_feat[[tok, i]] = 1.0;
        }

        let max_ref_tokens = (n_tokens * 3) / 10;
        let ref_tokens = rng.random_range(0..=max_ref_tokens);
        out.push(UtteranceRecord {
            mel,
            lip_raw,
            text_ids,
            align_feat,
            ref_len: ref_tokens * spec.frames_per_token,
            utt_id: format!("utt{u:04}"),
            sample_rate_hint: DEFAULT_SAMPLE_RATE_HINT,
        });
    }
    Ok(out)
}
