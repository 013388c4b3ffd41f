//! Semantic-acoustic prior and mel-rate lip sequence.
//!
//! Everything here is frames-by-channels: row `i` is mel frame `i`.

use cosync_autograd::{Graph, Mat, ParamId, ParamStore, Var};
use ndarray::Array2;
use rand::Rng;

use crate::data_io::UtteranceRecord;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal, Conv1d, Init, Initializer, Linear, LN_EPS};

/// Smallest and largest fraction of frames covered by a training mask.
pub const MASK_MIN_FRACTION: f64 = 0.70;
pub const MASK_MAX_FRACTION: f64 = 1.00;

/// Half-open target span `[start, end)` of frames to be generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub start: usize,
    pub end: usize,
}

impl MaskSpec {
    pub fn new(start: usize, end: usize, frames: usize) -> Result<Self> {
        if start >= end || end > frames {
            return Err(Error::MaskOutOfBounds {
                start,
                end,
                len: frames,
            });
        }
        Ok(Self { start, end })
    }

    pub fn full(frames: usize) -> Self {
        Self { start: 0, end: frames }
    }

    /// Everything after the reference prefix.
    pub fn after_reference(ref_len: usize, frames: usize) -> Result<Self> {
        Self::new(ref_len, frames, frames)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }

    pub fn fraction(&self, frames: usize) -> f64 {
        self.len() as f64 / frames as f64
    }

    pub fn check(&self, frames: usize) -> Result<()> {
        Self::new(self.start, self.end, frames).map(|_| ())
    }

    /// `[L × 1]` column, 1 inside the span.
    pub fn indicator(&self, frames: usize) -> Mat {
        Array2::from_shape_fn((frames, 1), |(i, _)| if self.contains(i) { 1.0 } else { 0.0 })
    }
}

/// Span fraction uniform in `[0.70, 1.00]`, start uniform over valid offsets.
pub fn sample_mask<R: Rng + ?Sized>(frames: usize, rng: &mut R) -> Result<MaskSpec> {
    if frames < 2 {
        return Err(Error::invalid(
            "frames",
            format!("need at least 2 frames to mask, got {frames}"),
        ));
    }
    let fraction = rng.random_range(MASK_MIN_FRACTION..=MASK_MAX_FRACTION);
    sample_mask_with_fraction(frames, fraction, rng)
}

/// As [`sample_mask`] with the span fraction fixed.
pub fn sample_mask_with_fraction<R: Rng + ?Sized>(frames: usize, fraction: f64, rng: &mut R) -> Result<MaskSpec> {
    if frames < 2 {
        return Err(Error::invalid(
            "frames",
            format!("need at least 2 frames to mask, got {frames}"),
        ));
    }
    if !(MASK_MIN_FRACTION..=MASK_MAX_FRACTION).contains(&fraction) {
        return Err(Error::invalid("fraction", format!("{fraction} outside [0.7, 1.0]")));
    }
    // Integer bound so that span / frames >= 0.7 holds exactly.
    let min_span = (7 * frames).div_ceil(10);
    let span = ((fraction * frames as f64).round() as usize).clamp(min_span, frames);
    let start = rng.random_range(0..=frames - span);
    Ok(MaskSpec {
        start,
        end: start + span,
    })
}

/// Zeroes the frames inside `mask`; `None` leaves the input unchanged.
pub fn apply_mask(m_raw: &Mat, mask: Option<&MaskSpec>) -> Result<Mat> {
    let mut out = m_raw.clone();
    if let Some(mask) = mask {
        mask.check(m_raw.nrows())?;
        out.slice_mut(ndarray::s![mask.start..mask.end, ..]).fill(0.0);
    }
    Ok(out)
}

/// Mel frame `i` reads visual frame `floor(i · L_v / L)`.
pub fn nearest_indices(video_frames: usize, frames: usize) -> Vec<usize> {
    (0..frames).map(|i| i * video_frames / frames).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningConfig {
    pub mel_bins: usize,
    pub vocab_size: usize,
    /// Token embedding and text-encoder width.
    pub text_dim: usize,
    pub text_blocks: usize,
    pub text_kernel: usize,
    /// Width of the padded text stream.
    pub pad_dim: usize,
    /// Width of the cross-attention text stream.
    pub ca_dim: usize,
    pub visual_dim: usize,
    /// Backbone hidden size; the lip sequence is projected to it.
    pub model_dim: usize,
    pub lip_kernel: usize,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            mel_bins: 100,
            vocab_size: 2546,
            text_dim: 512,
            text_blocks: 4,
            text_kernel: 7,
            pad_dim: 256,
            ca_dim: 256,
            visual_dim: 64,
            model_dim: 1024,
            lip_kernel: 3,
        }
    }
}

impl ConditioningConfig {
    pub fn prior_channels(&self) -> usize {
        2 * self.mel_bins + self.pad_dim + self.ca_dim
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mel_bins", self.mel_bins),
            ("vocab_size", self.vocab_size),
            ("text_dim", self.text_dim),
            ("pad_dim", self.pad_dim),
            ("ca_dim", self.ca_dim),
            ("visual_dim", self.visual_dim),
            ("model_dim", self.model_dim),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if self.text_kernel.is_multiple_of(2) || self.lip_kernel.is_multiple_of(2) {
            return Err(Error::invalid("text_kernel/lip_kernel", "kernels must be odd"));
        }
        Ok(())
    }
}

/// Conditioning streams for one utterance (frames-by-channels).
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    /// Masked acoustic features `[L × F]`.
    pub h_m: Mat,
    /// Padded text stream `[L × C_p]`.
    pub text_pad: Mat,
    /// Cross-attention text stream `[L × C_c]`.
    pub text_ca: Mat,
    /// Lip sequence at model width `[L × d]`.
    pub x_lip: Mat,
    /// Text memory for cross-attention `[T' × C_t]`.
    pub h_text: Mat,
    pub mask: Option<MaskSpec>,
}

impl ConditioningBundle {
    pub fn frames(&self) -> usize {
        self.h_m.nrows()
    }

    /// All streams share the temporal length of `h_m`.
    pub fn check_lengths(&self) -> Result<()> {
        let l = self.frames();
        for (name, m) in [
            ("text_pad", &self.text_pad),
            ("text_ca", &self.text_ca),
            ("x_lip", &self.x_lip),
        ] {
            if m.nrows() != l {
                return Err(Error::shape(
                    "conditioning bundle",
                    format!("{name} has {} frames, h_m has {l}", m.nrows()),
                ));
            }
        }
        if self.h_text.nrows() == 0 {
            return Err(Error::shape("conditioning bundle", "empty text memory"));
        }
        Ok(())
    }

    /// Places the bundle on a graph as constants.
    pub fn to_vars(&self, g: &mut Graph<'_>) -> BundleVars {
        BundleVars {
            h_m: g.constant(self.h_m.clone()),
            text_pad: g.constant(self.text_pad.clone()),
            text_ca: g.constant(self.text_ca.clone()),
            x_lip: g.constant(self.x_lip.clone()),
            h_text: g.constant(self.h_text.clone()),
            mask: self.mask,
        }
    }
}

/// A [`ConditioningBundle`] recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BundleVars {
    pub h_m: Var,
    pub text_pad: Var,
    pub text_ca: Var,
    pub x_lip: Var,
    pub h_text: Var,
    pub mask: Option<MaskSpec>,
}

impl BundleVars {
    pub fn frames(&self, g: &Graph<'_>) -> usize {
        g.shape(self.h_m).0
    }

    pub fn to_values(&self, g: &Graph<'_>) -> ConditioningBundle {
        ConditioningBundle {
            h_m: g.value(self.h_m).clone(),
            text_pad: g.value(self.text_pad).clone(),
            text_ca: g.value(self.text_ca).clone(),
            x_lip: g.value(self.x_lip).clone(),
            h_text: g.value(self.h_text).clone(),
            mask: self.mask,
        }
    }

    pub fn check_lengths(&self, g: &Graph<'_>) -> Result<()> {
        let l = self.frames(g);
        for (name, v) in [
            ("text_pad", self.text_pad),
            ("text_ca", self.text_ca),
            ("x_lip", self.x_lip),
        ] {
            if g.shape(v).0 != l {
                return Err(Error::shape(
                    "conditioning bundle",
                    format!("{name} has {} frames, h_m has {l}", g.shape(v).0),
                ));
            }
        }
        if g.shape(self.h_text).0 == 0 {
            return Err(Error::shape("conditioning bundle", "empty text memory"));
        }
        Ok(())
    }
}

/// Raw per-utterance inputs in frames-by-channels layout.
#[derive(Clone, Debug)]
pub struct CondInputs {
    /// `[L × F]`
    pub mel: Mat,
    /// `[L_v × D_v]`
    pub lip_raw: Mat,
    pub text_ids: Vec<usize>,
}

impl CondInputs {
    pub fn from_record(rec: &UtteranceRecord) -> Self {
        Self {
            mel: rec.mel.t().as_standard_layout().into_owned(),
            lip_raw: rec.lip_raw.t().as_standard_layout().into_owned(),
            text_ids: rec.text_ids.clone(),
        }
    }

    pub fn frames(&self) -> usize {
        self.mel.nrows()
    }
}

/// Depthwise conv → norm → pointwise expansion → GELU → projection, residual.
#[derive(Clone, Debug)]
pub struct ConvNextBlock {
    pub dw: Conv1d,
    pub pw1: Linear,
    pub pw2: Linear,
}

impl ConvNextBlock {
    fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, dim: usize, kernel: usize) -> Self {
        Self {
            dw: Conv1d::new(store, init, &format!("{name}.dw"), dim, dim, kernel, 1, dim),
            pw1: Linear::standard(store, init, &format!("{name}.pw1"), dim, 2 * dim),
            pw2: Linear::standard(store, init, &format!("{name}.pw2"), 2 * dim, dim),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.dw.forward(g, x);
        let h = g.layer_norm_rows(h, LN_EPS);
        let h = self.pw1.forward(g, h);
        let h = g.gelu(h);
        let h = self.pw2.forward(g, h);
        g.add(x, h)
    }
}

/// Token embedding followed by convolutional residual blocks; produces `H_text`.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub blocks: Vec<ConvNextBlock>,
    pub vocab_size: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, cfg: &ConditioningConfig) -> Self {
        let embedding = store.add(
            "text.embedding",
            init.matrix(cfg.vocab_size, cfg.text_dim, Init::Normal(1.0)),
        );
        let blocks = (0..cfg.text_blocks)
            .map(|i| ConvNextBlock::new(store, init, &format!("text.block{i}"), cfg.text_dim, cfg.text_kernel))
            .collect();
        Self {
            embedding,
            blocks,
            vocab_size: cfg.vocab_size,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::shape("text encoder", "empty token sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::invalid(
                "text_ids",
                format!("token {bad} outside vocabulary {}", self.vocab_size),
            ));
        }
        let table = g.param(self.embedding);
        let mut h = g.gather_rows(table, ids);
        for block in &self.blocks {
            h = block.forward(g, h);
        }
        Ok(h)
    }
}

/// First `T` rows are the text embedding, the remaining `L − T` rows repeat
/// the learned pad row.
pub fn expand_text_pad(g: &mut Graph<'_>, text_emb: Var, frames: usize, pad: Var) -> Result<Var> {
    let (tokens, width) = g.shape(text_emb);
    if g.shape(pad) != (1, width) {
        return Err(Error::shape(
            "expand_text_pad",
            format!("pad row {:?} for width {width}", g.shape(pad)),
        ));
    }
    if tokens > frames {
        return Err(Error::shape(
            "expand_text_pad",
            format!("{tokens} tokens exceed {frames} frames"),
        ));
    }
    if tokens == frames {
        return Ok(text_emb);
    }
    let filler = g.gather_rows(pad, &vec![0; frames - tokens]);
    Ok(g.concat_rows(&[text_emb, filler]))
}

/// Frame-rate text stream from attention over the text memory. Queries are
/// learned projections of per-frame sinusoidal encodings; keys combine the
/// text memory with the encoding of each token's nominal frame position.
#[derive(Clone, Debug)]
pub struct TextCrossExpansion {
    pub query: Linear,
    pub key: Linear,
    pub key_pos: Linear,
    pub value: Linear,
    pub dim: usize,
}

/// Expanded stream and its `[L × T]` attention weights.
pub struct CrossExpansion {
    pub out: Var,
    pub weights: Var,
}

impl TextCrossExpansion {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, text_dim: usize, dim: usize) -> Self {
        Self {
            query: Linear::new(store, init, "text_ca.query", dim, dim, Init::FanIn(dim), false),
            key: Linear::new(store, init, "text_ca.key", text_dim, dim, Init::FanIn(text_dim), false),
            key_pos: Linear::new(store, init, "text_ca.key_pos", dim, dim, Init::FanIn(dim), false),
            value: Linear::standard(store, init, "text_ca.value", text_dim, dim),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, h_text: Var, frames: usize) -> Result<CrossExpansion> {
        let tokens = g.shape(h_text).0;
        if tokens == 0 || frames == 0 {
            return Err(Error::shape("expand_text_ca", "empty text or frame axis"));
        }
        let mut frame_pe = Array2::zeros((frames, self.dim));
        for i in 0..frames {
            frame_pe.row_mut(i).assign(&sinusoidal(i as f64, self.dim).row(0));
        }
        let step = frames as f64 / tokens as f64;
        let mut token_pe = Array2::zeros((tokens, self.dim));
        for j in 0..tokens {
            token_pe
                .row_mut(j)
                .assign(&sinusoidal((j as f64 + 0.5) * step, self.dim).row(0));
        }
        let frame_pe = g.constant(frame_pe);
        let token_pe = g.constant(token_pe);
        let q = self.query.forward(g, frame_pe);
        let k_text = self.key.forward(g, h_text);
        let k_pos = self.key_pos.forward(g, token_pe);
        let k = g.add(k_text, k_pos);
        let v = self.value.forward(g, h_text);
        let logits = g.matmul_nt(q, k);
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let weights = g.softmax_rows(logits);
        let out = g.matmul(weights, v);
        Ok(CrossExpansion { out, weights })
    }
}

/// Nearest-neighbour upsampling to mel rate, two residual convolutions, then
/// projection to model width.
#[derive(Clone, Debug)]
pub struct LipUpsampler {
    pub convs: Vec<Conv1d>,
    pub proj: Linear,
    pub visual_dim: usize,
}

impl LipUpsampler {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, cfg: &ConditioningConfig) -> Self {
        let convs = (0..2)
            .map(|i| {
                Conv1d::new(
                    store,
                    init,
                    &format!("lip.conv{i}"),
                    cfg.visual_dim,
                    cfg.visual_dim,
                    cfg.lip_kernel,
                    1,
                    1,
                )
            })
            .collect();
        Self {
            convs,
            proj: Linear::standard(store, init, "lip.proj", cfg.visual_dim, cfg.model_dim),
            visual_dim: cfg.visual_dim,
        }
    }

    /// `lip_raw`: `[L_v × D_v]` → `[L × d]`. Frames outside `mask` are zero.
    pub fn forward(&self, g: &mut Graph<'_>, lip_raw: Var, frames: usize, mask: Option<&MaskSpec>) -> Result<Var> {
        let (video_frames, dim) = g.shape(lip_raw);
        if video_frames == 0 || video_frames > frames {
            return Err(Error::shape(
                "upsample_lip",
                format!("{video_frames} video frames for {frames} mel frames"),
            ));
        }
        if dim != self.visual_dim {
            return Err(Error::shape(
                "upsample_lip",
                format!("visual dim {dim}, expected {}", self.visual_dim),
            ));
        }
        let mut h = g.gather_rows(lip_raw, &nearest_indices(video_frames, frames));
        for conv in &self.convs {
            let c = conv.forward(g, h);
            let c = g.mish(c);
            h = g.add(h, c);
        }
        let x = self.proj.forward(g, h);
        Ok(match mask {
            Some(m) => {
                m.check(frames)?;
                let ind = g.constant(m.indicator(frames));
                g.mul_col(x, ind)
            }
            None => x,
        })
    }
}

/// Channel concatenation in the order `[x_t; h_m; text_pad; text_ca]`.
pub fn assemble_prior(g: &mut Graph<'_>, x_t: Var, h_m: Var, text_pad: Var, text_ca: Var) -> Result<Var> {
    let l = g.shape(x_t).0;
    for (name, v) in [("h_m", h_m), ("text_pad", text_pad), ("text_ca", text_ca)] {
        if g.shape(v).0 != l {
            return Err(Error::shape(
                "assemble_prior",
                format!("{name} has {} frames, x_t has {l}", g.shape(v).0),
            ));
        }
    }
    Ok(g.concat_cols(&[x_t, h_m, text_pad, text_ca]))
}

/// All trainable conditioning networks.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub cfg: ConditioningConfig,
    pub text: TextEncoder,
    pub pad_proj: Linear,
    pub pad_row: ParamId,
    pub cross: TextCrossExpansion,
    pub lip: LipUpsampler,
}

impl Conditioner {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, cfg: &ConditioningConfig) -> Result<Self> {
        cfg.validate()?;
        let text = TextEncoder::new(store, init, cfg);
        let pad_proj = Linear::standard(store, init, "text_pad.proj", cfg.text_dim, cfg.pad_dim);
        let pad_row = store.add("text_pad.pad", Array2::zeros((1, cfg.pad_dim)));
        let cross = TextCrossExpansion::new(store, init, cfg.text_dim, cfg.ca_dim);
        let lip = LipUpsampler::new(store, init, cfg);
        Ok(Self {
            cfg: cfg.clone(),
            text,
            pad_proj,
            pad_row,
            cross,
            lip,
        })
    }

    /// Builds every conditioning stream for one utterance.
    pub fn build(&self, g: &mut Graph<'_>, inputs: &CondInputs, mask: Option<MaskSpec>) -> Result<BundleVars> {
        let frames = inputs.frames();
        if inputs.mel.ncols() != self.cfg.mel_bins {
            return Err(Error::shape(
                "conditioning",
                format!("{} mel bins, expected {}", inputs.mel.ncols(), self.cfg.mel_bins),
            ));
        }
        if inputs.mel.iter().chain(inputs.lip_raw.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conditioning inputs".into()));
        }
        let h_m = g.constant(apply_mask(&inputs.mel, mask.as_ref())?);
        let h_text = self.text.forward(g, &inputs.text_ids)?;
        let pad_emb = self.pad_proj.forward(g, h_text);
        let pad_row = g.param(self.pad_row);
        let text_pad = expand_text_pad(g, pad_emb, frames, pad_row)?;
        let text_ca = self.cross.forward(g, h_text, frames)?.out;
        let lip_raw = g.constant(inputs.lip_raw.clone());
        let x_lip = self.lip.forward(g, lip_raw, frames, mask.as_ref())?;
        Ok(BundleVars {
            h_m,
            text_pad,
            text_ca,
            x_lip,
            h_text,
            mask,
        })
    }

    /// Concrete bundle for inference.
    pub fn bundle(
        &self,
        store: &ParamStore,
        inputs: &CondInputs,
        mask: Option<MaskSpec>,
    ) -> Result<ConditioningBundle> {
        let mut g = Graph::new(store);
        let vars = self.build(&mut g, inputs, mask)?;
        Ok(vars.to_values(&g))
    }
}
