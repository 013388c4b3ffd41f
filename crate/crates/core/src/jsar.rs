//! Alignment regularizers: frame-level InfoNCE against alignment features and
//! CTC on the final hidden states.

use cosync_autograd::{Graph, Mat, ParamStore, Var};

use crate::error::{Error, Result};
use crate::nn::{Conv1d, Initializer, Linear};

/// Rows with a smaller L2 norm are rejected before normalization.
pub const MIN_FRAME_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub proj_dim: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            proj_dim: 32,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::invalid("tau", format!("{} must be positive", self.tau)));
        }
        if self.proj_dim == 0 {
            return Err(Error::invalid("proj_dim", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcHeadConfig {
    pub vocab_size: usize,
    pub blank_id: usize,
}

impl Default for CtcHeadConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2547,
            blank_id: 0,
        }
    }
}

impl CtcHeadConfig {
    /// Output frames for `frames` input frames after two stride-2 stages.
    pub const DOWNSAMPLE: usize = 4;

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid("ctc_vocab_size", "must be at least 2"));
        }
        if self.blank_id >= self.vocab_size {
            return Err(Error::invalid(
                "blank_id",
                format!("{} outside vocabulary {}", self.blank_id, self.vocab_size),
            ));
        }
        Ok(())
    }
}

/// CTC labels for text tokens: id `k` becomes `k + 1`, leaving 0 for blank.
pub fn ctc_labels(text_ids: &[usize]) -> Vec<usize> {
    text_ids.iter().map(|&t| t + 1).collect()
}

fn first_zero_row(g: &Graph<'_>, v: Var) -> Option<usize> {
    g.value(v)
        .rows()
        .into_iter()
        .position(|r| r.dot(&r).sqrt() < MIN_FRAME_NORM)
}

/// Frame-level InfoNCE over one utterance. Rows of `z` and `f` are frames;
/// negatives for frame `i` are the other frames of `f`.
pub fn info_nce(g: &mut Graph<'_>, z: Var, f: Var, tau: f64) -> Result<Var> {
    let (n, _) = g.shape(z);
    if n == 0 {
        return Err(Error::shape("info_nce", "no frames"));
    }
    if g.shape(f).0 != n {
        return Err(Error::shape(
            "info_nce",
            format!("{n} frames vs {} alignment frames", g.shape(f).0),
        ));
    }
    if g.shape(f).1 != g.shape(z).1 {
        return Err(Error::shape(
            "info_nce",
            format!("widths {} and {} differ", g.shape(z).1, g.shape(f).1),
        ));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid("tau", format!("{tau} must be positive")));
    }
    for v in [z, f] {
        if let Some(frame) = first_zero_row(g, v) {
            return Err(Error::ZeroNormFrame { frame });
        }
    }
    let zn = g.l2_normalize_rows(z);
    let fnorm = g.l2_normalize_rows(f);
    let sim = g.matmul_nt(zn, fnorm);
    let sim = g.scale(sim, 1.0 / tau);
    let logp = g.log_softmax_rows(sim);
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let matched = g.pick(logp, &diag);
    let mean = g.mean(matched);
    Ok(g.scale(mean, -1.0))
}

/// Value-only [`info_nce`] on raw features.
pub fn info_nce_value(z: &Mat, f: &Mat, tau: f64) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (z, f) = (g.constant(z.clone()), g.constant(f.clone()));
    let l = info_nce(&mut g, z, f, tau)?;
    Ok(g.scalar(l))
}

/// Separate linear maps of both streams into a shared space, then InfoNCE.
#[derive(Clone, Debug)]
pub struct ContrastiveHead {
    pub cfg: ContrastiveConfig,
    pub z_proj: Linear,
    pub f_proj: Linear,
}

impl ContrastiveHead {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        cfg: &ContrastiveConfig,
        model_dim: usize,
        align_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            z_proj: Linear::standard(store, init, "jsar.z_proj", model_dim, cfg.proj_dim),
            f_proj: Linear::standard(store, init, "jsar.f_proj", align_dim, cfg.proj_dim),
        })
    }

    /// `z_ca`: `[N × d]`, `f_av`: `[N × D_a]`.
    pub fn loss(&self, g: &mut Graph<'_>, z_ca: Var, f_av: Var) -> Result<Var> {
        let z = self.z_proj.forward(g, z_ca);
        let f = self.f_proj.forward(g, f_av);
        info_nce(g, z, f, self.cfg.tau)
    }
}

/// Two stride-2 convolution stages with Mish, then a linear map to the CTC
/// vocabulary.
#[derive(Clone, Debug)]
pub struct CtcHead {
    pub cfg: CtcHeadConfig,
    pub down: [Conv1d; 2],
    pub out: Linear,
}

impl CtcHead {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, cfg: &CtcHeadConfig, model_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let conv = |store: &mut ParamStore, init: &mut Initializer, k: usize| {
            Conv1d::new(store, init, &format!("ctc.down{k}"), model_dim, model_dim, 3, 2, 1)
        };
        Ok(Self {
            cfg: cfg.clone(),
            down: [conv(store, init, 0), conv(store, init, 1)],
            out: Linear::standard(store, init, "ctc.out", model_dim, cfg.vocab_size),
        })
    }

    pub fn output_len(frames: usize) -> usize {
        frames.div_ceil(CtcHeadConfig::DOWNSAMPLE)
    }

    /// `[L × d]` → logits `[ceil(L/4) × V]`.
    pub fn logits(&self, g: &mut Graph<'_>, z_out: Var) -> Result<Var> {
        let frames = g.shape(z_out).0;
        if frames < CtcHeadConfig::DOWNSAMPLE {
            return Err(Error::shape(
                "ctc_head",
                format!("need at least 4 frames, got {frames}"),
            ));
        }
        let mut h = z_out;
        for conv in &self.down {
            h = conv.forward(g, h);
            h = g.mish(h);
        }
        Ok(self.out.forward(g, h))
    }

    /// CTC negative log-likelihood of `labels` (already shifted past blank).
    pub fn loss(&self, g: &mut Graph<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
        ctc_loss(g, logits, labels, self.cfg.blank_id)
    }
}

/// CTC negative log-likelihood from unnormalized `[frames × V]` logits.
pub fn ctc_loss(g: &mut Graph<'_>, logits: Var, labels: &[usize], blank: usize) -> Result<Var> {
    let logp = g.log_softmax_rows(logits);
    Ok(g.ctc_loss(logp, labels, blank)?)
}

/// Value-only [`ctc_loss`].
pub fn ctc_loss_value(logits: &Mat, labels: &[usize], blank: usize) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(logits.clone());
    let l = ctc_loss(&mut g, x, labels, blank)?;
    Ok(g.scalar(l))
}

/// `l_fm + w_cl · l_cl + w_ctc · l_ctc`
pub fn jsar_total(l_fm: f64, l_cl: f64, l_ctc: f64, w_cl: f64, w_ctc: f64) -> f64 {
    l_fm + w_cl * l_cl + w_ctc * l_ctc
}
