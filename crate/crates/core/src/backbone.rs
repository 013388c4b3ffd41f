//! Three-phase diffusion transformer producing the mel vector field.
//!
//! Layers `[0, p1_end)` run the style block only, `[p1_end, p2_end)` add the
//! gated lip injection and `[p2_end, n_layers)` add text cross-attention.

use cosync_autograd::{Graph, ParamId, ParamStore, Var};
use ndarray::Array2;

use crate::conditioning::{assemble_prior, BundleVars};
use crate::error::{Error, Result};
use crate::nn::{modulated_norm, sinusoidal, Attention, Conv1d, Initializer, Linear};

/// Scale applied to `t` before the sinusoidal time features.
const TIME_FEATURE_SCALE: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d: usize,
    pub n_heads: usize,
    /// `(p1_end, p2_end)`, 0-based exclusive layer bounds of the first two phases.
    pub phase_bounds: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv_pos_kernel: usize,
    pub conv_pos_groups: usize,
    /// Width of the text memory used as keys and values.
    pub text_dim: usize,
    pub time_freq_dim: usize,
    pub time_dim: usize,
    pub ff_mult: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 22,
            d: 1024,
            n_heads: 16,
            phase_bounds: (8, 15),
            in_channels: 712,
            out_channels: 100,
            conv_pos_kernel: 31,
            conv_pos_groups: 16,
            text_dim: 512,
            time_freq_dim: 256,
            time_dim: 256,
            ff_mult: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let (p1, p2) = self.phase_bounds;
        if !(0 < p1 && p1 <= p2 && p2 <= self.n_layers) {
            return Err(Error::invalid(
                "phase_bounds",
                format!(
                    "need 0 < p1_end <= p2_end <= n_layers, got ({p1}, {p2}) with {} layers",
                    self.n_layers
                ),
            ));
        }
        if self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(
                "n_heads",
                format!("d={} not divisible by {} heads", self.d, self.n_heads),
            ));
        }
        if self.conv_pos_groups == 0 || !self.d.is_multiple_of(self.conv_pos_groups) {
            return Err(Error::invalid(
                "conv_pos_groups",
                format!("d={} not divisible by {}", self.d, self.conv_pos_groups),
            ));
        }
        if self.conv_pos_kernel.is_multiple_of(2) {
            return Err(Error::invalid("conv_pos_kernel", "must be odd"));
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("text_dim", self.text_dim),
            ("time_freq_dim", self.time_freq_dim),
            ("time_dim", self.time_dim),
            ("ff_mult", self.ff_mult),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn phase_of(&self, layer: usize) -> Phase {
        let (p1, p2) = self.phase_bounds;
        if layer < p1 {
            Phase::Style
        } else if layer < p2 {
            Phase::Lip
        } else {
            Phase::Context
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Style,
    Lip,
    Context,
}

/// Sinusoidal features of `t` followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub lin1: Linear,
    pub lin2: Linear,
    pub freq_dim: usize,
}

impl TimeEmbedding {
    fn new(store: &mut ParamStore, init: &mut Initializer, freq_dim: usize, dim: usize) -> Self {
        Self {
            lin1: Linear::standard(store, init, "time.lin1", freq_dim, dim),
            lin2: Linear::standard(store, init, "time.lin2", dim, dim),
            freq_dim,
        }
    }

    /// `[1 × time_dim]`
    pub fn forward(&self, g: &mut Graph<'_>, t: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid("t", format!("{t} outside [0, 1]")));
        }
        let feats = g.constant(sinusoidal(TIME_FEATURE_SCALE * t, self.freq_dim));
        let h = self.lin1.forward(g, feats);
        let h = g.silu(h);
        Ok(self.lin2.forward(g, h))
    }
}

/// Zero-initialized map from the time embedding to `chunks` rows of width `d`.
#[derive(Clone, Debug)]
pub struct Modulation {
    pub lin: Linear,
    pub chunks: usize,
    pub d: usize,
}

impl Modulation {
    fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        time_dim: usize,
        d: usize,
        chunks: usize,
    ) -> Self {
        Self {
            lin: Linear::zeroed(store, init, name, time_dim, chunks * d),
            chunks,
            d,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, temb: Var) -> Vec<Var> {
        let h = g.silu(temb);
        let all = self.lin.forward(g, h);
        (0..self.chunks)
            .map(|k| g.slice_cols(all, k * self.d, (k + 1) * self.d))
            .collect()
    }
}

/// Modulated self-attention and feed-forward residuals, each behind a time gate.
#[derive(Clone, Debug)]
pub struct StyleBlock {
    /// shift/scale/gate for attention, then for the MLP.
    pub modulation: Modulation,
    pub attn: Attention,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl StyleBlock {
    fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, cfg: &BackboneConfig) -> Self {
        let d = cfg.d;
        Self {
            modulation: Modulation::new(store, init, &format!("{name}.mod"), cfg.time_dim, d, 6),
            attn: Attention::new(store, init, &format!("{name}.attn"), d, d, cfg.n_heads),
            ff1: Linear::standard(store, init, &format!("{name}.ff1"), d, cfg.ff_mult * d),
            ff2: Linear::standard(store, init, &format!("{name}.ff2"), cfg.ff_mult * d, d),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, z: Var, temb: Var) -> Var {
        let m = self.modulation.forward(g, temb);
        let (shift_a, scale_a, gate_a, shift_f, scale_f, gate_f) = (m[0], m[1], m[2], m[3], m[4], m[5]);
        let n = modulated_norm(g, z, shift_a, scale_a);
        let a = self.attn.forward(g, n, n).out;
        let a = g.mul_row(a, gate_a);
        let z = g.add(z, a);
        let n = modulated_norm(g, z, shift_f, scale_f);
        let h = self.ff1.forward(g, n);
        let h = g.gelu(h);
        let h = self.ff2.forward(g, h);
        let h = g.mul_row(h, gate_f);
        g.add(z, h)
    }
}

/// `z_style + Λ ⊙ x_lip` with `Λ` broadcast over frames.
pub fn lip_inject(g: &mut Graph<'_>, z_style: Var, x_lip: Var, gate: Var) -> Result<Var> {
    let shape = g.shape(z_style);
    if g.shape(x_lip) != shape || g.shape(gate) != (1, shape.1) {
        return Err(Error::shape(
            "lip_inject",
            format!("z {:?}, x_lip {:?}, gate {:?}", shape, g.shape(x_lip), g.shape(gate)),
        ));
    }
    let injected = g.mul_row(x_lip, gate);
    Ok(g.add(z_style, injected))
}

/// Modulated cross-attention over the text memory with a gated residual.
#[derive(Clone, Debug)]
pub struct ContextAlignBlock {
    /// shift, scale, gate.
    pub modulation: Modulation,
    pub attn: Attention,
}

pub struct ContextAlignOutput {
    pub z_out: Var,
    /// Raw attention output before gating.
    pub z_ca: Var,
    pub weights: Vec<Var>,
}

impl ContextAlignBlock {
    fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, cfg: &BackboneConfig) -> Self {
        Self {
            modulation: Modulation::new(store, init, &format!("{name}.mod"), cfg.time_dim, cfg.d, 3),
            attn: Attention::new(store, init, &format!("{name}.attn"), cfg.d, cfg.text_dim, cfg.n_heads),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, z_lip: Var, h_text: Var, temb: Var) -> Result<ContextAlignOutput> {
        if g.shape(h_text).0 == 0 {
            return Err(Error::shape("context_align_block", "empty text memory"));
        }
        let m = self.modulation.forward(g, temb);
        let n = modulated_norm(g, z_lip, m[0], m[1]);
        let out = self.attn.forward(g, n, h_text);
        let gated = g.mul_row(out.out, m[2]);
        Ok(ContextAlignOutput {
            z_out: g.add(z_lip, gated),
            z_ca: out.out,
            weights: out.weights,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub style: StyleBlock,
    pub lip_gate: Option<ParamId>,
    pub context: Option<ContextAlignBlock>,
}

/// Per-layer hidden states.
#[derive(Clone, Debug)]
pub struct LayerTaps {
    pub z_style: Var,
    pub z_lip: Option<Var>,
    pub z_out: Var,
    pub z_ca: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct HiddenStates {
    pub layers: Vec<LayerTaps>,
    /// Cross-attention output of the last context layer.
    pub z_ca: Option<Var>,
    /// Output of the last layer before the final norm.
    pub z_final: Var,
}

pub struct BackboneOutput {
    /// `[L × out_channels]`
    pub v: Var,
    pub taps: HiddenStates,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub time: TimeEmbedding,
    pub proj_in: Linear,
    pub conv_pos: [Conv1d; 2],
    pub layers: Vec<Layer>,
    /// shift, scale for the output norm.
    pub final_modulation: Modulation,
    pub proj_out: Linear,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let time = TimeEmbedding::new(store, init, cfg.time_freq_dim, cfg.time_dim);
        let proj_in = Linear::standard(store, init, "proj_in", cfg.in_channels, d);
        let conv = |store: &mut ParamStore, init: &mut Initializer, k: usize| {
            Conv1d::new(
                store,
                init,
                &format!("conv_pos{k}"),
                d,
                d,
                cfg.conv_pos_kernel,
                1,
                cfg.conv_pos_groups,
            )
        };
        let conv_pos = [conv(store, init, 0), conv(store, init, 1)];
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let name = format!("layer{l}");
                let phase = cfg.phase_of(l);
                let style = StyleBlock::new(store, init, &format!("{name}.style"), cfg);
                let lip_gate =
                    (phase != Phase::Style).then(|| store.add(format!("{name}.lip_gate"), Array2::zeros((1, d))));
                let context = (phase == Phase::Context)
                    .then(|| ContextAlignBlock::new(store, init, &format!("{name}.context"), cfg));
                Layer {
                    style,
                    lip_gate,
                    context,
                }
            })
            .collect();
        let final_modulation = Modulation::new(store, init, "final.mod", cfg.time_dim, d, 2);
        let proj_out = Linear::zeroed(store, init, "proj_out", d, cfg.out_channels);
        Ok(Self {
            cfg: cfg.clone(),
            time,
            proj_in,
            conv_pos,
            layers,
            final_modulation,
            proj_out,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x_t: Var, bundle: &BundleVars, t: f64) -> Result<BackboneOutput> {
        bundle.check_lengths(g)?;
        let (frames, bins) = g.shape(x_t);
        if bins != self.cfg.out_channels {
            return Err(Error::shape(
                "backbone",
                format!("x_t has {bins} bins, expected {}", self.cfg.out_channels),
            ));
        }
        if g.shape(bundle.x_lip).1 != self.cfg.d {
            return Err(Error::shape(
                "backbone",
                format!("x_lip width {} != d {}", g.shape(bundle.x_lip).1, self.cfg.d),
            ));
        }
        if g.shape(bundle.h_text).1 != self.cfg.text_dim {
            return Err(Error::shape(
                "backbone",
                format!("h_text width {} != {}", g.shape(bundle.h_text).1, self.cfg.text_dim),
            ));
        }
        let prior = assemble_prior(g, x_t, bundle.h_m, bundle.text_pad, bundle.text_ca)?;
        if g.shape(prior).1 != self.cfg.in_channels {
            return Err(Error::shape(
                "backbone",
                format!(
                    "prior has {} channels, expected {}",
                    g.shape(prior).1,
                    self.cfg.in_channels
                ),
            ));
        }
        let temb = self.time.forward(g, t)?;

        let mut z = self.proj_in.forward(g, prior);
        let mut pos = z;
        for conv in &self.conv_pos {
            pos = conv.forward(g, pos);
            pos = g.mish(pos);
        }
        z = g.add(z, pos);

        let mut taps = Vec::with_capacity(self.layers.len());
        let mut last_ca = None;
        for layer in &self.layers {
            let z_style = layer.style.forward(g, z, temb);
            let mut tap = LayerTaps {
                z_style,
                z_lip: None,
                z_out: z_style,
                z_ca: None,
            };
            if let Some(gate) = layer.lip_gate {
                let gate = g.param(gate);
                let z_lip = lip_inject(g, z_style, bundle.x_lip, gate)?;
                tap.z_lip = Some(z_lip);
                tap.z_out = z_lip;
            }
            if let Some(ctx) = &layer.context {
                let out = ctx.forward(g, tap.z_out, bundle.h_text, temb)?;
                tap.z_ca = Some(out.z_ca);
                tap.z_out = out.z_out;
                last_ca = Some(out.z_ca);
            }
            z = tap.z_out;
            taps.push(tap);
        }
        debug_assert_eq!(g.shape(z).0, frames);

        let m = self.final_modulation.forward(g, temb);
        let n = modulated_norm(g, z, m[0], m[1]);
        let v = self.proj_out.forward(g, n);
        Ok(BackboneOutput {
            v,
            taps: HiddenStates {
                layers: taps,
                z_ca: last_ca,
                z_final: z,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            n_layers: 3,
            d: 8,
            n_heads: 2,
            phase_bounds: (1, 2),
            in_channels: 4 + 4 + 3 + 3,
            out_channels: 4,
            conv_pos_kernel: 5,
            conv_pos_groups: 2,
            text_dim: 6,
            time_freq_dim: 8,
            time_dim: 8,
            ff_mult: 2,
        }
    }

    #[test]
    fn rejects_bad_bounds() {
        let mut cfg = tiny();
        cfg.phase_bounds = (0, 2);
        assert!(cfg.validate().is_err());
        cfg.phase_bounds = (2, 1);
        assert!(cfg.validate().is_err());
        cfg.phase_bounds = (1, 4);
        assert!(cfg.validate().is_err());
        cfg = tiny();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn phases_follow_bounds() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.phase_of(7), Phase::Style);
        assert_eq!(cfg.phase_of(8), Phase::Lip);
        assert_eq!(cfg.phase_of(14), Phase::Lip);
        assert_eq!(cfg.phase_of(15), Phase::Context);
        assert_eq!(cfg.phase_of(21), Phase::Context);
    }

    #[test]
    fn time_embedding_contract() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0);
        let te = TimeEmbedding::new(&mut store, &mut init, 16, 8);
        let mut g = Graph::new(&store);
        let a = te.forward(&mut g, 0.3).unwrap();
        let b = te.forward(&mut g, 0.3).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let e0 = te.forward(&mut g, 0.0).unwrap();
        let e1 = te.forward(&mut g, 1.0).unwrap();
        let (u, v) = (g.value(e0).row(0).to_owned(), g.value(e1).row(0).to_owned());
        let cos = u.dot(&v) / (u.dot(&u).sqrt() * v.dot(&v).sqrt());
        assert!(cos < 1.0 - 1e-9, "cos = {cos}");
        assert!(te.forward(&mut g, 1.5).is_err());
        assert!(te.forward(&mut g, -0.1).is_err());
    }

    #[test]
    fn lip_inject_examples() {
        let store = ParamStore::new();
        let mut init = Initializer::new(1);
        let mut g = Graph::new(&store);
        let z = g.constant(init.matrix(5, 4, Init::Normal(1.0)));
        let x = g.constant(init.matrix(5, 4, Init::Normal(1.0)));
        let zero_gate = g.zeros(1, 4);
        let out = lip_inject(&mut g, z, x, zero_gate).unwrap();
        assert_eq!(g.value(out), g.value(z));
        let unit = g.constant(Array2::ones((1, 4)));
        let out = lip_inject(&mut g, z, x, unit).unwrap();
        assert_eq!(g.value(out), &(g.value(z) + g.value(x)));
        let zero_x = g.zeros(5, 4);
        let gate = g.constant(init.matrix(1, 4, Init::Normal(1.0)));
        let out = lip_inject(&mut g, z, zero_x, gate).unwrap();
        assert_eq!(g.value(out), g.value(z));
        let short = g.zeros(4, 4);
        assert!(lip_inject(&mut g, z, short, gate).is_err());
    }
}
