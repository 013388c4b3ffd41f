//! Full model: conditioning networks, backbone and regularizer heads.

use cosync_autograd::{Graph, Mat, ParamStore, Var};

use crate::backbone::{Backbone, BackboneConfig, BackboneOutput};
use crate::conditioning::{BundleVars, CondInputs, Conditioner, ConditioningBundle, ConditioningConfig, MaskSpec};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::flow::{apply_branch, ConditionBranch, VectorField};
use crate::jsar::{ContrastiveConfig, ContrastiveHead, CtcHead, CtcHeadConfig};
use crate::nn::Initializer;

/// Flat, file-friendly description of every architectural constant.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mel_bins: usize,
    pub vocab_size: usize,
    pub text_dim: usize,
    pub text_blocks: usize,
    pub text_kernel: usize,
    pub pad_dim: usize,
    pub ca_dim: usize,
    pub visual_dim: usize,
    pub align_dim: usize,
    pub lip_kernel: usize,
    pub d: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub p1_end: usize,
    pub p2_end: usize,
    pub conv_pos_kernel: usize,
    pub conv_pos_groups: usize,
    pub time_freq_dim: usize,
    pub time_dim: usize,
    pub ff_mult: usize,
    pub tau: f64,
    pub proj_dim: usize,
    pub ctc_vocab_size: usize,
    pub blank_id: usize,
}

impl Default for ModelConfig {
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
            align_dim: 32,
            lip_kernel: 3,
            d: 1024,
            n_heads: 16,
            n_layers: 22,
            p1_end: 8,
            p2_end: 15,
            conv_pos_kernel: 31,
            conv_pos_groups: 16,
            time_freq_dim: 256,
            time_dim: 256,
            ff_mult: 2,
            tau: 0.07,
            proj_dim: 32,
            ctc_vocab_size: 2547,
            blank_id: 0,
        }
    }
}

macro_rules! kv_fields {
    ($($f:ident),* $(,)?) => {
        impl ModelConfig {
            /// Overrides fields from `kv`, consuming the keys it recognizes.
            pub fn apply_kv(&mut self, kv: &mut KvMap) -> Result<()> {
                $(kv.take(stringify!($f), &mut self.$f)?;)*
                Ok(())
            }

            pub fn to_kv(&self) -> KvMap {
                let mut kv = KvMap::default();
                $(kv.insert(stringify!($f), self.$f);)*
                kv
            }
        }
    };
}

kv_fields!(
    mel_bins,
    vocab_size,
    text_dim,
    text_blocks,
    text_kernel,
    pad_dim,
    ca_dim,
    visual_dim,
    align_dim,
    lip_kernel,
    d,
    n_heads,
    n_layers,
    p1_end,
    p2_end,
    conv_pos_kernel,
    conv_pos_groups,
    time_freq_dim,
    time_dim,
    ff_mult,
    tau,
    proj_dim,
    ctc_vocab_size,
    blank_id,
);

impl ModelConfig {
    /// Sub-million-parameter configuration for the synthetic corpus.
    pub fn toy() -> Self {
        Self {
            vocab_size: 8,
            text_dim: 64,
            text_blocks: 2,
            pad_dim: 32,
            ca_dim: 32,
            // Wider than the 100 mel bins so the noise in x_t can pass through.
            d: 112,
            n_heads: 4,
            n_layers: 6,
            p1_end: 2,
            p2_end: 4,
            time_freq_dim: 32,
            time_dim: 32,
            ff_mult: 1,
            ctc_vocab_size: 9,
            ..Self::default()
        }
    }

    /// Smallest configuration exercising every phase, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            mel_bins: 6,
            vocab_size: 4,
            text_dim: 8,
            text_blocks: 1,
            text_kernel: 3,
            pad_dim: 4,
            ca_dim: 4,
            visual_dim: 5,
            align_dim: 4,
            lip_kernel: 3,
            d: 16,
            n_heads: 2,
            n_layers: 3,
            p1_end: 1,
            p2_end: 2,
            conv_pos_kernel: 5,
            conv_pos_groups: 4,
            time_freq_dim: 8,
            time_dim: 8,
            ff_mult: 2,
            tau: 0.5,
            proj_dim: 4,
            ctc_vocab_size: 5,
            blank_id: 0,
        }
    }

    pub fn from_kv(mut kv: KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn conditioning(&self) -> ConditioningConfig {
        ConditioningConfig {
            mel_bins: self.mel_bins,
            vocab_size: self.vocab_size,
            text_dim: self.text_dim,
            text_blocks: self.text_blocks,
            text_kernel: self.text_kernel,
            pad_dim: self.pad_dim,
            ca_dim: self.ca_dim,
            visual_dim: self.visual_dim,
            model_dim: self.d,
            lip_kernel: self.lip_kernel,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            n_layers: self.n_layers,
            d: self.d,
            n_heads: self.n_heads,
            phase_bounds: (self.p1_end, self.p2_end),
            in_channels: self.conditioning().prior_channels(),
            out_channels: self.mel_bins,
            conv_pos_kernel: self.conv_pos_kernel,
            conv_pos_groups: self.conv_pos_groups,
            text_dim: self.text_dim,
            time_freq_dim: self.time_freq_dim,
            time_dim: self.time_dim,
            ff_mult: self.ff_mult,
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.tau,
            proj_dim: self.proj_dim,
        }
    }

    pub fn ctc(&self) -> CtcHeadConfig {
        CtcHeadConfig {
            vocab_size: self.ctc_vocab_size,
            blank_id: self.blank_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.conditioning().validate()?;
        self.backbone().validate()?;
        self.contrastive().validate()?;
        self.ctc().validate()?;
        if self.align_dim == 0 {
            return Err(Error::invalid("align_dim", "must be positive"));
        }
        if self.ctc_vocab_size < self.vocab_size + 1 {
            return Err(Error::invalid(
                "ctc_vocab_size",
                format!("needs room for {} tokens plus blank", self.vocab_size),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub conditioner: Conditioner,
    pub backbone: Backbone,
    pub contrastive: ContrastiveHead,
    pub ctc: CtcHead,
}

impl Model {
    /// Builds the model and a freshly initialized parameter store.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let conditioner = Conditioner::new(&mut store, &mut init, &cfg.conditioning())?;
        let backbone = Backbone::new(&mut store, &mut init, &cfg.backbone())?;
        let contrastive = ContrastiveHead::new(&mut store, &mut init, &cfg.contrastive(), cfg.d, cfg.align_dim)?;
        let ctc = CtcHead::new(&mut store, &mut init, &cfg.ctc(), cfg.d)?;
        let model = Self {
            cfg: cfg.clone(),
            conditioner,
            backbone,
            contrastive,
            ctc,
        };
        Ok((model, store))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x_t: Var, bundle: &BundleVars, t: f64) -> Result<BackboneOutput> {
        self.backbone.forward(g, x_t, bundle, t)
    }

    /// Conditioning bundle for inference, with the target span after the
    /// reference prefix.
    pub fn inference_bundle(
        &self,
        store: &ParamStore,
        inputs: &CondInputs,
        mask: MaskSpec,
    ) -> Result<ConditioningBundle> {
        self.conditioner.bundle(store, inputs, Some(mask))
    }

    /// Single-branch field evaluation on a concrete bundle.
    pub fn field(&self, store: &ParamStore, x: &Mat, t: f64, bundle: &ConditioningBundle) -> Result<Mat> {
        let mut g = Graph::new(store);
        let vars = bundle.to_vars(&mut g);
        let x = g.constant(x.clone());
        let out = self.forward(&mut g, x, &vars, t)?;
        Ok(g.value(out.v).clone())
    }
}

/// A model bound to one utterance's conditions; each branch sees its own
/// pre-zeroed bundle.
pub struct ModelField<'a> {
    model: &'a Model,
    store: &'a ParamStore,
    bundles: [ConditioningBundle; 3],
}

impl<'a> ModelField<'a> {
    pub fn new(model: &'a Model, store: &'a ParamStore, bundle: &ConditioningBundle) -> Self {
        let bundles = ConditionBranch::ALL.map(|b| apply_branch(bundle, b));
        Self { model, store, bundles }
    }
}

impl VectorField for ModelField<'_> {
    fn eval(&self, x: &Mat, t: f64, branch: ConditionBranch) -> Result<Mat> {
        let idx = ConditionBranch::ALL
            .iter()
            .position(|&b| b == branch)
            .expect("exhaustive");
        self.model.field(self.store, x, t, &self.bundles[idx])
    }
}
