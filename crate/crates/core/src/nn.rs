//! Parameterized layers shared by the conditioning stack, backbone and heads.

use cosync_autograd::{Graph, Mat, ParamId, ParamStore, Var};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

pub const LN_EPS: f64 = 1e-6;

/// Weight initialization policy for a new parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform on `±sqrt(3 / fan_in)`, i.e. variance `1/fan_in`.
    FanIn(usize),
    Normal(f64),
}

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, init: Init) -> Mat {
        match init {
            Init::Zeros => Array2::zeros((rows, cols)),
            // Uniform draws are several times cheaper than normal ones, which
            // matters for the 250M-parameter default model.
            Init::FanIn(fan_in) => {
                let bound = (3.0 / fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut self.rng))
            }
            Init::Normal(std) => Array2::from_shape_fn((rows, cols), |_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                std * z
            }),
        }
    }
}

/// Affine map over the channel axis: `[L × in] → [L × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.matrix(in_dim, out_dim, weight_init));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, out_dim))));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Fan-in scaled weights, zero bias.
    pub fn standard(store: &mut ParamStore, init: &mut Initializer, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::new(store, init, name, in_dim, out_dim, Init::FanIn(in_dim), true)
    }

    /// All-zero weights and bias.
    pub fn zeroed(store: &mut ParamStore, init: &mut Initializer, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::new(store, init, name, in_dim, out_dim, Init::Zeros, true)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Grouped 1-D convolution with bias, length-preserving for odd kernels at
/// stride 1.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        assert!(
            in_ch.is_multiple_of(groups) && out_ch.is_multiple_of(groups),
            "{name}: channels not divisible by groups"
        );
        let fan_in = in_ch / groups * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init.matrix(out_ch, fan_in, Init::FanIn(fan_in)),
        );
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, out_ch)));
        Self {
            weight,
            bias,
            kernel,
            stride,
            padding: kernel / 2,
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.conv1d(x, w, self.kernel, self.stride, self.padding, self.groups);
        let b = g.param(self.bias);
        g.add_row(y, b)
    }
}

/// Multi-head scaled dot-product attention without masking.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Attention output plus the per-head weight matrices (`[L_q × L_kv]`).
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
    ) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "{name}: dim {dim} not divisible by {heads} heads"
        );
        Self {
            q: Linear::standard(store, init, &format!("{name}.q"), dim, dim),
            k: Linear::standard(store, init, &format!("{name}.k"), kv_dim, dim),
            v: Linear::standard(store, init, &format!("{name}.v"), kv_dim, dim),
            o: Linear::standard(store, init, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, memory: Var) -> AttentionOutput {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let dim = self.q.out_dim;
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, lo, hi),
                    g.slice_cols(k, lo, hi),
                    g.slice_cols(v, lo, hi),
                )
            };
            let logits = g.matmul_nt(qh, kh);
            let logits = g.scale(logits, scale);
            let w = g.softmax_rows(logits);
            outs.push(g.matmul(w, vh));
            weights.push(w);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        AttentionOutput {
            out: self.o.forward(g, merged),
            weights,
        }
    }
}

/// `LN(x) ⊙ (1 + scale) + shift` with `1 × d` modulation rows.
pub fn modulated_norm(g: &mut Graph<'_>, x: Var, shift: Var, scale: Var) -> Var {
    let n = g.layer_norm_rows(x, LN_EPS);
    let s1 = g.add_scalar(scale, 1.0);
    let n = g.mul_row(n, s1);
    g.add_row(n, shift)
}

/// Sinusoidal features of a scalar position, `[1 × dim]`: first half sines,
/// second half cosines over geometrically spaced frequencies.
pub fn sinusoidal(position: f64, dim: usize) -> Mat {
    let half = dim / 2;
    let mut out = Array2::zeros((1, dim));
    let denom = (half.max(2) - 1) as f64;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / denom).exp();
        out[[0, i]] = (position * freq).sin();
        out[[0, half + i]] = (position * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let a = Initializer::new(3).matrix(4, 5, Init::FanIn(4));
        let b = Initializer::new(3).matrix(4, 5, Init::FanIn(4));
        assert_eq!(a, b);
        assert_eq!(
            Initializer::new(3).matrix(2, 2, Init::Zeros),
            Array2::<f64>::zeros((2, 2))
        );
    }

    #[test]
    fn fan_in_init_has_unit_fan_in_variance() {
        let w = Initializer::new(1).matrix(400, 250, Init::FanIn(16));
        assert!(w.iter().all(|v| v.abs() <= (3.0f64 / 16.0).sqrt()));
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var * 16.0 - 1.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn single_key_attention_returns_value_projection() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0);
        let attn = Attention::new(&mut store, &mut init, "a", 4, 3, 2);
        let x = init.matrix(5, 4, Init::Normal(1.0));
        let mem = init.matrix(1, 3, Init::Normal(1.0));
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let mv = g.constant(mem);
        let out = attn.forward(&mut g, xv, mv);
        let v = attn.v.forward(&mut g, mv);
        let expected = attn.o.forward(&mut g, v);
        for row in g.value(out.out).rows() {
            for (a, b) in row.iter().zip(g.value(expected).row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for w in out.weights {
            assert!(g.value(w).iter().all(|&p| (p - 1.0).abs() < 1e-15));
        }
    }

    #[test]
    fn sinusoid_distinguishes_positions() {
        assert_ne!(sinusoidal(0.0, 8), sinusoidal(1.0, 8));
        assert_eq!(sinusoidal(0.0, 8)[[0, 4]], 1.0);
    }
}
