//! Embedded invariant suite: cheap, self-contained checks of the properties
//! the rest of the crate relies on. Each check reports pass or fail with a
//! short detail line.

use cosync_autograd::gradcheck::{check_params, GradCheckReport};
use cosync_autograd::{Graph, Mat, ParamStore, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{apply_mask, sample_mask, ConditioningBundle, MaskSpec};
use crate::data_io::{generate_synthetic_corpus, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::flow::{
    cfg_field, cfm_loss, euler_from, make_flow_batch, standard_normal, ConditionBranch, FlowBatch, GuidanceSpec,
};
use crate::jsar::{ctc_loss_value, info_nce_value};
use crate::model::{Model, ModelConfig, ModelField};
use crate::nn::{Init, Initializer};
use crate::trainer::TrainExample;

/// Finite-difference step for gradient checks.
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Relative-error tolerance for gradient checks.
pub const GRAD_CHECK_TOL: f64 = 1e-4;
/// Denominator floor for the relative error. Central differences at the
/// step above carry about 1e-9 of absolute roundoff on an objective of order
/// 10, so gradients smaller than this floor are judged by absolute error
/// (below `GRAD_CHECK_TOL * GRAD_CHECK_FLOOR`) instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Test hook: sets one lip gate to a nonzero value after initialization.
    pub corrupt_lip_gate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{status}  {:width$}  {}\n", c.name, c.detail));
        }
        out
    }
}

type Check = fn(&VerifyOptions) -> std::result::Result<String, String>;

const CHECKS: [(&str, Check); 14] = [
    ("identity_at_init", check_identity_at_init),
    ("zero_gate_neutrality", check_zero_gate_neutrality),
    ("gradient_tiny_model", check_gradients),
    ("euler_constant_field", check_euler_constant),
    ("euler_linear_field", check_euler_linear),
    ("guidance_reduction", check_guidance_reduction),
    ("guidance_scalar_example", check_guidance_scalar),
    ("guidance_linearity", check_guidance_linearity),
    ("infonce_unit_values", check_info_nce),
    ("ctc_unit_values", check_ctc_units),
    ("ctc_brute_force", check_ctc_brute_force),
    ("mask_span_statistics", check_mask_statistics),
    ("mask_complementarity", check_mask_complementarity),
    ("flow_path_endpoints", check_flow_endpoints),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check; a panicking or erroring check counts as a failure.
pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let checks = CHECKS
        .iter()
        .map(|&(name, check)| {
            let outcome = std::panic::catch_unwind(|| check(opts)).unwrap_or_else(|_| Err("panicked".into()));
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult { name, passed, detail }
        })
        .collect();
    VerifyReport { checks }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err_str(e: Error) -> String {
    e.to_string()
}

/// Random conditioning streams shaped for `cfg`.
pub fn random_bundle<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    frames: usize,
    text_len: usize,
    rng: &mut R,
) -> ConditioningBundle {
    ConditioningBundle {
        h_m: standard_normal(frames, cfg.mel_bins, rng),
        text_pad: standard_normal(frames, cfg.pad_dim, rng),
        text_ca: standard_normal(frames, cfg.ca_dim, rng),
        x_lip: standard_normal(frames, cfg.d, rng),
        h_text: standard_normal(text_len, cfg.text_dim, rng),
        mask: None,
    }
}

/// Sets the first lip gate to a nonzero constant.
pub fn corrupt_first_lip_gate(model: &Model, store: &mut ParamStore) -> Result<()> {
    let gate = model
        .backbone
        .layers
        .iter()
        .find_map(|l| l.lip_gate)
        .ok_or_else(|| Error::invalid("p1_end", "model has no lip-injection layer"))?;
    store.get_mut(gate).fill(0.5);
    Ok(())
}

/// Identity-at-init on one input: returns a description of the first
/// violation, if any.
pub fn identity_violation(
    model: &Model,
    store: &ParamStore,
    x_t: &Mat,
    bundle: &ConditioningBundle,
    t: f64,
) -> Result<Option<String>> {
    for (l, layer) in model.backbone.layers.iter().enumerate() {
        if let Some(gate) = layer.lip_gate {
            if store.get(gate).iter().any(|&v| v != 0.0) {
                return Ok(Some(format!("layer {l} lip gate is nonzero")));
            }
        }
    }
    let mut g = Graph::new(store);
    let vars = bundle.to_vars(&mut g);
    let x = g.constant(x_t.clone());
    let out = model.forward(&mut g, x, &vars, t)?;
    if g.value(out.v).iter().any(|&v| v != 0.0) {
        return Ok(Some("vector field is not exactly zero".into()));
    }
    let mut prev: Option<Var> = None;
    for (l, tap) in out.taps.layers.iter().enumerate() {
        if let Some(p) = prev {
            if g.value(tap.z_style) != g.value(p) {
                return Ok(Some(format!("layer {l} style block is not the identity")));
            }
        }
        if let Some(z_lip) = tap.z_lip {
            if g.value(z_lip) != g.value(tap.z_style) {
                return Ok(Some(format!("layer {l} lip injection changes the hidden state")));
            }
        }
        if g.value(tap.z_out) != g.value(tap.z_lip.unwrap_or(tap.z_style)) {
            return Ok(Some(format!("layer {l} context block is not the identity")));
        }
        prev = Some(tap.z_out);
    }
    Ok(None)
}

fn toy_model(opts: &VerifyOptions, seed: u64) -> Result<(Model, ParamStore)> {
    let (model, mut store) = Model::new(&ModelConfig::toy(), seed)?;
    if opts.corrupt_lip_gate {
        corrupt_first_lip_gate(&model, &mut store)?;
    }
    Ok((model, store))
}

fn check_identity_at_init(opts: &VerifyOptions) -> std::result::Result<String, String> {
    let (model, store) = toy_model(opts, 11).map_err(err_str)?;
    let cfg = &model.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = 5;
    for i in 0..inputs {
        let frames = rng.random_range(8..40);
        let bundle = random_bundle(cfg, frames, rng.random_range(1..8), &mut rng);
        let x = standard_normal(frames, cfg.mel_bins, &mut rng);
        let t = rng.random::<f64>();
        if let Some(v) = identity_violation(&model, &store, &x, &bundle, t).map_err(err_str)? {
            return Err(format!("input {i}: {v}"));
        }
        let field = ModelField::new(&model, &store, &bundle);
        let sample = euler_from(&field, x.clone(), GuidanceSpec::unguided(), 4).map_err(err_str)?;
        ensure(sample.mel == x, || format!("input {i}: sampler moved x0"))?;
    }
    Ok(format!("{inputs} inputs, v == 0 and x0 returned unchanged"))
}

fn check_zero_gate_neutrality(opts: &VerifyOptions) -> std::result::Result<String, String> {
    let (model, store) = toy_model(opts, 12).map_err(err_str)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let bundles = 5;
    for i in 0..bundles {
        let frames = rng.random_range(8..32);
        let bundle = random_bundle(&model.cfg, frames, 4, &mut rng);
        let silent = ConditioningBundle {
            x_lip: Array2::zeros(bundle.x_lip.dim()),
            ..bundle.clone()
        };
        let x = standard_normal(frames, model.cfg.mel_bins, &mut rng);
        let t = rng.random::<f64>();
        let run = |b: &ConditioningBundle| -> Result<(Mat, Mat)> {
            let mut g = Graph::new(&store);
            let vars = b.to_vars(&mut g);
            let xv = g.constant(x.clone());
            let out = model.forward(&mut g, xv, &vars, t)?;
            Ok((g.value(out.v).clone(), g.value(out.taps.z_final).clone()))
        };
        let (a, b) = (run(&bundle).map_err(err_str)?, run(&silent).map_err(err_str)?);
        ensure(a == b, || format!("bundle {i}: lip features change the output at init"))?;
    }
    Ok(format!("{bundles} bundles, output independent of x_lip"))
}

/// A tiny model with every parameter moved off its initial value, plus one
/// fixed training sample, for gradient checks of the full objective.
pub struct GradFixture {
    pub model: Model,
    pub store: ParamStore,
    pub example: TrainExample,
    pub mask: MaskSpec,
    pub flow: FlowBatch,
}

impl GradFixture {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = ModelConfig::tiny();
        let (model, mut store) = Model::new(&cfg, seed)?;
        // Zero-initialized gates would hide most of the network from the check.
        let mut init = Initializer::new(seed ^ 0x5eed);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (r, c) = store.get(id).dim();
            let noise = init.matrix(r, c, Init::Normal(0.3));
            *store.get_mut(id) += &noise;
        }
        let spec = SyntheticTaskSpec {
            vocab_size: cfg.vocab_size,
            n_utterances: 1,
            frames_per_token: 6,
            mel_bins: cfg.mel_bins,
            visual_dim: cfg.visual_dim,
            align_dim: cfg.align_dim,
            seed,
            min_tokens: 2,
            max_tokens: 2,
            lip_stride: 2,
            noise_std: 0.05,
        };
        let rec = generate_synthetic_corpus(&spec)?.remove(0);
        let example = TrainExample::from_record(&rec, &cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = sample_mask(example.frames(), &mut rng)?;
        let flow = make_flow_batch(&example.inputs.mel, &mut rng)?;
        Ok(Self {
            model,
            store,
            example,
            mask,
            flow,
        })
    }

    /// `L_fm + L_CL + L_ctc` on the full-condition branch.
    pub fn objective(&self, g: &mut Graph<'_>) -> Result<Var> {
        let bundle = self.model.conditioner.build(g, &self.example.inputs, Some(self.mask))?;
        let xt = g.constant(self.flow.xt.clone());
        let out = self.model.forward(g, xt, &bundle, self.flow.t)?;
        let l_fm = cfm_loss(g, out.v, &self.flow.target, Some(&self.mask))?;
        let z_ca = out
            .taps
            .z_ca
            .ok_or_else(|| Error::invalid("p2_end", "no context layer"))?;
        let f = g.constant(self.example.align.clone());
        let l_cl = self.model.contrastive.loss(g, z_ca, f)?;
        let logits = self.model.ctc.logits(g, out.taps.z_final)?;
        let l_ctc = self.model.ctc.loss(g, logits, &self.example.labels)?;
        let s = g.add(l_fm, l_cl);
        Ok(g.add(s, l_ctc))
    }

    pub fn check(&mut self) -> Result<GradCheckReport> {
        let mut store = std::mem::take(&mut self.store);
        let report = check_params(&mut store, |g| self.objective(g), GRAD_CHECK_STEP, GRAD_CHECK_FLOOR);
        self.store = store;
        report
    }
}

fn check_gradients(_: &VerifyOptions) -> std::result::Result<String, String> {
    let mut fx = GradFixture::new(3).map_err(err_str)?;
    let report = fx.check().map_err(err_str)?;
    ensure(report.passes(GRAD_CHECK_TOL), || {
        format!("max relative error {:.3e} at {:?}", report.max_rel_err, report.worst)
    })?;
    Ok(format!(
        "{} entries, max relative error {:.2e}",
        report.checked, report.max_rel_err
    ))
}

fn check_euler_constant(_: &VerifyOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = standard_normal(3, 5, &mut rng);
    let x0 = standard_normal(3, 5, &mut rng);
    let field = |x: &Mat, _t: f64, _b: ConditionBranch| -> Result<Mat> { Ok(Array2::ones(x.dim()) * &c) };
    let mut worst = 0.0f64;
    for nfe in [1, 2, 3, 7, 32] {
        let out = euler_from(&field, x0.clone(), GuidanceSpec::unguided(), nfe).map_err(err_str)?;
        let expected = &x0 + &c;
        worst = worst.max((&out.mel - &expected).iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    ensure(worst <= 1e-12, || format!("max error {worst:e}"))?;
    Ok(format!("max error {worst:.1e}"))
}

fn check_euler_linear(_: &VerifyOptions) -> std::result::Result<String, String> {
    let field = |x: &Mat, _t: f64, _b: ConditionBranch| -> Result<Mat> { Ok(x.clone()) };
    let out = euler_from(&field, Array2::ones((1, 1)), GuidanceSpec::unguided(), 32).map_err(err_str)?;
    let got = out.mel[[0, 0]];
    let expected = (1.0f64 + 1.0 / 32.0).powi(32);
    ensure((got - expected).abs() < 1e-9, || format!("{got} vs {expected}"))?;
    let e = std::f64::consts::E;
    ensure((got - e).abs() / e < 0.02, || format!("{got} more than 2% from e"))?;
    Ok(format!("{got:.9}"))
}

fn check_guidance_reduction(_: &VerifyOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (f, a, u) = (
            standard_normal(4, 6, &mut rng),
            standard_normal(4, 6, &mut rng),
            standard_normal(4, 6, &mut rng),
        );
        let v = cfg_field(&f, &a, &u, GuidanceSpec::unguided()).map_err(err_str)?;
        ensure(v == f, || "unguided field differs from the full branch".into())?;
    }
    Ok("bitwise equal on 20 triples".into())
}

fn check_guidance_scalar(_: &VerifyOptions) -> std::result::Result<String, String> {
    let m = |v: f64| Array2::from_elem((1, 1), v);
    let spec = GuidanceSpec::new(1.0, 1.0).map_err(err_str)?;
    let v = cfg_field(&m(3.0), &m(2.0), &m(1.0), spec).map_err(err_str)?[[0, 0]];
    ensure(v == 5.0, || format!("got {v}"))?;
    Ok("(3, 2, 1) at (1, 1) -> 5".into())
}

fn check_guidance_linearity(_: &VerifyOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let spec = GuidanceSpec::new(rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)).map_err(err_str)?;
        let draw = |rng: &mut ChaCha8Rng| [0; 3].map(|_| standard_normal(3, 4, rng));
        let (p, q) = (draw(&mut rng), draw(&mut rng));
        let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mix: Vec<Mat> = (0..3).map(|i| &p[i] * alpha + &q[i] * beta).collect();
        let lhs = cfg_field(&mix[0], &mix[1], &mix[2], spec).map_err(err_str)?;
        let rhs = cfg_field(&p[0], &p[1], &p[2], spec).map_err(err_str)? * alpha
            + cfg_field(&q[0], &q[1], &q[2], spec).map_err(err_str)? * beta;
        worst = worst.max((&lhs - &rhs).iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    ensure(worst < 1e-9, || format!("max superposition error {worst:e}"))?;
    Ok(format!("50 triples, max error {worst:.1e}"))
}

fn check_info_nce(_: &VerifyOptions) -> std::result::Result<String, String> {
    let one = Array2::from_shape_vec((1, 3), vec![0.3, -1.2, 2.0]).expect("shape");
    let other = Array2::from_shape_vec((1, 3), vec![1.0, 0.5, 0.0]).expect("shape");
    let l1 = info_nce_value(&one, &other, 0.07).map_err(err_str)?;
    ensure(l1.abs() < 1e-12, || format!("N=1 gives {l1}"))?;
    let n = 7;
    let same = Array2::from_shape_fn((n, 3), |(_, j)| [0.2, -0.4, 1.0][j]);
    let ln = info_nce_value(&same, &same, 0.07).map_err(err_str)?;
    ensure((ln - (n as f64).ln()).abs() < 1e-9, || {
        format!("identical frames give {ln}")
    })?;
    let eye = Array2::eye(2);
    let lo = info_nce_value(&eye, &eye, 1.0).map_err(err_str)?;
    let expected = (1.0 + (-1.0f64).exp()).ln();
    ensure((lo - expected).abs() < 1e-9, || {
        format!("orthogonal pairs give {lo}, expected {expected}")
    })?;
    Ok(format!("0, log {n}, {lo:.5}"))
}

fn check_ctc_units(_: &VerifyOptions) -> std::result::Result<String, String> {
    let l = ctc_loss_value(&Array2::zeros((1, 2)), &[1], 0).map_err(err_str)?;
    ensure((l - 2f64.ln()).abs() < 1e-9, || {
        format!("uniform single frame gives {l}")
    })?;
    let mut logits = Array2::from_elem((2, 3), -30.0);
    logits[[0, 1]] = 30.0;
    logits[[1, 2]] = 30.0;
    let sharp = ctc_loss_value(&logits, &[1, 2], 0).map_err(err_str)?;
    ensure(sharp < 1e-3, || format!("exact spelling gives {sharp}"))?;
    Ok(format!("{l:.6}, {sharp:.1e}"))
}

/// CTC negative log-likelihood by summing over every frame-level path.
/// Returns `None` when no path collapses to `labels`.
pub fn ctc_brute_force(logits: &Mat, labels: &[usize], blank: usize) -> Option<f64> {
    let (frames, vocab) = logits.dim();
    let probs: Vec<Vec<f64>> = logits
        .rows()
        .into_iter()
        .map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    loop {
        let mut collapsed = Vec::new();
        let mut last = None;
        for &s in &path {
            if Some(s) != last && s != blank {
                collapsed.push(s);
            }
            last = Some(s);
        }
        if collapsed == labels {
            total += path.iter().enumerate().map(|(i, &s)| probs[i][s]).product::<f64>();
        }
        // Odometer increment over vocab^frames paths.
        let mut i = 0;
        loop {
            if i == frames {
                return (total > 0.0).then(|| -total.ln());
            }
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Every label sequence of length `1..=max_len` over the non-blank symbols.
fn label_sequences(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            for s in 1..vocab {
                let mut s2: Vec<usize> = seq.clone();
                s2.push(s);
                next.push(s2);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Compares CTC with enumeration on all instances with up to 3 labels, 5
/// frames and 3 symbols. Returns (instances, max abs error).
pub fn ctc_oracle_sweep(seed: u64) -> std::result::Result<(usize, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut count, mut worst) = (0usize, 0.0f64);
    for vocab in 2..=3 {
        for frames in 1..=5 {
            for labels in label_sequences(vocab, 3) {
                let logits = standard_normal(frames, vocab, &mut rng) * 2.0;
                let oracle = ctc_brute_force(&logits, &labels, 0);
                let got = ctc_loss_value(&logits, &labels, 0).ok();
                match (oracle, got) {
                    (Some(o), Some(g)) => worst = worst.max((o - g).abs()),
                    (None, None) => {}
                    (o, g) => return Err(format!("labels {labels:?}, {frames} frames: oracle {o:?} vs {g:?}")),
                }
                count += 1;
            }
        }
    }
    Ok((count, worst))
}

fn check_ctc_brute_force(_: &VerifyOptions) -> std::result::Result<String, String> {
    let (count, worst) = ctc_oracle_sweep(8)?;
    ensure(worst < 1e-9, || format!("max error {worst:e}"))?;
    Ok(format!("{count} instances, max error {worst:.1e}"))
}

fn check_mask_statistics(_: &VerifyOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (draws, frames) = (10_000, 200);
    let mut sum = 0.0;
    for _ in 0..draws {
        let m = sample_mask(frames, &mut rng).map_err(err_str)?;
        let f = m.fraction(frames);
        ensure((0.70..=1.00).contains(&f), || {
            format!("fraction {f} outside [0.70, 1.00]")
        })?;
        sum += f;
    }
    let mean = sum / draws as f64;
    ensure((0.84..=0.86).contains(&mean), || format!("mean fraction {mean}"))?;
    Ok(format!("{draws} masks, mean fraction {mean:.4}"))
}

fn check_mask_complementarity(_: &VerifyOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let frames = rng.random_range(2..50);
        let m = standard_normal(frames, 5, &mut rng);
        let mask = sample_mask(frames, &mut rng).map_err(err_str)?;
        let h = apply_mask(&m, Some(&mask)).map_err(err_str)?;
        ensure(apply_mask(&h, Some(&mask)).map_err(err_str)? == h, || {
            "masking is not idempotent".into()
        })?;
        let ind = mask.indicator(frames);
        let restored = &h + &(&m * &ind);
        ensure(restored == m, || "masked and kept parts do not sum to the input".into())?;
    }
    Ok("idempotent and complementary on 20 draws".into())
}

fn check_flow_endpoints(_: &VerifyOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (x0, x1) = (standard_normal(4, 3, &mut rng), standard_normal(4, 3, &mut rng));
    let at0 = FlowBatch::new(x0.clone(), x1.clone(), 0.0).map_err(err_str)?;
    let at1 = FlowBatch::new(x0.clone(), x1.clone(), 1.0).map_err(err_str)?;
    let mid = FlowBatch::new(x0.clone(), x1.clone(), 0.37).map_err(err_str)?;
    ensure(at0.xt == x0 && at1.xt == x1, || "interpolant misses an endpoint".into())?;
    ensure(at0.target == mid.target && mid.target == &x1 - &x0, || {
        "target depends on t".into()
    })?;
    Ok("x_t hits both endpoints, target constant in t".into())
}
