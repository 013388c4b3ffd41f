//! Training loop: condition dropout, flow-matching plus alignment losses,
//! AdamW, checkpoints and the loss log.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use cosync_autograd::{Graph, Mat, ParamStore};
use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::conditioning::{sample_mask, CondInputs, MaskSpec};
use crate::config::KvMap;
use crate::data_io::UtteranceRecord;
use crate::error::{Error, Result};
use crate::flow::{
    apply_branch_vars, cfm_loss, cfm_loss_value, euler_from, infill_extract, make_flow_batch, standard_normal,
    ConditionBranch, FlowBatch, GuidanceSpec,
};
use crate::jsar::{ctc_labels, jsar_total};
use crate::metrics::{region_mse, sync_kl, EvalRow, DURATION_BINS};
use crate::model::{Model, ModelConfig, ModelField};

pub const CHECKPOINT_FORMAT: &str = "cosync-checkpoint-v1";
pub const LOSS_CSV_HEADER: &str = "step,l_fm,l_cl,l_ctc,total,branch";
const META_KEY: &str = "cosync";

// Independent RNG families derived from one seed.
const BATCH_SALT: u64 = 0x6261_7463_6865_7321;
const EVAL_SALT: u64 = 0x6576_616c_7561_7465;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Linear warmup length; 0 disables warmup.
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub p_drop_text: f64,
    pub p_drop_all: f64,
    pub w_cl: f64,
    pub w_ctc: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Supervise the whole sequence instead of the masked span only.
    pub full_sequence_loss: bool,
    /// Rescale the summed batch gradient to at most this global L2 norm;
    /// 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            warmup_steps: 500,
            steps: 1000,
            batch_size: 4,
            p_drop_text: 0.1,
            p_drop_all: 0.1,
            w_cl: 1.0,
            w_ctc: 1.0,
            seed: 0,
            checkpoint_every: 0,
            full_sequence_loss: false,
            grad_clip: 0.0,
        }
    }
}

macro_rules! train_kv_fields {
    ($($f:ident),* $(,)?) => {
        impl TrainConfig {
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

train_kv_fields!(
    lr,
    beta1,
    beta2,
    weight_decay,
    eps,
    warmup_steps,
    steps,
    batch_size,
    p_drop_text,
    p_drop_all,
    w_cl,
    w_ctc,
    seed,
    checkpoint_every,
    full_sequence_loss,
    grad_clip,
);

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_drop_text", self.p_drop_text), ("p_drop_all", self.p_drop_all)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, format!("{p} outside [0, 1]")));
            }
        }
        if self.p_drop_text + self.p_drop_all > 1.0 + 1e-12 {
            return Err(Error::invalid("p_drop_text", "p_drop_text + p_drop_all exceeds 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid("lr", "must be finite and nonnegative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, format!("{b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "eps/weight_decay",
                "eps must be positive, weight_decay nonnegative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        for (name, w) in [
            ("w_cl", self.w_cl),
            ("w_ctc", self.w_ctc),
            ("grad_clip", self.grad_clip),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(name, "must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    /// Settings for the small-corpus overfit probe.
    pub fn probe() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 100,
            steps: 2000,
            batch_size: 4,
            grad_clip: 1.0,
            ..Self::default()
        }
    }

    /// Learning rate for the 0-based step index.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Maps a uniform draw to a branch: unconditional, then acoustic-only,
    /// then full.
    pub fn branch_for(&self, u: f64) -> ConditionBranch {
        if u < self.p_drop_all {
            ConditionBranch::Unconditional
        } else if u < self.p_drop_all + self.p_drop_text {
            ConditionBranch::AcousticOnly
        } else {
            ConditionBranch::Full
        }
    }
}

/// Model and training settings read from one `key = value` file. The
/// optional `preset` key (`default` or `toy`) selects the model baseline
/// before the remaining keys override it.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_kv(mut kv: KvMap) -> Result<Self> {
        let mut preset = String::from("default");
        kv.take("preset", &mut preset)?;
        let mut model = match preset.as_str() {
            "default" => ModelConfig::default(),
            "toy" => ModelConfig::toy(),
            "tiny" => ModelConfig::tiny(),
            other => return Err(Error::invalid("preset", format!("unknown preset {other:?}"))),
        };
        model.apply_kv(&mut kv)?;
        let mut train = TrainConfig::default();
        train.apply_kv(&mut kv)?;
        kv.finish()?;
        model.validate()?;
        train.validate()?;
        Ok(Self { preset, model, train })
    }

    pub fn to_text(&self) -> String {
        let mut text = format!("preset = {}\n", self.preset);
        text.push_str(&self.model.to_kv().to_text());
        text.push_str(&self.train.to_kv().to_text());
        text
    }
}

/// One utterance in the layout the model consumes.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub utt_id: String,
    pub inputs: CondInputs,
    /// `[L × D_a]`
    pub align: Mat,
    pub labels: Vec<usize>,
    pub ref_len: usize,
}

impl TrainExample {
    pub fn from_record(rec: &UtteranceRecord, cfg: &ModelConfig) -> Result<Self> {
        rec.validate()?;
        rec.validate_vocab(cfg.vocab_size)?;
        let check = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::invalid(
                    what,
                    format!("record {} has {got}, model expects {want}", rec.utt_id),
                ))
            }
        };
        check("mel_bins", rec.mel_bins(), cfg.mel_bins)?;
        check("visual_dim", rec.lip_raw.nrows(), cfg.visual_dim)?;
        check("align_dim", rec.align_feat.nrows(), cfg.align_dim)?;
        Ok(Self {
            utt_id: rec.utt_id.clone(),
            inputs: CondInputs::from_record(rec),
            align: rec.align_feat.t().as_standard_layout().into_owned(),
            labels: ctc_labels(&rec.text_ids),
            ref_len: rec.ref_len,
        })
    }

    pub fn prepare(records: &[UtteranceRecord], cfg: &ModelConfig) -> Result<Vec<Self>> {
        records.iter().map(|r| Self::from_record(r, cfg)).collect()
    }

    pub fn frames(&self) -> usize {
        self.inputs.frames()
    }
}

/// Losses of one optimizer step. Alignment terms are absent when no sample
/// in the batch drew the full-condition branch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// 1-based index of the completed step.
    pub step: usize,
    pub l_fm: f64,
    pub l_cl: Option<f64>,
    pub l_ctc: Option<f64>,
    pub total: f64,
    pub branches: Vec<ConditionBranch>,
}

impl LossReport {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let branches: Vec<&str> = self.branches.iter().map(|b| b.as_str()).collect();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.l_fm,
            opt(self.l_cl),
            opt(self.l_ctc),
            self.total,
            branches.join("|")
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let bad = || Error::invalid("loss row", format!("{line:?}"));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        let branches = cols[5]
            .split('|')
            .map(|b| ConditionBranch::parse(b).ok_or_else(bad))
            .collect::<Result<_>>()?;
        Ok(Self {
            step: cols[0].parse().map_err(|_| bad())?,
            l_fm: num(cols[1])?,
            l_cl: opt(cols[2])?,
            l_ctc: opt(cols[3])?,
            total: num(cols[4])?,
            branches,
        })
    }
}

/// AdamW first and second moments, indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, _, p)| Array2::zeros(p.dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed steps.
    pub step: usize,
    pub params: ParamStore,
    pub adam: AdamState,
    pub history: Vec<LossReport>,
}

impl TrainState {
    pub fn new(params: ParamStore) -> Self {
        let adam = AdamState::zeros_like(&params);
        Self {
            step: 0,
            params,
            adam,
            history: Vec::new(),
        }
    }
}

/// RNG for the 0-based step index; independent of every other step.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Corpus indices for a step: consecutive slices of per-epoch shuffles.
pub fn batch_indices(seed: u64, step: usize, batch_size: usize, n: usize) -> Vec<usize> {
    let mut cache: Option<(usize, Vec<usize>)> = None;
    (0..batch_size)
        .map(|b| {
            let pos = step * batch_size + b;
            let (epoch, offset) = (pos / n, pos % n);
            if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BATCH_SALT);
                rng.set_stream(epoch as u64);
                perm.shuffle(&mut rng);
                cache = Some((epoch, perm));
            }
            cache.as_ref().expect("filled above").1[offset]
        })
        .collect()
}

struct SamplePlan<'a> {
    ex: &'a TrainExample,
    mask: MaskSpec,
    branch: ConditionBranch,
    flow: FlowBatch,
}

/// Per-sample loss values and the gradient of its share of the objective.
struct SampleResult {
    l_fm: f64,
    jsar: Option<(f64, f64)>,
    grads: Vec<(cosync_autograd::ParamId, Mat)>,
}

fn run_sample(
    model: &Model,
    cfg: &TrainConfig,
    store: &ParamStore,
    plan: &SamplePlan<'_>,
    batch: usize,
    n_full: usize,
) -> Result<SampleResult> {
    let mut g = Graph::new(store);
    let bundle = model.conditioner.build(&mut g, &plan.ex.inputs, Some(plan.mask))?;
    let bundle = apply_branch_vars(&mut g, &bundle, plan.branch);
    let xt = g.constant(plan.flow.xt.clone());
    let out = model.forward(&mut g, xt, &bundle, plan.flow.t)?;
    let region = (!cfg.full_sequence_loss).then_some(&plan.mask);
    let l_fm = cfm_loss(&mut g, out.v, &plan.flow.target, region)?;
    let mut objective = g.scale(l_fm, 1.0 / batch as f64);
    let mut jsar = None;
    if plan.branch == ConditionBranch::Full {
        let z_ca = out
            .taps
            .z_ca
            .ok_or_else(|| Error::invalid("p2_end", "alignment loss needs at least one cross-attention layer"))?;
        let f_av = g.constant(plan.ex.align.clone());
        let l_cl = model.contrastive.loss(&mut g, z_ca, f_av)?;
        let logits = model.ctc.logits(&mut g, out.taps.z_final)?;
        let l_ctc = model.ctc.loss(&mut g, logits, &plan.ex.labels)?;
        let share = 1.0 / n_full as f64;
        let cl = g.scale(l_cl, cfg.w_cl * share);
        let ctc = g.scale(l_ctc, cfg.w_ctc * share);
        objective = g.add(objective, cl);
        objective = g.add(objective, ctc);
        jsar = Some((g.scalar(l_cl), g.scalar(l_ctc)));
    }
    let l_fm_value = g.scalar(l_fm);
    let values = [Some(l_fm_value), jsar.map(|j| j.0), jsar.map(|j| j.1)];
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            step: 0,
            utt_id: plan.ex.utt_id.clone(),
            detail: format!(
                "branch={} t={} mask=[{}, {}) l_fm={} jsar={:?}",
                plan.branch.as_str(),
                plan.flow.t,
                plan.mask.start,
                plan.mask.end,
                l_fm_value,
                jsar
            ),
        });
    }
    let grads = g.backward(objective).into_params();
    Ok(SampleResult {
        l_fm: l_fm_value,
        jsar,
        grads,
    })
}

/// One optimizer step on the batch the step index selects.
pub fn train_step(
    model: &Model,
    cfg: &TrainConfig,
    state: &mut TrainState,
    corpus: &[TrainExample],
) -> Result<LossReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("data", "empty corpus"));
    }
    let indices = batch_indices(cfg.seed, state.step, cfg.batch_size, corpus.len());
    let batch: Vec<&TrainExample> = indices.iter().map(|&i| &corpus[i]).collect();
    train_step_on(model, cfg, state, &batch)
}

/// One optimizer step on an explicit batch.
pub fn train_step_on(
    model: &Model,
    cfg: &TrainConfig,
    state: &mut TrainState,
    batch: &[&TrainExample],
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::invalid("batch_size", "empty batch"));
    }
    let step = state.step;
    let mut rng = step_rng(cfg.seed, step);
    let mut plans = Vec::with_capacity(batch.len());
    for &ex in batch {
        let mask = sample_mask(ex.frames(), &mut rng)?;
        let branch = cfg.branch_for(rng.random());
        let flow = make_flow_batch(&ex.inputs.mel, &mut rng)?;
        plans.push(SamplePlan { ex, mask, branch, flow });
    }
    let n_full = plans.iter().filter(|p| p.branch == ConditionBranch::Full).count();

    let mut grads: Vec<Option<Mat>> = vec![None; state.params.len()];
    let (mut fm_sum, mut cl_sum, mut ctc_sum) = (0.0, 0.0, 0.0);
    for plan in &plans {
        let res = run_sample(model, cfg, &state.params, plan, batch.len(), n_full).map_err(|e| match e {
            Error::Diverged { utt_id, detail, .. } => Error::Diverged {
                step: step + 1,
                utt_id,
                detail,
            },
            other => other,
        })?;
        fm_sum += res.l_fm;
        if let Some((cl, ctc)) = res.jsar {
            cl_sum += cl;
            ctc_sum += ctc;
        }
        for (id, gr) in res.grads {
            match &mut grads[id.index()] {
                Some(acc) => *acc += &gr,
                slot => *slot = Some(gr),
            }
        }
    }

    if cfg.grad_clip > 0.0 {
        clip_global_norm(&mut grads, cfg.grad_clip);
    }
    adamw_update(cfg, step, &mut state.params, &mut state.adam, &grads);
    state.step += 1;

    let l_fm = fm_sum / batch.len() as f64;
    let (l_cl, l_ctc) = if n_full > 0 {
        (Some(cl_sum / n_full as f64), Some(ctc_sum / n_full as f64))
    } else {
        (None, None)
    };
    let total = jsar_total(l_fm, l_cl.unwrap_or(0.0), l_ctc.unwrap_or(0.0), cfg.w_cl, cfg.w_ctc);
    let report = LossReport {
        step: state.step,
        l_fm,
        l_cl,
        l_ctc,
        total,
        branches: plans.iter().map(|p| p.branch).collect(),
    };
    state.history.push(report.clone());
    Ok(report)
}

/// Scales every gradient by `max_norm / ‖g‖` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// Decoupled weight decay followed by the bias-corrected Adam update.
/// Missing gradients count as zero.
pub fn adamw_update(
    cfg: &TrainConfig,
    step: usize,
    params: &mut ParamStore,
    adam: &mut AdamState,
    grads: &[Option<Mat>],
) {
    let lr = cfg.lr_at(step);
    let t = (step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let p = params.get_mut(id);
        let (m, v) = (&mut adam.m[i], &mut adam.v[i]);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        };
        match &grads[i] {
            Some(g) => Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| update(p, m, v, g)),
            None => Zip::from(p).and(m).and(v).for_each(|p, m, v| update(p, m, v, 0.0)),
        }
    }
}

fn to_le(m: &Mat) -> Vec<u8> {
    m.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn checkpoint_meta(model: &ModelConfig, train: &TrainConfig, state: &TrainState) -> String {
    let mut kv = KvMap::default();
    kv.insert("format", CHECKPOINT_FORMAT);
    kv.insert("step", state.step);
    for (k, v) in model.to_kv().to_text().lines().filter_map(|l| l.split_once(" = ")) {
        kv.insert(format!("model.{k}"), v);
    }
    for (k, v) in train.to_kv().to_text().lines().filter_map(|l| l.split_once(" = ")) {
        kv.insert(format!("train.{k}"), v);
    }
    for r in &state.history {
        kv.insert(format!("history.{:09}", r.step), r.csv_row());
    }
    kv.to_text()
}

/// Writes parameters, optimizer moments, configs and loss history. The file
/// appears atomically via a temporary sibling and rename.
pub fn save_checkpoint(path: &Path, model: &ModelConfig, train: &TrainConfig, state: &TrainState) -> Result<()> {
    let store = &state.params;
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (id, name, p) in store.iter() {
        let shape = vec![p.nrows(), p.ncols()];
        buffers.push((format!("param/{name}"), shape.clone(), to_le(p)));
        buffers.push((
            format!("adam_m/{name}"),
            shape.clone(),
            to_le(&state.adam.m[id.index()]),
        ));
        buffers.push((format!("adam_v/{name}"), shape, to_le(&state.adam.v[id.index()])));
    }
    let views = buffers
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F64, s.clone(), b)
                .map(|v| (n.as_str(), v))
                .map_err(|e| ckpt_err(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(META_KEY.to_string(), checkpoint_meta(model, train, state))]);
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Everything needed to resume or run inference.
#[derive(Debug)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub model: Model,
    pub state: TrainState,
}

fn read_f64(st: &SafeTensors<'_>, name: &str, shape: (usize, usize), path: &Path) -> Result<Mat> {
    let view = st
        .tensor(name)
        .map_err(|_| ckpt_err(path, format!("missing tensor {name}")))?;
    if view.dtype() != Dtype::F64 || view.shape() != [shape.0, shape.1] {
        return Err(ckpt_err(
            path,
            format!(
                "tensor {name}: {:?} {:?}, expected F64 {:?}",
                view.dtype(),
                view.shape(),
                shape
            ),
        ));
    }
    let data = view
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Array2::from_shape_vec(shape, data).map_err(|e| ckpt_err(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| ckpt_err(path, "missing metadata"))?;
    let mut kv = KvMap::parse(text)?;
    let mut format = String::new();
    kv.take("format", &mut format)?;
    if format != CHECKPOINT_FORMAT {
        return Err(Error::CheckpointVersion {
            found: format,
            expected: CHECKPOINT_FORMAT.into(),
        });
    }
    let mut step = 0usize;
    kv.take("step", &mut step)?;
    let (mut model_kv, mut train_kv) = (KvMap::default(), KvMap::default());
    let mut history = Vec::new();
    for line in kv.to_text().lines() {
        let Some((k, v)) = line.split_once(" = ") else { continue };
        if let Some(rest) = k.strip_prefix("model.") {
            model_kv.insert(rest, v);
        } else if let Some(rest) = k.strip_prefix("train.") {
            train_kv.insert(rest, v);
        } else if k.starts_with("history.") {
            history.push(LossReport::parse_csv_row(v)?);
        } else {
            return Err(ckpt_err(path, format!("unexpected metadata key {k}")));
        }
    }
    let model_cfg = ModelConfig::from_kv(model_kv)?;
    let mut train_cfg = TrainConfig::default();
    train_cfg.apply_kv(&mut train_kv)?;
    train_kv.finish()?;

    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let (model, mut params) = Model::new(&model_cfg, 0)?;
    let expected = 3 * params.len();
    if st.len() != expected {
        return Err(ckpt_err(
            path,
            format!("{} tensors, model layout needs {expected}", st.len()),
        ));
    }
    let mut adam = AdamState::zeros_like(&params);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let shape = params.get(id).dim();
        *params.get_mut(id) = read_f64(&st, &format!("param/{name}"), shape, path)?;
        adam.m[id.index()] = read_f64(&st, &format!("adam_m/{name}"), shape, path)?;
        adam.v[id.index()] = read_f64(&st, &format!("adam_v/{name}"), shape, path)?;
    }
    Ok(Checkpoint {
        model_cfg,
        train_cfg,
        model,
        state: TrainState {
            step,
            params,
            adam,
            history,
        },
    })
}

/// Opens the loss log for appending after `keep_through` completed steps:
/// rows for later steps are dropped and a header is written if needed.
pub fn prepare_loss_csv(path: &Path, keep_through: usize) -> Result<()> {
    let existing = match std::fs::read_to_string(path) {
        Ok(s) => s,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for line in existing.lines().skip(1) {
        let step: usize = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::invalid("loss log", format!("malformed row {line:?} in {}", path.display())))?;
        if step <= keep_through {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn append_loss_row(path: &Path, report: &LossReport) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", report.csv_row()).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.safetensors"))
}

pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const LOSS_CSV: &str = "loss.csv";

/// Trains until `cfg.steps` steps are complete. With `out_dir`, appends one
/// loss row per step, writes periodic checkpoints and a final checkpoint.
pub fn train_loop(
    model: &Model,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    state: &mut TrainState,
    corpus: &[TrainExample],
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&LossReport),
) -> Result<()> {
    cfg.validate()?;
    let csv = out_dir.map(|d| d.join(LOSS_CSV));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        prepare_loss_csv(csv.as_deref().expect("set with out_dir"), state.step)?;
    }
    while state.step < cfg.steps {
        let report = train_step(model, cfg, state, corpus)?;
        if let Some(csv) = &csv {
            append_loss_row(csv, &report)?;
        }
        on_step(&report);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) {
                save_checkpoint(&checkpoint_path(dir, state.step), model_cfg, cfg, state)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), model_cfg, cfg, state)?;
    }
    Ok(())
}

/// Fixed draws of `(mask, x0, t)` per utterance for comparable loss values.
pub fn eval_flow_loss(
    model: &Model,
    store: &ParamStore,
    corpus: &[TrainExample],
    seed: u64,
    draws: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (u, ex) in corpus.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SALT);
        rng.set_stream(u as u64);
        for _ in 0..draws {
            let mask = sample_mask(ex.frames(), &mut rng)?;
            let flow = make_flow_batch(&ex.inputs.mel, &mut rng)?;
            let bundle = model.conditioner.bundle(store, &ex.inputs, Some(mask))?;
            let v = model.field(store, &flow.xt, flow.t, &bundle)?;
            total += cfm_loss_value(&v, &flow.target, Some(&mask))?;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Generated mel for one utterance.
#[derive(Clone, Debug)]
pub struct Generation {
    pub mask: MaskSpec,
    /// Reference frames restored outside the target span.
    pub full: Mat,
    pub region: Mat,
    pub evaluations: usize,
}

/// Samples the span after the reference prefix. `x0` is drawn from the
/// stream for `(seed, stream)` so repeated calls are comparable.
pub fn generate(
    model: &Model,
    store: &ParamStore,
    ex: &TrainExample,
    guidance: GuidanceSpec,
    nfe: usize,
    seed: u64,
    stream: u64,
) -> Result<Generation> {
    let frames = ex.frames();
    let mask = MaskSpec::after_reference(ex.ref_len, frames)?;
    let bundle = model.inference_bundle(store, &ex.inputs, mask)?;
    let field = ModelField::new(model, store, &bundle);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let x0 = standard_normal(frames, model.cfg.mel_bins, &mut rng);
    let sample = euler_from(&field, x0, guidance, nfe)?;
    let infill = infill_extract(&sample.mel, &mask, Some(&ex.inputs.mel))?;
    Ok(Generation {
        mask,
        full: infill.full,
        region: infill.region,
        evaluations: sample.evaluations,
    })
}

/// Region MSE and Sync-KL for every utterance at every NFE.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    corpus: &[TrainExample],
    nfes: &[usize],
    guidance: GuidanceSpec,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(corpus.len() * nfes.len());
    for (u, ex) in corpus.iter().enumerate() {
        for &nfe in nfes {
            let gen = generate(model, store, ex, guidance, nfe, seed, u as u64)?;
            rows.push(EvalRow {
                utt_id: ex.utt_id.clone(),
                nfe,
                region_mse: region_mse(&gen.full, &ex.inputs.mel, &gen.mask)?,
                sync_kl: sync_kl(&ex.inputs.mel, &gen.full, DURATION_BINS)?,
            });
        }
    }
    Ok(rows)
}

pub const PROBE_NFES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub parameters: usize,
    pub initial_fm: f64,
    pub final_fm: f64,
    pub untrained: Vec<EvalRow>,
    pub trained: Vec<EvalRow>,
    pub history: Vec<LossReport>,
}

/// Trains a fresh model on a small corpus and evaluates it before and after
/// at NFE 8, 16 and 32.
pub fn overfit_probe(
    records: &[UtteranceRecord],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ProbeReport, Model, TrainState)> {
    if records.is_empty() || records.len() > 64 {
        return Err(Error::invalid(
            "data",
            format!("probe expects 1..=64 utterances, got {}", records.len()),
        ));
    }
    let corpus = TrainExample::prepare(records, model_cfg)?;
    let (model, params) = Model::new(model_cfg, train_cfg.seed)?;
    let guidance = GuidanceSpec::unguided();
    let initial_fm = eval_flow_loss(&model, &params, &corpus, train_cfg.seed, 4)?;
    let untrained = evaluate(&model, &params, &corpus, &PROBE_NFES, guidance, train_cfg.seed)?;
    let mut state = TrainState::new(params);
    train_loop(&model, model_cfg, train_cfg, &mut state, &corpus, out_dir, |_| {})?;
    let final_fm = eval_flow_loss(&model, &state.params, &corpus, train_cfg.seed, 4)?;
    let trained = evaluate(&model, &state.params, &corpus, &PROBE_NFES, guidance, train_cfg.seed)?;
    let report = ProbeReport {
        parameters: state.params.num_scalars(),
        initial_fm,
        final_fm,
        untrained,
        trained,
        history: state.history.clone(),
    };
    Ok((report, model, state))
}
