//! Linear-path flow matching, condition branches, dual-scale guidance and the
//! Euler sampler.

use cosync_autograd::{Graph, Mat, Var};
use ndarray::{s, Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::conditioning::{BundleVars, ConditioningBundle, MaskSpec};
use crate::error::{Error, Result};

/// One training example on the straight path from noise to data.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub x0: Mat,
    pub x1: Mat,
    pub t: f64,
    pub xt: Mat,
    pub target: Mat,
}

impl FlowBatch {
    pub fn new(x0: Mat, x1: Mat, t: f64) -> Result<Self> {
        if x0.dim() != x1.dim() {
            return Err(Error::shape(
                "flow batch",
                format!("x0 {:?} vs x1 {:?}", x0.dim(), x1.dim()),
            ));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid("t", format!("{t} outside [0, 1]")));
        }
        let xt = Zip::from(&x0).and(&x1).map_collect(|&a, &b| (1.0 - t) * a + t * b);
        let target = &x1 - &x0;
        Ok(Self { x0, x1, t, xt, target })
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Draws `x0 ~ N(0, I)` and `t ~ U[0, 1)`.
pub fn make_flow_batch<R: Rng + ?Sized>(x1: &Mat, rng: &mut R) -> Result<FlowBatch> {
    if x1.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("x1".into()));
    }
    let x0 = standard_normal(x1.nrows(), x1.ncols(), rng);
    let t = rng.random::<f64>();
    FlowBatch::new(x0, x1.clone(), t)
}

/// Mean squared error against `target`, restricted to the frames of
/// `loss_mask` when given.
pub fn cfm_loss(g: &mut Graph<'_>, v_pred: Var, target: &Mat, loss_mask: Option<&MaskSpec>) -> Result<Var> {
    if g.shape(v_pred) != target.dim() {
        return Err(Error::shape(
            "cfm_loss",
            format!("prediction {:?} vs target {:?}", g.shape(v_pred), target.dim()),
        ));
    }
    let target = g.constant(target.clone());
    let mut diff = g.sub(v_pred, target);
    if let Some(m) = loss_mask {
        m.check(g.shape(diff).0)?;
        diff = g.slice_rows(diff, m.start, m.end);
    }
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Value-only form of [`cfm_loss`].
pub fn cfm_loss_value(v_pred: &Mat, target: &Mat, loss_mask: Option<&MaskSpec>) -> Result<f64> {
    if v_pred.dim() != target.dim() {
        return Err(Error::shape(
            "cfm_loss",
            format!("prediction {:?} vs target {:?}", v_pred.dim(), target.dim()),
        ));
    }
    let (lo, hi) = match loss_mask {
        Some(m) => {
            m.check(v_pred.nrows())?;
            (m.start, m.end)
        }
        None => (0, v_pred.nrows()),
    };
    let a = v_pred.slice(s![lo..hi, ..]);
    let b = target.slice(s![lo..hi, ..]);
    let sum: f64 = Zip::from(&a).and(&b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
    Ok(sum / a.len() as f64)
}

/// Which conditions the network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConditionBranch {
    Full,
    AcousticOnly,
    Unconditional,
}

impl ConditionBranch {
    pub const ALL: [ConditionBranch; 3] = [Self::Full, Self::AcousticOnly, Self::Unconditional];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::AcousticOnly => "acoustic",
            Self::Unconditional => "uncond",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.as_str() == s)
    }
}

/// Zeroes the streams a branch withholds. Shapes never change.
pub fn apply_branch(bundle: &ConditioningBundle, branch: ConditionBranch) -> ConditioningBundle {
    let mut out = bundle.clone();
    if branch != ConditionBranch::Full {
        out.text_pad.fill(0.0);
        out.text_ca.fill(0.0);
        out.h_text.fill(0.0);
    }
    if branch == ConditionBranch::Unconditional {
        out.h_m.fill(0.0);
        out.x_lip.fill(0.0);
    }
    out
}

/// Graph form of [`apply_branch`]; withheld streams become fresh zero constants.
pub fn apply_branch_vars(g: &mut Graph<'_>, bundle: &BundleVars, branch: ConditionBranch) -> BundleVars {
    let mut out = *bundle;
    let zero_like = |g: &mut Graph<'_>, v: Var| {
        let (r, c) = g.shape(v);
        g.zeros(r, c)
    };
    if branch != ConditionBranch::Full {
        out.text_pad = zero_like(g, bundle.text_pad);
        out.text_ca = zero_like(g, bundle.text_ca);
        out.h_text = zero_like(g, bundle.h_text);
    }
    if branch == ConditionBranch::Unconditional {
        out.h_m = zero_like(g, bundle.h_m);
        out.x_lip = zero_like(g, bundle.x_lip);
    }
    out
}

/// Acoustic and semantic guidance scales.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GuidanceSpec {
    pub lambda_a: f64,
    pub lambda_s: f64,
}

impl GuidanceSpec {
    pub fn new(lambda_a: f64, lambda_s: f64) -> Result<Self> {
        for (name, v) in [("lambda_a", lambda_a), ("lambda_s", lambda_s)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(name, format!("{v} must be finite and nonnegative")));
            }
        }
        Ok(Self { lambda_a, lambda_s })
    }

    pub fn unguided() -> Self {
        Self::default()
    }

    pub fn is_unguided(&self) -> bool {
        self.lambda_a == 0.0 && self.lambda_s == 0.0
    }

    /// Network evaluations per sampler step.
    pub fn evaluations_per_step(&self) -> usize {
        if self.is_unguided() {
            1
        } else {
            3
        }
    }
}

/// `v_full + λ_a (v_full − v_ac) + λ_s (v_ac − v_unc)`. Terms with a zero
/// scale are skipped, so the unguided case returns `v_full` bit for bit.
pub fn cfg_field(v_full: &Mat, v_ac: &Mat, v_unc: &Mat, spec: GuidanceSpec) -> Result<Mat> {
    if v_full.dim() != v_ac.dim() || v_full.dim() != v_unc.dim() {
        return Err(Error::shape(
            "cfg_field",
            format!("{:?} / {:?} / {:?}", v_full.dim(), v_ac.dim(), v_unc.dim()),
        ));
    }
    for (name, m) in [("v_full", v_full), ("v_ac", v_ac), ("v_unc", v_unc)] {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("guidance input {name}")));
        }
    }
    let mut out = v_full.clone();
    if spec.lambda_a != 0.0 {
        Zip::from(&mut out)
            .and(v_full)
            .and(v_ac)
            .for_each(|o, &f, &a| *o += spec.lambda_a * (f - a));
    }
    if spec.lambda_s != 0.0 {
        Zip::from(&mut out)
            .and(v_ac)
            .and(v_unc)
            .for_each(|o, &a, &u| *o += spec.lambda_s * (a - u));
    }
    Ok(out)
}

/// Anything the sampler can integrate.
pub trait VectorField {
    fn eval(&self, x: &Mat, t: f64, branch: ConditionBranch) -> Result<Mat>;
}

impl<F> VectorField for F
where
    F: Fn(&Mat, f64, ConditionBranch) -> Result<Mat>,
{
    fn eval(&self, x: &Mat, t: f64, branch: ConditionBranch) -> Result<Mat> {
        self(x, t, branch)
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub x0: Mat,
    pub mel: Mat,
    /// Total network evaluations across all steps and branches.
    pub evaluations: usize,
}

/// Left-endpoint Euler on the grid `t_k = k / nfe`, starting from `x0`.
pub fn euler_from<V: VectorField + ?Sized>(
    field: &V,
    x0: Mat,
    guidance: GuidanceSpec,
    nfe: usize,
) -> Result<SampleOutput> {
    if nfe == 0 {
        return Err(Error::invalid("nfe", "must be at least 1"));
    }
    let dt = 1.0 / nfe as f64;
    let mut x = x0.clone();
    let mut evaluations = 0;
    for k in 0..nfe {
        let t = k as f64 / nfe as f64;
        let v = if guidance.is_unguided() {
            evaluations += 1;
            field.eval(&x, t, ConditionBranch::Full)?
        } else {
            let full = field.eval(&x, t, ConditionBranch::Full)?;
            let ac = field.eval(&x, t, ConditionBranch::AcousticOnly)?;
            let unc = field.eval(&x, t, ConditionBranch::Unconditional)?;
            evaluations += 3;
            cfg_field(&full, &ac, &unc, guidance).map_err(|_| Error::NonFiniteState { step: k })?
        };
        if v.dim() != x.dim() {
            return Err(Error::shape(
                "euler_sample",
                format!("field {:?} for state {:?}", v.dim(), x.dim()),
            ));
        }
        x.scaled_add(dt, &v);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: k });
        }
    }
    Ok(SampleOutput {
        x0,
        mel: x,
        evaluations,
    })
}

/// Draws `x0 ~ N(0, I)` of shape `[frames × bins]` and integrates.
pub fn euler_sample<V: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &V,
    frames: usize,
    bins: usize,
    guidance: GuidanceSpec,
    nfe: usize,
    rng: &mut R,
) -> Result<SampleOutput> {
    let x0 = standard_normal(frames, bins, rng);
    euler_from(field, x0, guidance, nfe)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Infill {
    /// Full-length sequence, with reference frames restored when requested.
    pub full: Mat,
    /// Frames of the target span only.
    pub region: Mat,
}

/// Cuts the target span out of a generated sequence. With `reference`, the
/// frames outside the span are first replaced by the reference frames.
pub fn infill_extract(generated: &Mat, mask: &MaskSpec, reference: Option<&Mat>) -> Result<Infill> {
    mask.check(generated.nrows())?;
    let mut full = generated.clone();
    if let Some(r) = reference {
        if r.dim() != generated.dim() {
            return Err(Error::shape(
                "infill_extract",
                format!("reference {:?} vs generated {:?}", r.dim(), generated.dim()),
            ));
        }
        full.slice_mut(s![..mask.start, ..])
            .assign(&r.slice(s![..mask.start, ..]));
        full.slice_mut(s![mask.end.., ..]).assign(&r.slice(s![mask.end.., ..]));
    }
    let region = full.slice(s![mask.start..mask.end, ..]).to_owned();
    Ok(Infill { full, region })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cosync_autograd::ParamStore;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn path_arithmetic() {
        let x0 = Array2::zeros((1, 1));
        let x1 = Array2::from_elem((1, 1), 2.0);
        let b = FlowBatch::new(x0, x1, 0.5).unwrap();
        assert_eq!(b.xt[[0, 0]], 1.0);
        assert_eq!(b.target[[0, 0]], 2.0);
    }

    #[test]
    fn endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x1 = standard_normal(4, 3, &mut rng);
        let x0 = standard_normal(4, 3, &mut rng);
        let b0 = FlowBatch::new(x0.clone(), x1.clone(), 0.0).unwrap();
        let b1 = FlowBatch::new(x0.clone(), x1.clone(), 1.0).unwrap();
        assert_eq!(b0.xt, x0);
        assert_eq!(b1.xt, x1);
        assert_eq!(b0.target, b1.target);
    }

    #[test]
    fn loss_examples() {
        let target = array![[1.0, -2.0], [0.5, 3.0], [4.0, 4.0]];
        assert_eq!(cfm_loss_value(&target, &target, None).unwrap(), 0.0);
        assert_eq!(cfm_loss_value(&(&target + 1.0), &target, None).unwrap(), 1.0);
        let mask = MaskSpec::new(1, 3, 3).unwrap();
        let mut pred = target.clone();
        pred[[0, 0]] += 100.0;
        assert_eq!(cfm_loss_value(&pred, &target, Some(&mask)).unwrap(), 0.0);
        assert!(cfm_loss_value(&pred, &target, None).unwrap() > 0.0);

        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = g.constant(&target + 1.0);
        let l = cfm_loss(&mut g, v, &target, Some(&mask)).unwrap();
        assert_eq!(g.scalar(l), 1.0);
        assert!(cfm_loss_value(&target, &Array2::zeros((2, 2)), None).is_err());
    }

    #[test]
    fn guidance_examples() {
        let f = Array2::from_elem((1, 1), 3.0);
        let a = Array2::from_elem((1, 1), 2.0);
        let u = Array2::from_elem((1, 1), 1.0);
        let out = cfg_field(&f, &a, &u, GuidanceSpec::new(1.0, 1.0).unwrap()).unwrap();
        assert_eq!(out[[0, 0]], 5.0);
        assert_eq!(cfg_field(&f, &a, &u, GuidanceSpec::unguided()).unwrap(), f);
        let same = cfg_field(&f, &f, &f, GuidanceSpec::new(2.5, 0.7).unwrap()).unwrap();
        assert_eq!(same, f);
        let bad = Array2::from_elem((1, 1), f64::NAN);
        assert!(cfg_field(&f, &bad, &u, GuidanceSpec::unguided()).is_err());
        assert!(GuidanceSpec::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn euler_constant_and_single_step() {
        let c = array![[0.25, -1.5]];
        let field = |x: &Mat, _t: f64, _b: ConditionBranch| -> Result<Mat> {
            Ok(Array2::from_shape_fn(x.dim(), |(_, j)| c[[0, j]]))
        };
        let x0 = array![[1.0, 2.0]];
        for nfe in [1, 3, 8, 32] {
            let out = euler_from(&field, x0.clone(), GuidanceSpec::unguided(), nfe).unwrap();
            assert!((&out.mel - &(&x0 + &c)).iter().all(|d| d.abs() <= 1e-12));
            assert_eq!(out.evaluations, nfe);
        }
        let nonlinear = |x: &Mat, t: f64, _b: ConditionBranch| -> Result<Mat> { Ok(x.mapv(|v| v.sin() + t)) };
        let out = euler_from(&nonlinear, x0.clone(), GuidanceSpec::unguided(), 1).unwrap();
        assert_eq!(out.mel, &x0 + &x0.mapv(f64::sin));
        let guided = euler_from(&field, x0, GuidanceSpec::new(1.0, 0.0).unwrap(), 4).unwrap();
        assert_eq!(guided.evaluations, 12);
    }

    #[test]
    fn euler_reports_blowup_step() {
        let field = |x: &Mat, _t: f64, _b: ConditionBranch| -> Result<Mat> { Ok(x.mapv(|v| v * 1e300)) };
        let err = euler_from(&field, array![[1e10]], GuidanceSpec::unguided(), 8).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { .. }), "{err}");
        assert!(euler_from(&field, array![[1.0]], GuidanceSpec::unguided(), 0).is_err());
    }

    #[test]
    fn infill_examples() {
        let gen = Array2::from_shape_fn((5, 2), |(i, j)| (i * 2 + j) as f64);
        let all = infill_extract(&gen, &MaskSpec::full(5), None).unwrap();
        assert_eq!(all.region, gen);
        let reference = Array2::from_elem((5, 2), -1.0);
        let m = MaskSpec::new(2, 4, 5).unwrap();
        let out = infill_extract(&gen, &m, Some(&reference)).unwrap();
        assert_eq!(out.region.nrows(), 2);
        for i in [0, 1, 4] {
            assert_eq!(out.full.row(i), reference.row(i));
        }
        assert_eq!(out.region, gen.slice(s![2..4, ..]));
        assert!(infill_extract(&gen, &MaskSpec { start: 3, end: 9 }, None).is_err());
    }

    #[test]
    fn branches_zero_expected_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = ConditioningBundle {
            h_m: standard_normal(4, 3, &mut rng),
            text_pad: standard_normal(4, 2, &mut rng),
            text_ca: standard_normal(4, 2, &mut rng),
            x_lip: standard_normal(4, 5, &mut rng),
            h_text: standard_normal(2, 3, &mut rng),
            mask: None,
        };
        assert_eq!(apply_branch(&b, ConditionBranch::Full), b);
        let ac = apply_branch(&b, ConditionBranch::AcousticOnly);
        assert_eq!(ac.h_m, b.h_m);
        assert_eq!(ac.x_lip, b.x_lip);
        assert!(ac
            .text_pad
            .iter()
            .chain(&ac.text_ca)
            .chain(&ac.h_text)
            .all(|&v| v == 0.0));
        let un = apply_branch(&b, ConditionBranch::Unconditional);
        for m in [&un.h_m, &un.text_pad, &un.text_ca, &un.x_lip, &un.h_text] {
            assert!(m.iter().all(|&v| v == 0.0));
        }
        assert_eq!(apply_branch(&ac, ConditionBranch::Unconditional), un);
    }
}
