//! Central finite-difference verification of tape gradients.

use crate::{Graph, ParamId, ParamStore, Var};

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Parameter name and flat index of the entry with the largest relative error.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Relative error with a floor on the denominator so entries whose true
/// gradient is (numerically) zero are judged on absolute error instead.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `d f / d θ` for every entry of every parameter in `store`.
///
/// `f` must build a scalar objective on a fresh graph and be deterministic.
pub fn check_params<F, E>(store: &mut ParamStore, f: F, h: f64, floor: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, E>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    check_subset(store, &ids, f, h, floor)
}

/// Same as [`check_params`] restricted to `ids`.
pub fn check_subset<F, E>(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: F,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, E>,
{
    let analytic: Vec<(ParamId, crate::Mat)> = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        let grads = g.backward(out);
        ids.iter()
            .map(|&id| {
                let grad = grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| crate::Mat::zeros(store.get(id).dim()));
                (id, grad)
            })
            .collect()
    };

    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        Ok(g.scalar(out))
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
    };
    for (id, grad) in analytic {
        let n = store.get(id).len();
        for flat in 0..n {
            let orig = store.get(id).as_slice().expect("standard layout")[flat];
            store.get_mut(id).as_slice_mut().expect("standard layout")[flat] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).as_slice_mut().expect("standard layout")[flat] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).as_slice_mut().expect("standard layout")[flat] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.as_slice().expect("standard layout")[flat];
            let rel = relative_error(a, numeric, floor);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel >= report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.name(id).to_string(), flat));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Checks the gradient with respect to a free input matrix.
pub fn check_input<F>(x: &crate::Mat, f: F, h: f64, floor: f64) -> GradCheckReport
where
    F: Fn(&mut Graph<'_>, Var) -> Var,
{
    let store = ParamStore::new();
    let analytic = {
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let out = f(&mut g, xv);
        let grads = g.backward(out);
        grads.wrt(xv).cloned().unwrap_or_else(|| crate::Mat::zeros(x.dim()))
    };
    let eval = |m: crate::Mat| {
        let mut g = Graph::new(&store);
        let xv = g.input(m);
        let out = f(&mut g, xv);
        g.scalar(out)
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
    };
    let mut probe = x.as_standard_layout().into_owned();
    for flat in 0..probe.len() {
        let orig = probe.as_slice().unwrap()[flat];
        probe.as_slice_mut().unwrap()[flat] = orig + h;
        let plus = eval(probe.clone());
        probe.as_slice_mut().unwrap()[flat] = orig - h;
        let minus = eval(probe.clone());
        probe.as_slice_mut().unwrap()[flat] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.as_standard_layout()[[flat / x.ncols(), flat % x.ncols()]];
        let rel = relative_error(a, numeric, floor);
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        if rel >= report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some(("input".to_string(), flat));
        }
        report.checked += 1;
    }
    report
}
