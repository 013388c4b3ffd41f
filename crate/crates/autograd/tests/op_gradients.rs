//! Every differentiable op against central finite differences.

use cosync_autograd::gradcheck::{check_input, check_params};
use cosync_autograd::{Graph, Mat, ParamStore, Var};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const FLOOR: f64 = 1e-6;

fn randn(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
}

/// Reduces any node to a scalar through a fixed random projection so every
/// output entry contributes a distinct weight.
fn project(g: &mut Graph<'_>, y: Var, seed: u64) -> Var {
    let (r, c) = g.shape(y);
    let w = g.constant(randn(r, c, seed));
    let p = g.mul(y, w);
    g.sum(p)
}

fn check_unary(name: &str, x: Mat, op: impl Fn(&mut Graph<'_>, Var) -> Var) {
    let report = check_input(
        &x,
        |g, v| {
            let y = op(g, v);
            project(g, y, 99)
        },
        H,
        FLOOR,
    );
    assert!(report.passes(TOL), "{name}: {report:?}");
}

#[test]
fn elementwise_ops() {
    let x = randn(4, 5, 1);
    check_unary("silu", x.clone(), |g, v| g.silu(v));
    check_unary("gelu", x.clone(), |g, v| g.gelu(v));
    check_unary("mish", x.clone(), |g, v| g.mish(v));
    check_unary("square", x.clone(), |g, v| g.square(v));
    check_unary("scale", x.clone(), |g, v| g.scale(v, -2.5));
    check_unary("add_scalar", x.clone(), |g, v| g.add_scalar(v, 3.0));
    check_unary("transpose", x, |g, v| g.transpose(v));
}

#[test]
fn row_ops() {
    let x = randn(3, 6, 2);
    check_unary("softmax", x.clone(), |g, v| g.softmax_rows(v));
    check_unary("log_softmax", x.clone(), |g, v| g.log_softmax_rows(v));
    check_unary("layer_norm", x.clone(), |g, v| g.layer_norm_rows(v, 1e-6));
    check_unary("l2_normalize", x.clone(), |g, v| g.l2_normalize_rows(v));
    check_unary("sum_rows", x.clone(), |g, v| g.sum_rows(v));
    check_unary("mean", x.clone(), |g, v| g.mean(v));
    check_unary("gather", x.clone(), |g, v| g.gather_rows(v, &[2, 0, 0, 1, 2]));
    check_unary("slice_cols", x.clone(), |g, v| g.slice_cols(v, 1, 4));
    check_unary("slice_rows", x.clone(), |g, v| g.slice_rows(v, 1, 3));
    check_unary("pick", x.clone(), |g, v| g.pick(v, &[(0, 0), (1, 3), (1, 3), (2, 5)]));
    check_unary("concat", x, |g, v| {
        let a = g.slice_cols(v, 0, 2);
        let b = g.square(v);
        let c = g.concat_cols(&[b, a, v]);
        let top = g.slice_rows(c, 0, 1);
        g.concat_rows(&[c, top])
    });
}

#[test]
fn binary_and_broadcast_ops() {
    let mut store = ParamStore::new();
    let a = store.add("a", randn(4, 3, 3));
    let b = store.add("b", randn(3, 5, 4));
    let c = store.add("c", randn(4, 3, 5));
    let row = store.add("row", randn(1, 3, 6));
    let col = store.add("col", randn(4, 1, 7));
    let report = check_params::<_, ()>(
        &mut store,
        |g| {
            let (a, b, c, row, col) = (g.param(a), g.param(b), g.param(c), g.param(row), g.param(col));
            let ab = g.matmul(a, b);
            let ac_t = g.matmul_nt(a, c);
            let s = g.add(a, c);
            let d = g.sub(s, a);
            let m = g.mul(d, c);
            let r1 = g.add_row(m, row);
            let r2 = g.mul_row(r1, row);
            let r3 = g.mul_col(r2, col);
            let p1 = project(g, ab, 11);
            let p2 = project(g, ac_t, 12);
            let p3 = project(g, r3, 13);
            let t = g.add(p1, p2);
            Ok(g.add(t, p3))
        },
        H,
        FLOOR,
    )
    .unwrap();
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn conv1d_all_geometries() {
    for &(groups, stride, kernel, padding) in &[(1, 1, 3, 1), (2, 2, 3, 1), (4, 1, 5, 2), (1, 2, 2, 0)] {
        let mut store = ParamStore::new();
        let (cin, cout) = (4, 8);
        let x = store.add("x", randn(9, cin, 20));
        let w = store.add("w", randn(cout, cin / groups * kernel, 21));
        let report = check_params::<_, ()>(
            &mut store,
            |g| {
                let (x, w) = (g.param(x), g.param(w));
                let y = g.conv1d(x, w, kernel, stride, padding, groups);
                let y = g.mish(y);
                Ok(project(g, y, 22))
            },
            H,
            FLOOR,
        )
        .unwrap();
        assert!(report.passes(TOL), "groups={groups} stride={stride}: {report:?}");
    }
}

#[test]
fn ctc_through_log_softmax() {
    let x = randn(6, 4, 30);
    let report = check_input(
        &x,
        |g, v| {
            let lp = g.log_softmax_rows(v);
            g.ctc_loss(lp, &[1, 3, 3], 0).unwrap()
        },
        H,
        FLOOR,
    );
    assert!(report.passes(TOL), "{report:?}");
}
