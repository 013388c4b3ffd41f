use cosync::autograd::gradcheck::check_params;
use cosync::autograd::{Graph, Mat, ParamStore};
use cosync::backbone::*;
use cosync::flow::standard_normal;
use cosync::model::{Model, ModelConfig};
use cosync::nn::{Init, Initializer, LN_EPS};
use cosync::verify::{identity_violation, random_bundle, GRAD_CHECK_FLOOR, GRAD_CHECK_STEP, GRAD_CHECK_TOL};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn perturb(store: &mut ParamStore, std: f64, seed: u64) {
    let mut init = Initializer::new(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (r, c) = store.get(id).dim();
        *store.get_mut(id) += &init.matrix(r, c, Init::Normal(std));
    }
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        n_layers: 3,
        d: 4,
        n_heads: 1,
        phase_bounds: (1, 2),
        in_channels: 3 + 3 + 2 + 2,
        out_channels: 3,
        conv_pos_kernel: 3,
        conv_pos_groups: 2,
        text_dim: 5,
        time_freq_dim: 8,
        time_dim: 6,
        ff_mult: 2,
    }
}

#[test]
fn initialized_network_is_the_identity_on_every_length() {
    let cfg = ModelConfig::toy();
    let (model, store) = Model::new(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for frames in [7usize, 32, 257] {
        let bundle = random_bundle(&cfg, frames, 5, &mut rng);
        let x = standard_normal(frames, cfg.mel_bins, &mut rng);
        assert_eq!(
            identity_violation(&model, &store, &x, &bundle, 0.37).unwrap(),
            None,
            "L = {frames}"
        );
        let v = model.field(&store, &x, 0.37, &bundle).unwrap();
        assert_eq!(v.dim(), (frames, 100));
    }
}

#[test]
fn style_block_stub_matches_hand_computation() {
    // One head on one frame: softmax is 1, so with identity value and output
    // maps and a unit attention gate the block returns z + LN(z).
    let cfg = small_backbone();
    let d = cfg.d;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(2);
    let bb = Backbone::new(&mut store, &mut init, &cfg).unwrap();
    let block = &bb.layers[0].style;
    store
        .get_mut(block.modulation.lin.bias.unwrap())
        .slice_mut(ndarray::s![.., 2 * d..3 * d])
        .fill(1.0);
    *store.get_mut(block.attn.v.weight) = Array2::eye(d);
    *store.get_mut(block.attn.o.weight) = Array2::eye(d);

    let z = Array2::from_shape_vec((1, d), vec![0.5, -1.5, 2.0, 3.0]).unwrap();
    let mut g = Graph::new(&store);
    let zv = g.constant(z.clone());
    let temb = bb.time.forward(&mut g, 0.6).unwrap();
    let out = block.forward(&mut g, zv, temb);

    let mean = z.mean().unwrap();
    let var = z.mapv(|v| (v - mean).powi(2)).mean().unwrap();
    let oracle = z.mapv(|v| v + (v - mean) / (var + LN_EPS).sqrt());
    assert!(max_abs_diff(g.value(out), &oracle) < 1e-12);

    // A normalized input comes back doubled.
    let unit = Array2::from_shape_vec((1, d), vec![1.0, -1.0, 1.0, -1.0]).unwrap();
    let uv = g.constant(unit.clone());
    let out = block.forward(&mut g, uv, temb);
    assert!(max_abs_diff(g.value(out), &(&unit * 2.0)) < 1e-6);
}

#[test]
fn modulation_rows_depend_on_time_only() {
    let cfg = small_backbone();
    let mut store = ParamStore::new();
    let mut init = Initializer::new(3);
    let bb = Backbone::new(&mut store, &mut init, &cfg).unwrap();
    perturb(&mut store, 0.5, 3);
    let mut g = Graph::new(&store);
    let rows = |g: &mut Graph<'_>, t: f64| {
        let temb = bb.time.forward(g, t).unwrap();
        bb.layers[0]
            .style
            .modulation
            .forward(g, temb)
            .iter()
            .map(|&v| g.value(v).clone())
            .collect::<Vec<_>>()
    };
    let a = rows(&mut g, 0.2);
    assert_eq!(a.len(), 6);
    assert!(a.iter().all(|m| m.dim() == (1, cfg.d)));
    assert_eq!(a, rows(&mut g, 0.2));
    assert_ne!(a, rows(&mut g, 0.8));

    // Every frame of a constant sequence gets the same modulation, so a
    // sequence of repeated frames stays repeated through the block.
    let frame = init.matrix(1, cfg.d, Init::Normal(1.0));
    let z = g.constant(ndarray::concatenate(Axis(0), &[frame.view(), frame.view(), frame.view()]).unwrap());
    let temb = bb.time.forward(&mut g, 0.4).unwrap();
    let out = bb.layers[0].style.forward(&mut g, z, temb);
    let out = g.value(out);
    for r in 1..3 {
        assert!(out.row(r).iter().zip(out.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn zero_gates_and_values_isolate_lip_and_text() {
    let cfg = ModelConfig::tiny();
    let (model, mut store) = Model::new(&cfg, 5).unwrap();
    perturb(&mut store, 0.3, 5);
    for layer in &model.backbone.layers {
        if let Some(gate) = layer.lip_gate {
            store.get_mut(gate).fill(0.0);
        }
        if let Some(ctx) = &layer.context {
            store.get_mut(ctx.attn.v.weight).fill(0.0);
            store.get_mut(ctx.attn.v.bias.unwrap()).fill(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = random_bundle(&cfg, 9, 3, &mut rng);
    let x = standard_normal(9, cfg.mel_bins, &mut rng);
    let v0 = model.field(&store, &x, 0.5, &base).unwrap();
    assert!(v0.iter().any(|&v| v != 0.0));
    for text_len in [1, 3, 6] {
        let mut b = base.clone();
        b.x_lip = standard_normal(9, cfg.d, &mut rng) * 10.0;
        b.h_text = standard_normal(text_len, cfg.text_dim, &mut rng) * 10.0;
        let v = model.field(&store, &x, 0.5, &b).unwrap();
        assert!(max_abs_diff(&v, &v0) < 1e-12);
    }
    // Opening one gate makes the lip stream visible again.
    let gate = model.backbone.layers[cfg.p1_end].lip_gate.unwrap();
    store.get_mut(gate).fill(0.5);
    let mut b = base.clone();
    b.x_lip = standard_normal(9, cfg.d, &mut rng);
    let v = model.field(&store, &x, 0.5, &b).unwrap();
    let v_base = model.field(&store, &x, 0.5, &base).unwrap();
    assert!(max_abs_diff(&v, &v_base) > 1e-6);
}

#[test]
fn evaluations_do_not_leak_between_samples() {
    let cfg = ModelConfig::tiny();
    let (model, mut store) = Model::new(&cfg, 6).unwrap();
    perturb(&mut store, 0.3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (ba, bb) = (
        random_bundle(&cfg, 8, 2, &mut rng),
        random_bundle(&cfg, 13, 4, &mut rng),
    );
    let (xa, xb) = (
        standard_normal(8, cfg.mel_bins, &mut rng),
        standard_normal(13, cfg.mel_bins, &mut rng),
    );
    let first = model.field(&store, &xa, 0.3, &ba).unwrap();
    let _ = model.field(&store, &xb, 0.9, &bb).unwrap();
    assert_eq!(model.field(&store, &xa, 0.3, &ba).unwrap(), first);

    // Two samples recorded on one graph do not see each other either.
    let mut g = Graph::new(&store);
    let va = ba.to_vars(&mut g);
    let vb = bb.to_vars(&mut g);
    let (ga, gb) = (g.constant(xa.clone()), g.constant(xb.clone()));
    let oa = model.forward(&mut g, ga, &va, 0.3).unwrap();
    let _ = model.forward(&mut g, gb, &vb, 0.9).unwrap();
    assert_eq!(g.value(oa.v), &first);
}

#[test]
fn squared_output_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let (model, mut store) = Model::new(&cfg, 7).unwrap();
    perturb(&mut store, 0.3, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let bundle = random_bundle(&cfg, 6, 2, &mut rng);
    let x = standard_normal(6, cfg.mel_bins, &mut rng);
    let report = check_params(
        &mut store,
        |g| -> cosync::Result<_> {
            let vars = bundle.to_vars(g);
            let xv = g.constant(x.clone());
            let out = model.forward(g, xv, &vars, 0.4)?;
            let sq = g.square(out.v);
            Ok(g.sum(sq))
        },
        GRAD_CHECK_STEP,
        GRAD_CHECK_FLOOR,
    )
    .unwrap();
    assert!(
        report.passes(GRAD_CHECK_TOL),
        "{:.3e} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn context_attention_is_live_at_initialization() {
    let cfg = ModelConfig::tiny();
    let (model, store) = Model::new(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bundle = random_bundle(&cfg, 6, 3, &mut rng);
    let mut g = Graph::new(&store);
    let vars = bundle.to_vars(&mut g);
    let x = g.constant(standard_normal(6, cfg.mel_bins, &mut rng));
    let out = model.forward(&mut g, x, &vars, 0.5).unwrap();
    let z_ca = out.taps.z_ca.unwrap();
    assert_eq!(g.shape(z_ca), (6, cfg.d));
    assert!(g.value(z_ca).iter().any(|&v| v.abs() > 1e-6));
    assert_eq!(out.taps.layers.len(), cfg.n_layers);
    assert_eq!(
        out.taps.layers.iter().filter(|l| l.z_ca.is_some()).count(),
        cfg.n_layers - cfg.p2_end
    );
    assert_eq!(
        out.taps.layers.iter().filter(|l| l.z_lip.is_some()).count(),
        cfg.n_layers - cfg.p1_end
    );
}

#[test]
fn shape_errors_are_reported() {
    let cfg = ModelConfig::tiny();
    let (model, store) = Model::new(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bundle = random_bundle(&cfg, 6, 2, &mut rng);
    assert!(model
        .field(&store, &standard_normal(6, cfg.mel_bins + 1, &mut rng), 0.5, &bundle)
        .is_err());
    assert!(model
        .field(&store, &standard_normal(5, cfg.mel_bins, &mut rng), 0.5, &bundle)
        .is_err());
    assert!(model
        .field(&store, &standard_normal(6, cfg.mel_bins, &mut rng), 1.5, &bundle)
        .is_err());
    let mut bad = bundle.clone();
    bad.h_text = Array2::zeros((0, cfg.text_dim));
    assert!(model
        .field(&store, &standard_normal(6, cfg.mel_bins, &mut rng), 0.5, &bad)
        .is_err());
}

#[test]
fn phase_bounds_are_validated() {
    for (p1, p2) in [(0, 1), (2, 1), (1, 4)] {
        let cfg = BackboneConfig {
            phase_bounds: (p1, p2),
            ..small_backbone()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("phase_bounds"), "{err}");
    }
    let cfg = BackboneConfig {
        phase_bounds: (3, 3),
        ..small_backbone()
    };
    cfg.validate().unwrap();
    assert_eq!(cfg.phase_of(2), Phase::Style);
}
