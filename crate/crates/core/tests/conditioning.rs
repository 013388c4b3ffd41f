use cosync::autograd::{Graph, ParamStore};
use cosync::conditioning::*;
use cosync::data_io::{generate_synthetic_corpus, SyntheticTaskSpec};
use cosync::flow::standard_normal;
use cosync::model::ModelConfig;
use cosync::nn::{Init, Initializer};
use cosync::Error;
use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> ConditioningConfig {
    ConditioningConfig {
        mel_bins: 6,
        vocab_size: 5,
        text_dim: 8,
        text_blocks: 1,
        text_kernel: 3,
        pad_dim: 4,
        ca_dim: 6,
        visual_dim: 3,
        model_dim: 10,
        lip_kernel: 3,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masking_is_idempotent_and_complementary(frames in 2usize..80, bins in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = standard_normal(frames, bins, &mut rng);
        let mask = sample_mask(frames, &mut rng).unwrap();
        let h = apply_mask(&m, Some(&mask)).unwrap();
        prop_assert_eq!(&apply_mask(&h, Some(&mask)).unwrap(), &h);
        let restored = &h + &(&m * &mask.indicator(frames));
        prop_assert_eq!(&restored, &m);
        prop_assert!(h.slice(s![mask.start..mask.end, ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampled_spans_cover_at_least_seventy_percent(frames in 2usize..500, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = sample_mask(frames, &mut rng).unwrap();
        prop_assert!(mask.start < mask.end && mask.end <= frames);
        let f = mask.fraction(frames);
        prop_assert!((0.70..=1.00).contains(&f), "fraction {}", f);
    }

    #[test]
    fn cross_expansion_weights_are_distributions(tokens in 1usize..10, frames in 1usize..40, seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let cross = TextCrossExpansion::new(&mut store, &mut init, 8, 6);
        let mut g = Graph::new(&store);
        let h = g.constant(init.matrix(tokens, 8, Init::Normal(1.0)));
        let out = cross.forward(&mut g, h, frames).unwrap();
        prop_assert_eq!(g.shape(out.out), (frames, 6));
        for row in g.value(out.weights).rows() {
            prop_assert!(row.iter().all(|&w| w >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn mask_sequence_is_reproducible() {
    let draw = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        (0..50).map(|_| sample_mask(73, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(), draw());
}

#[test]
fn mask_outside_the_sequence_is_rejected() {
    let m = Array2::<f64>::ones((5, 2));
    let bad = MaskSpec { start: 2, end: 7 };
    assert!(matches!(apply_mask(&m, Some(&bad)), Err(Error::MaskOutOfBounds { .. })));
    assert_eq!(apply_mask(&m, None).unwrap(), m);
}

#[test]
fn upsampled_lip_length_matches_for_random_pairs() {
    let cfg = small_cfg();
    let mut store = ParamStore::new();
    let mut init = Initializer::new(5);
    let up = LipUpsampler::new(&mut store, &mut init, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    use rand::Rng;
    for _ in 0..50 {
        let frames = rng.random_range(1..120);
        let video = rng.random_range(1..=frames);
        let mut g = Graph::new(&store);
        let raw = g.constant(standard_normal(video, cfg.visual_dim, &mut rng));
        let x = up.forward(&mut g, raw, frames, None).unwrap();
        assert_eq!(g.shape(x), (frames, cfg.model_dim));
    }
}

#[test]
fn nearest_neighbour_indices_are_monotone_and_cover_every_video_frame() {
    for video in 1..20 {
        for frames in video..60 {
            let idx = nearest_indices(video, frames);
            assert_eq!(idx.len(), frames);
            assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(idx[0], 0);
            assert_eq!(*idx.last().unwrap(), video - 1);
            let mut seen = idx.clone();
            seen.dedup();
            assert_eq!(seen.len(), video);
        }
    }
}

#[test]
fn every_bundle_stream_shares_the_frame_count() {
    let cfg = ModelConfig::toy();
    let cond = {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(1);
        let c = Conditioner::new(&mut store, &mut init, &cfg.conditioning()).unwrap();
        (c, store)
    };
    let spec = SyntheticTaskSpec {
        n_utterances: 6,
        ..SyntheticTaskSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for rec in generate_synthetic_corpus(&spec).unwrap() {
        let inputs = CondInputs::from_record(&rec);
        let mask = sample_mask(inputs.frames(), &mut rng).unwrap();
        let b = cond.0.bundle(&cond.1, &inputs, Some(mask)).unwrap();
        b.check_lengths().unwrap();
        let l = rec.frames();
        assert_eq!(b.h_m.dim(), (l, cfg.mel_bins));
        assert_eq!(b.text_pad.dim(), (l, cfg.pad_dim));
        assert_eq!(b.text_ca.dim(), (l, cfg.ca_dim));
        assert_eq!(b.x_lip.dim(), (l, cfg.d));
        assert_eq!(b.h_text.dim(), (rec.text_ids.len(), cfg.text_dim));
        // Lip features only fill the target span.
        for i in 0..l {
            let zero = b.x_lip.row(i).iter().all(|&v| v == 0.0);
            assert_eq!(zero, !mask.contains(i), "frame {i}");
        }
    }
}

#[test]
fn bundle_length_mismatch_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = ConditioningBundle {
        h_m: standard_normal(5, 2, &mut rng),
        text_pad: standard_normal(5, 2, &mut rng),
        text_ca: standard_normal(4, 2, &mut rng),
        x_lip: standard_normal(5, 2, &mut rng),
        h_text: standard_normal(2, 2, &mut rng),
        mask: None,
    };
    assert!(b.check_lengths().is_err());
}
