#![allow(clippy::unnecessary_cast)]

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use aapose::attention::{attention_probabilities, flatten_spatial, AttentionParams, AttentionSpec};
use aapose::blocks::{AaInvertedBottleneck, BlockConfig, DenseBlock, KEYPOINTS};
use aapose::blurpool::{make_blur_filter, shift_equivariance_deviation, Downsample, Pooling};
use aapose::config::NetworkConfig;
use aapose::layer::Layer;
use aapose::metrics::{auc, epe, format_record, parse_records, pck_curve, pck_thresholds, EvalRecord, KeypointSet};
use aapose::ops::Activation;
use aapose::training::{coordinate_loss, cyclical_lr, sgd_step, LrSchedule, Loss};
use aapose::{Shape, Tensor};

use common::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn keypoints(max: f64) -> impl Strategy<Value = KeypointSet> {
    prop::collection::vec((0.0..max, 0.0..max), KEYPOINTS)
        .prop_map(|v| KeypointSet::new(v.into_iter().map(|(x, y)| [x, y]).collect()).expect("21 points"))
}

fn record() -> impl Strategy<Value = EvalRecord> {
    (keypoints(64.0), keypoints(64.0), 1.0..50.0f64).prop_map(|(p, g, s)| {
        EvalRecord::new("r", p, g).with_norm_scale(s).expect("positive")
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lr_stays_in_range_and_repeats(k in 0u32..100_000, lo in 1e-6..1e-2f64, span in 0.0..1.0f64, step in 1u32..20) {
        let s = LrSchedule { lr_min: lo, lr_max: lo + span, stepsize: step as f64 };
        // Dyadic times keep t and t + 2s exactly representable.
        let t = k as f64 / 64.0;
        let lr = cyclical_lr(t, &s);
        prop_assert!(lr >= s.lr_min && lr <= s.lr_max);
        prop_assert_eq!(cyclical_lr(t + 2.0 * s.stepsize, &s), lr);
    }

    #[test]
    fn blur_kernels_are_symmetric(n in 1usize..=8) {
        let f = make_blur_filter(n).unwrap();
        let m = f.m();
        let mut sum = 0.0;
        for r in 0..m {
            for c in 0..m {
                let v = f.at(r, c);
                prop_assert_eq!(v, f.at(c, r));
                prop_assert_eq!(v, f.at(m - 1 - r, c));
                prop_assert_eq!(v, f.at(r, m - 1 - c));
                sum += v as f64;
            }
        }
        prop_assert!((sum - 1.0).abs() < 1e-9);
        let tri: Vec<f64> = (0..m).map(|i| (i.min(m - 1 - i) + 1) as f64).collect();
        let boxed: Vec<f64> = f.box_m().iter().map(|&v| v as f64).collect();
        prop_assert_eq!(boxed, tri);
    }

    #[test]
    fn blur_pool_commutes_with_stride_multiple_shifts(seed in 0u64..1000, kh in -2i32..=2, kw in -2i32..=2, n in 1usize..=3) {
        let x = Tensor::normal(Shape::new(1, 20, 20, 2).unwrap(), 1.0, &mut rng(seed));
        let blur = Downsample::new(Pooling::Blur, n).unwrap();
        let d = shift_equivariance_deviation(&blur, &x, 2 * kh as isize, 2 * kw as isize).unwrap();
        prop_assert!(d < 1e-6, "deviation {}", d);
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..1000, h in 1usize..4, w in 1usize..4, heads in 1usize..=2) {
        let mut r = rng(seed);
        let spec = AttentionSpec { heads, ..AttentionSpec::default() };
        let p = AttentionParams::random(3, 8 * heads, &spec, h, w, &mut r).unwrap();
        let x = Tensor::normal(Shape::new(1, h, w, 3).unwrap(), 1.0, &mut r);
        for m in attention_probabilities(&flatten_spatial(&x, 0).unwrap(), &p).unwrap() {
            for i in 0..m.rows {
                let row = &m.data[i * m.cols..(i + 1) * m.cols];
                prop_assert!(row.iter().all(|&a| a >= 0.0));
                prop_assert!((row.iter().sum::<aapose::Float>() as f64 - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_loop_oracle(seed in 0u64..1000, h in 1usize..4, w in 1usize..4, f_in in 1usize..6) {
        let mut r = rng(seed);
        let spec = AttentionSpec { heads: 2, ..AttentionSpec::default() };
        let p = AttentionParams::random(f_in, 12, &spec, h, w, &mut r).unwrap();
        let x = Tensor::normal(Shape::new(1, h, w, f_in).unwrap(), 1.0, &mut r);
        let y = aapose::attention::multi_head_attention(&flatten_spatial(&x, 0).unwrap(), &p).unwrap();
        let got: Vec<Vec<f64>> = (0..y.rows)
            .map(|i| y.data[i * y.cols..(i + 1) * y.cols].iter().map(|&v| v as f64).collect())
            .collect();
        prop_assert!(max_rel_diff(&got, &attention_oracle(&x, 0, &p)) < 1e-9);
    }

    #[test]
    fn pck_is_monotone_and_auc_bounded(recs in prop::collection::vec(record(), 1..8)) {
        let th = pck_thresholds();
        let c = pck_curve(&recs, &th).unwrap();
        prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let a = auc(&c, &th).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn epe_ignores_common_translation(r in record(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let moved = EvalRecord::new("m", r.prediction.translated(dx, dy), r.ground_truth.translated(dx, dy));
        let (a, _) = epe(std::slice::from_ref(&r)).unwrap();
        let (b, _) = epe(&[moved]).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn records_survive_text_round_trip(r in record()) {
        let back = parse_records(&format_record(&r)).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(&back[0], &r);
    }

    #[test]
    fn loss_is_nonnegative_and_zero_only_on_match(p in keypoints(1.0), g in keypoints(1.0)) {
        for kind in [Loss::Mse, Loss::Mae] {
            let l = coordinate_loss(&p, &g, kind).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, p.flat() == g.flat());
            prop_assert_eq!(coordinate_loss(&g, &g, kind).unwrap(), 0.0);
        }
    }

    #[test]
    fn config_toml_round_trips(growth in 1usize..32, expansion in 1usize..8, relu in any::<bool>(), pool in 0usize..3) {
        let cfg = NetworkConfig {
            growth,
            expansion,
            activation: if relu { Activation::Relu } else { Activation::Mish },
            pooling: [Pooling::Blur, Pooling::Average, Pooling::Max][pool],
            ..NetworkConfig::tiny()
        };
        let back = NetworkConfig::from_toml_str(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zeroed_attention_is_the_plain_bottleneck(seed in 0u64..1000, c_in in 2usize..8) {
        let cfg = BlockConfig { growth: 4, expansion: 2, ..BlockConfig::default() }
            .with_attention(Some(AttentionSpec { heads: 2, ..AttentionSpec::default() }));
        let mut r = rng(seed);
        let mut aa = AaInvertedBottleneck::random(c_in, &cfg, 3, 3, &mut r).unwrap();
        aa.zero_attention();
        let x = Tensor::normal(Shape::new(2, 3, 3, c_in).unwrap(), 1.0, &mut r);
        prop_assert_eq!(aa.infer(&x).unwrap(), aa.base.infer(&x).unwrap());
    }

    #[test]
    fn dense_blocks_concatenate(seed in 0u64..1000, c_in in 1usize..6, layers in 1usize..4) {
        let cfg = BlockConfig { growth: 3, expansion: 2, ..BlockConfig::default() };
        let mut r = rng(seed);
        let blk = DenseBlock::random(c_in, layers, &cfg, 4, 4, &mut r).unwrap();
        let x = Tensor::normal(Shape::new(1, 4, 4, c_in).unwrap(), 1.0, &mut r);
        let y = blk.infer(&x).unwrap();
        prop_assert_eq!(y.shape().c, c_in + layers * 3);
        prop_assert_eq!(y.slice_channels(0, c_in).unwrap(), x);
    }

    #[test]
    fn small_sgd_step_decreases_a_quadratic(seed in 0u64..1000) {
        // f(w) = sum(w^2), gradient 2w.
        let mut layer = aapose::layer::Conv2d::new(
            aapose::ops::ConvWeights::he_uniform(1, 2, 2, false, &mut rng(seed)).unwrap(),
            1,
            aapose::ops::Padding::Same,
        );
        let f = |l: &aapose::layer::Conv2d| l.weights.kernel.data().iter().map(|w| w * w).sum::<aapose::Float>();
        let before = f(&layer);
        let g = vec![layer.weights.kernel.map(|w| 2.0 * w)];
        sgd_step(&mut layer, &g, 1e-3).unwrap();
        prop_assert!(f(&layer) < before);
    }
}
