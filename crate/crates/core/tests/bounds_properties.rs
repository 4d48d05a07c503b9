mod common;

use framequant::bounds::{
    fnn_bound, operator_norm, residual_bound, safe_norm, FnnVariant, LayerStats, NORM_MAX_ITERS, NORM_TOL,
};
use framequant::network::{Layer, QuantizedLayer};
use framequant::quantizer::{quantize_network, QuantizationConfig};
use framequant::{Activation, Model, QuantizedModel, StepPolicy};
use proptest::prelude::*;

fn stats(model: &Model, qm: &QuantizedModel) -> Vec<LayerStats> {
    model
        .layers()
        .iter()
        .zip(qm.layers())
        .map(|(l, q)| match (l, q) {
            (Layer::Affine { weight, .. }, QuantizedLayer::Affine(q)) => LayerStats::from_quantized(weight, q).unwrap(),
            _ => unreachable!(),
        })
        .collect()
}

fn max_error(model: &Model, qm: &QuantizedModel, seed: u64, dim: usize) -> Vec<(f64, f64)> {
    let fq = qm.reconstruct();
    common::inputs(&mut common::rng(seed ^ 0x5eed), 50, dim)
        .into_iter()
        .map(|x| ((model.forward(&x).unwrap() - fq.forward(&x).unwrap()).norm(), x.norm()))
        .collect()
}

fn delta() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fnn_error_dominated(
        widths in prop::collection::vec(3usize..12, 2..5),
        gain in 0.5f64..2.0,
        delta in delta(),
        n_extra in 0usize..200,
        seed in any::<u64>(),
        leaky in any::<bool>(),
    ) {
        let mut rng = common::rng(seed);
        let act = if leaky { Activation::LeakyRelu { alpha: 0.2 } } else { Activation::Relu };
        let model = common::random_fnn(&mut rng, &widths, gain, act);
        let n = widths.iter().max().unwrap() + n_extra;
        let cfg = QuantizationConfig::harmonic(&model, n, StepPolicy::Step(delta), false);
        let qm = quantize_network(&model, &cfg).unwrap();
        let s = stats(&model, &qm);
        let general = fnn_bound(&s, act.lipschitz(), 1.0, FnnVariant::General).unwrap();
        let harmonic = fnn_bound(&s, act.lipschitz(), 1.0, FnnVariant::Harmonic).unwrap();
        for (err, norm) in max_error(&model, &qm, seed, widths[0]) {
            prop_assert!(err <= general * norm + 1e-12);
            prop_assert!(err <= harmonic * norm + 1e-12);
        }
    }

    #[test]
    fn same_width_error_dominated(
        m in 3usize..8,
        depth in 1usize..4,
        out in 1usize..8,
        gain in 1.0f64..3.0,
        delta in delta(),
        n_extra in 0usize..300,
        seed in any::<u64>(),
    ) {
        let mut rng = common::rng(seed);
        let mut widths = vec![m; depth + 1];
        widths.push(out);
        let model = common::random_fnn(&mut rng, &widths, gain, Activation::Relu);
        let n = m + n_extra;
        let cfg = QuantizationConfig::harmonic(&model, n, StepPolicy::Step(delta), true);
        let qm = quantize_network(&model, &cfg).unwrap();
        let s = stats(&model, &qm);
        let general = fnn_bound(&s, 1.0, 1.0, FnnVariant::General).unwrap();
        let same = fnn_bound(&s, 1.0, 1.0, FnnVariant::SameWidth).unwrap();
        prop_assert!(general <= same * (1.0 + 1e-9));
        let simplified = fnn_bound(&s, 1.0, 1.0, FnnVariant::Simplified).ok();
        for (err, norm) in max_error(&model, &qm, seed, m) {
            prop_assert!(err <= same * norm + 1e-12);
            if let Some(b) = simplified {
                prop_assert!(err <= b * norm + 1e-12);
            }
        }
    }

    #[test]
    fn residual_error_dominated(
        k in 3usize..10,
        blocks in 1usize..4,
        gain in 0.3f64..1.5,
        delta in delta(),
        n_extra in 0usize..200,
        seed in any::<u64>(),
    ) {
        let mut rng = common::rng(seed);
        let model = common::random_resnet(&mut rng, k, blocks, gain);
        let n = k + n_extra;
        let cfg = QuantizationConfig::harmonic(&model, n, StepPolicy::Step(delta), false);
        let qm = quantize_network(&model, &cfg).unwrap();
        let lambda = model
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Residual { first, second, .. } => safe_norm(first).max(safe_norm(second)),
                _ => unreachable!(),
            })
            .fold(0.0, f64::max);
        let unit = residual_bound(lambda, delta, k, n, blocks, 1.0).unwrap();
        prop_assert!(residual_bound(lambda, delta, k, n, blocks + 1, 1.0).unwrap() > unit);
        for (err, norm) in max_error(&model, &qm, seed, k) {
            prop_assert!(err <= unit * norm + 1e-12);
        }
    }

    #[test]
    fn bounds_shrink_with_n_and_scale_with_inputs(
        widths in prop::collection::vec(3usize..12, 2..5),
        delta in delta(),
        n in 12usize..400,
        scale in 0.1f64..10.0,
        seed in any::<u64>(),
    ) {
        let mut rng = common::rng(seed);
        let model = common::random_fnn(&mut rng, &widths, 1.0, Activation::Relu);
        let quantize = |n: usize| {
            let cfg = QuantizationConfig::harmonic(&model, n, StepPolicy::Step(delta), false);
            stats(&model, &quantize_network(&model, &cfg).unwrap())
        };
        let (a, b) = (quantize(n), quantize(2 * n));
        for v in [FnnVariant::General, FnnVariant::Harmonic] {
            let at_n = fnn_bound(&a, 1.0, 1.0, v).unwrap();
            prop_assert!(fnn_bound(&b, 1.0, 1.0, v).unwrap() < at_n);
            let scaled = fnn_bound(&a, 1.0, scale, v).unwrap();
            prop_assert!((scaled - scale * at_n).abs() <= 1e-12 * scaled);
        }
    }

    #[test]
    fn operator_norm_matches_svd(rows in 1usize..=64, cols in 1usize..=64, seed in any::<u64>()) {
        let w = common::gaussian_matrix(&mut common::rng(seed), rows, cols, 1.0);
        let oracle = common::svd_norm(&w);
        let est = operator_norm(&w, NORM_TOL, NORM_MAX_ITERS);
        prop_assert!((est - oracle).abs() <= 1e-8 * oracle, "{} vs {}", est, oracle);
        prop_assert!(safe_norm(&w) >= oracle);
    }
}

#[test]
fn harmonic_layer_term_is_inverse_in_n() {
    let mut rng = common::rng(77);
    let model = common::random_fnn(&mut rng, &[5, 4, 3], 1.0, Activation::Relu);
    let unit = |n: usize| {
        let cfg = QuantizationConfig::harmonic(&model, n, StepPolicy::Step(0.125), false);
        let s = stats(&model, &quantize_network(&model, &cfg).unwrap());
        fnn_bound(&s[..1], 1.0, 1.0, FnnVariant::Harmonic).unwrap()
    };
    for n in [8usize, 50, 300] {
        assert!((unit(n) / unit(2 * n) - 2.0).abs() < 1e-12);
    }
}

#[test]
fn simplified_bound_applies_past_threshold() {
    let mut rng = common::rng(91);
    let model = common::random_fnn(&mut rng, &[3, 3, 3, 2], 6.0, Activation::Relu);
    let cfg = QuantizationConfig::harmonic(&model, 64, StepPolicy::Step(1.0 / 16.0), true);
    let qm = quantize_network(&model, &cfg).unwrap();
    let s = stats(&model, &qm);
    let simplified = fnn_bound(&s, 1.0, 1.0, FnnVariant::Simplified).unwrap();
    for (err, norm) in max_error(&model, &qm, 91, 3) {
        assert!(err <= simplified * norm);
    }
    let coarse = QuantizationConfig::harmonic(&model, 3, StepPolicy::Step(4.0), true);
    let qc = quantize_network(&model, &coarse).unwrap();
    assert!(fnn_bound(&stats(&model, &qc), 1.0, 1.0, FnnVariant::Simplified).is_err());
}
