mod common;

use std::sync::Arc;

use framequant::formats::{
    decode_model, decode_quantized, encode_model, encode_quantized, load_model, load_quantized, save_model,
    save_quantized, FQQ_MAGIC,
};
use framequant::quantizer::{quantize_network, FrameSpec, LayerConfig, QuantizationConfig};
use framequant::{Activation, Error, ErrorClass, Layer, Mode, Model, StepPolicy};
use proptest::prelude::*;

fn biased_resnet(seed: u64) -> Model {
    let mut rng = common::rng(seed);
    let layers = vec![
        Layer::affine(common::gaussian_matrix(&mut rng, 5, 4, 0.5), Some(common::gaussian_vector(&mut rng, 5, 0.1))),
        Layer::residual(
            common::gaussian_matrix(&mut rng, 5, 5, 0.3),
            common::gaussian_matrix(&mut rng, 5, 5, 0.3),
            Some(common::gaussian_vector(&mut rng, 5, 0.1)),
        ),
        Layer::affine(common::gaussian_matrix(&mut rng, 3, 5, 0.5), None),
    ];
    Model::new(layers, Activation::Relu).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantized_round_trip(
        k in prop::sample::select(vec![1u32, 2, 4, 8]),
        n_extra in 0usize..40,
        seed in any::<u64>(),
        last_row in any::<bool>(),
    ) {
        let model = biased_resnet(seed);
        let bits = k.trailing_zeros() + 1;
        let mut cfg = QuantizationConfig::harmonic(&model, 6 + n_extra, StepPolicy::Bits(bits), last_row);
        // One explicit frame so both frame kinds go through the file.
        let explicit = common::random_funtf(&mut common::rng(seed), 5, 6 + n_extra);
        cfg.layers[1] = LayerConfig {
            frame: FrameSpec::Explicit(Arc::new(explicit)),
            policy: StepPolicy::Bits(bits),
            mode: Mode::Column,
        };
        let qm = quantize_network(&model, &cfg).unwrap();
        let bytes = encode_quantized(&qm).unwrap();
        prop_assert_eq!(&bytes[..4], FQQ_MAGIC);
        let back = decode_quantized(&bytes).unwrap();
        prop_assert_eq!(&back, &qm);
        prop_assert_eq!(encode_quantized(&back).unwrap(), bytes);
        let x = common::gaussian_vector(&mut common::rng(seed), 4, 1.0);
        prop_assert_eq!(back.forward(&x).unwrap(), qm.forward(&x).unwrap());
    }

    #[test]
    fn quantized_truncation_names_a_layer(seed in any::<u64>(), cut in 1usize..400) {
        let model = biased_resnet(seed);
        let cfg = QuantizationConfig::harmonic(&model, 9, StepPolicy::Bits(3), false);
        let bytes = encode_quantized(&quantize_network(&model, &cfg).unwrap()).unwrap();
        let header = 8 + u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let len = bytes.len().saturating_sub(cut).max(header);
        prop_assume!(len < bytes.len());
        let err = decode_quantized(&bytes[..len]).unwrap_err();
        prop_assert_eq!(err.class(), ErrorClass::Data);
        prop_assert!(matches!(err, Error::Layer { .. }), "{}", err);
        prop_assert!(err.to_string().contains("truncated"), "{}", err);
    }
}

#[test]
fn model_round_trip_with_residual_and_bias() {
    let model = biased_resnet(3).with_metadata(Some(serde_json::json!({"source": "test"})));
    let bytes = encode_model(&model).unwrap();
    let back = decode_model(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(encode_model(&back).unwrap(), bytes);
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = biased_resnet(4);
    let path = dir.path().join("m.fqw");
    save_model(&model, &path).unwrap();
    assert_eq!(load_model(&path).unwrap(), model);

    let cfg = QuantizationConfig::harmonic(&model, 16, StepPolicy::Bits(2), true);
    let qm = quantize_network(&model, &cfg).unwrap();
    let qpath = dir.path().join("m.fqq");
    save_quantized(&qm, &qpath).unwrap();
    assert_eq!(load_quantized(&qpath).unwrap(), qm);
}

#[test]
fn wrong_magic_and_missing_file() {
    let model = biased_resnet(5);
    let mut bytes = encode_model(&model).unwrap();
    assert!(matches!(decode_quantized(&bytes), Err(Error::Format(_))));
    bytes[3] = b'9';
    assert!(matches!(decode_model(&bytes), Err(Error::Format(_))));
    let err = load_model("/nonexistent/model.fqw").unwrap_err();
    assert_eq!(err.class(), ErrorClass::Data);
    assert!(err.to_string().contains("/nonexistent/model.fqw"));
}

#[test]
fn trailing_bytes_are_rejected() {
    let model = biased_resnet(6);
    let mut bytes = encode_model(&model).unwrap();
    bytes.push(0);
    assert!(matches!(decode_model(&bytes), Err(Error::Format(_))));
}
