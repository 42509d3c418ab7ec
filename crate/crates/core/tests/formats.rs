//! Binary formats: exact round trips and rejection of damaged input.

use edgeai::data::{decode_dataset, encode_dataset, gen_shapes, MotifSet, ShapesConfig};
use edgeai::zoo::{decode_model, encode_model, plain_cnn_bn, InputShape};
use edgeai::Model;
use proptest::prelude::*;

fn dataset_bytes() -> Vec<u8> {
    let cfg = ShapesConfig { size: 8, ..ShapesConfig::new(MotifSet::Primary, 3, 2, 0.1, 9) };
    encode_dataset(&gen_shapes(&cfg).unwrap()).unwrap()
}

fn model_bytes() -> Vec<u8> {
    let spec = plain_cnn_bn(InputShape::new(3, 8, 8), 3, &[(4, 2)]);
    encode_model(&Model::<f32>::build(&spec, 2).unwrap())
}

#[test]
fn dataset_round_trip_is_identity() {
    let b = dataset_bytes();
    let ds = decode_dataset(&b).unwrap();
    assert_eq!(encode_dataset(&ds).unwrap(), b);
}

#[test]
fn model_round_trip_is_identity() {
    let b = model_bytes();
    let m = decode_model::<f32>(&b).unwrap();
    assert_eq!(encode_model(&m), b);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, ..ProptestConfig::default() })]

    #[test]
    fn dataset_byte_flip_rejected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut b = dataset_bytes();
        let i = pos.index(b.len());
        b[i] ^= 1 << bit;
        prop_assert!(decode_dataset(&b).is_err(), "flip at byte {} accepted", i);
    }

    #[test]
    fn dataset_truncation_rejected(cut in any::<prop::sample::Index>()) {
        let b = dataset_bytes();
        let n = cut.index(b.len());
        prop_assert!(decode_dataset(&b[..n]).is_err());
    }

    #[test]
    fn dataset_trailing_bytes_rejected(extra in prop::collection::vec(any::<u8>(), 1..16)) {
        let mut b = dataset_bytes();
        b.extend(extra);
        prop_assert!(decode_dataset(&b).is_err());
    }

    #[test]
    fn random_bytes_never_decode(mut b in prop::collection::vec(any::<u8>(), 0..256), magic in any::<bool>()) {
        if magic && b.len() >= 4 {
            b[..4].copy_from_slice(b"EDAI");
        }
        prop_assert!(decode_dataset(&b).is_err());
    }

    #[test]
    fn model_byte_flip_rejected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut b = model_bytes();
        let i = pos.index(b.len());
        b[i] ^= 1 << bit;
        prop_assert!(decode_model::<f32>(&b).is_err(), "flip at byte {} accepted", i);
    }
}
