use super::*;
use crate::model::ModelConfig;

fn tiny(prior_kind: PriorKind) -> SplitModel {
    let cfg = ModelConfig {
        input_shape: [3, 8, 8],
        latent_channels: 4,
        latent_downsample: 2,
        prior_kind,
        head_width: 4,
        tail_width: 6,
        hyper_channels: 3,
        ..ModelConfig::default()
    };
    SplitModel::new(cfg, 3).unwrap()
}

fn latent(seed: u64) -> Vec<f32> {
    (0..64).map(|i| (((i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed) >> 40) % 21) as f32 - 10.3).collect()
}

#[test]
fn factorized_roundtrip() {
    let tables = CdfTable::logistic(&[0.0, 1.0], &[1.0, 3.0]).unwrap();
    let z = QuantizedLatent::new([2, 2, 3], vec![0, 1, -1, 127, -127, 5, 2, 2, 2, 0, -3, 9]).unwrap();
    let bs = encode(&z, &tables).unwrap();
    let back = Bitstream::from_bytes(&bs.to_bytes().unwrap()).unwrap();
    assert_eq!(decode(&back, &tables).unwrap(), z);
}

#[test]
fn empty_latent_is_header_only() {
    let tables = CdfTable::logistic(&[], &[]).unwrap();
    let z = QuantizedLatent::new([0, 0, 0], vec![]).unwrap();
    let bs = encode(&z, &tables).unwrap();
    assert_eq!(bs.payload_len(), 0);
    assert_eq!(bs.coded_size_bytes(), bs.header_len());
}

#[test]
fn channel_mismatch_is_rejected() {
    let tables = CdfTable::logistic(&[0.0], &[1.0]).unwrap();
    let z = QuantizedLatent::new([2, 1, 1], vec![0, 0]).unwrap();
    assert!(encode(&z, &tables).is_err());
}

#[test]
fn codec_roundtrips_both_priors() {
    for kind in [PriorKind::Fp, PriorKind::Mshp] {
        let model = tiny(kind);
        let codec = Codec::new(&model).unwrap();
        for seed in 0..5 {
            let coded = codec.encode(&latent(seed)).unwrap();
            let bytes = coded.bitstream.to_bytes().unwrap();
            assert_eq!(bytes.len(), coded.bitstream.coded_size_bytes());
            let decoded = codec.decode(&Bitstream::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(decoded, coded.z_hat, "{kind}");
            let payload_bits = coded.bitstream.payload_len() as f64 * 8.0;
            assert!(payload_bits <= coded.table_bits + 64.0, "{payload_bits} vs {}", coded.table_bits);
        }
    }
}

#[test]
fn hyperprior_size_is_additive() {
    let model = tiny(PriorKind::Mshp);
    let coded = Codec::new(&model).unwrap().encode(&latent(1)).unwrap();
    let bs = &coded.bitstream;
    assert_eq!(bs.payloads.len(), 2);
    assert_eq!(bs.coded_size_bytes(), bs.header_len() + bs.payloads[0].len() + bs.payloads[1].len());
}

#[test]
fn flipped_payload_byte_never_decodes_to_the_same_latent() {
    let model = tiny(PriorKind::Fp);
    let codec = Codec::new(&model).unwrap();
    let coded = codec.encode(&latent(7)).unwrap();
    let payload = coded.bitstream.payloads[0].clone();
    for i in 0..payload.len() {
        for bit in 0..8 {
            let mut bs = coded.bitstream.clone();
            bs.payloads[0][i] ^= 1 << bit;
            if let Ok(z) = codec.decode(&bs) {
                assert_ne!(z, coded.z_hat);
            }
        }
    }
}

#[test]
fn tables_are_deterministic() {
    let model = tiny(PriorKind::Fp);
    assert_eq!(build_cdf_tables(&model).unwrap(), build_cdf_tables(&model).unwrap());
}
