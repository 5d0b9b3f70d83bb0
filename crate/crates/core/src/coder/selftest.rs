use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cross_entropy_bits, decode, encode, Bitstream, CdfTable, Codec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PriorKind, QuantizedLatent, SplitModel, SUPPORT_MAX, SUPPORT_MIN};

/// Summary of a passed [`self_test`].
#[derive(Clone, Debug, PartialEq)]
pub struct SelfTestReport {
    pub cases: usize,
    pub symbols: usize,
    pub payload_bits: f64,
    pub table_bits: f64,
    /// Largest payload overhead over the table cross-entropy of one stream.
    pub max_overhead_bits: f64,
    /// Streams with a flipped bit that were rejected or decoded differently.
    pub corruptions_caught: usize,
}

fn random_symbol(rng: &mut ChaCha8Rng) -> i32 {
    match rng.random_range(0..10) {
        0 => SUPPORT_MIN,
        1 => SUPPORT_MAX,
        2 | 3 => rng.random_range(SUPPORT_MIN..=SUPPORT_MAX),
        _ => rng.random_range(-6..=6),
    }
}

fn fail(case: usize, what: &str) -> Error {
    Error::Decode(format!("self-test case {case}: {what}"))
}

/// Randomized round-trip, tightness and corruption checks of the coder,
/// followed by codec round trips through freshly initialized models of
/// both priors. Fails on the first violated property.
pub fn self_test(cases: usize, seed: u64) -> Result<SelfTestReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SelfTestReport {
        cases,
        symbols: 0,
        payload_bits: 0.0,
        table_bits: 0.0,
        max_overhead_bits: 0.0,
        corruptions_caught: 0,
    };
    for case in 0..cases {
        let shape = [rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5)];
        let loc: Vec<f32> = (0..shape[0]).map(|_| rng.random_range(-8.0..8.0)).collect();
        let scale: Vec<f32> = (0..shape[0]).map(|_| rng.random_range(0.01..30.0)).collect();
        let tables = CdfTable::logistic(&loc, &scale)?;
        let values = (0..shape.iter().product()).map(|_| random_symbol(&mut rng)).collect();
        let z = QuantizedLatent::new(shape, values)?;

        let bs = encode(&z, &tables)?;
        let bytes = bs.to_bytes()?;
        if bytes.len() != bs.coded_size_bytes() {
            return Err(fail(case, "serialized size disagrees with the header accounting"));
        }
        if decode(&Bitstream::from_bytes(&bytes)?, &tables)? != z {
            return Err(fail(case, "round trip changed the latent"));
        }
        let plane = shape[1] * shape[2];
        let ideal = cross_entropy_bits(z.values(), &tables, |i| i / plane)?;
        let bits = bs.payload_len() as f64 * 8.0;
        if bits > ideal + 64.0 {
            return Err(fail(case, &format!("{bits} payload bits for {ideal:.1} ideal")));
        }
        report.symbols += z.len();
        report.payload_bits += bits;
        report.table_bits += ideal;
        report.max_overhead_bits = report.max_overhead_bits.max(bits - ideal);

        if !bytes.is_empty() && case % 10 == 0 {
            let mut bad = bytes.clone();
            let pos = rng.random_range(0..bad.len());
            bad[pos] ^= 1 << rng.random_range(0..8);
            let caught = match Bitstream::from_bytes(&bad) {
                Err(_) => true,
                Ok(b) => decode(&b, &tables).map_or(true, |d| d != z),
            };
            if !caught {
                return Err(fail(case, "a flipped bit was silently accepted"));
            }
            report.corruptions_caught += 1;
        }
    }

    for prior in [PriorKind::Fp, PriorKind::Mshp] {
        let cfg = ModelConfig { input_shape: [3, 16, 16], prior_kind: prior, ..ModelConfig::default() };
        let model = SplitModel::new(cfg, seed)?;
        let codec = Codec::new(&model)?;
        for case in 0..4 {
            let z: Vec<f32> = (0..model.config().latent_len()).map(|_| rng.random_range(-20.0..20.0)).collect();
            let coded = codec.encode(&z)?;
            let back = codec.decode(&Bitstream::from_bytes(&coded.bitstream.to_bytes()?)?)?;
            if back.iter().zip(&coded.z_hat).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(fail(case, &format!("{prior} codec round trip changed the latent")));
            }
        }
    }
    Ok(report)
}
