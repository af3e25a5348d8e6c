//! Per-round additive masks derived from a client seed.
//!
//! `G(seed, t)` is a ChaCha20 stream keyed by the seed with stream id `t`.
//! Coordinate `j` reads words `j*w .. (j+1)*w` of that stream, so any block
//! of coordinates can be produced independently.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::codec::{self, Reader};
use crate::encoding::{Modulus, QuantizedVector};
use crate::error::Result;

#[derive(Clone, PartialEq, Eq)]
pub struct MaskSeed {
    pub client_id: u32,
    pub seed: [u8; 32],
}

impl std::fmt::Debug for MaskSeed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MaskSeed {{ client_id: {}, .. }}", self.client_id)
    }
}

impl MaskSeed {
    pub fn write_to(&self, out: &mut Vec<u8>) {
        codec::put_u32(out, self.client_id);
        out.extend_from_slice(&self.seed);
    }

    pub fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        let client_id = r.u32()?;
        let seed = r.take(32)?.try_into().unwrap();
        Ok(MaskSeed { client_id, seed })
    }
}

fn words_per_coordinate(q: Modulus) -> usize {
    match q {
        Modulus::PowerOfTwo(b) if b <= 64 => 1,
        _ => 2,
    }
}

/// Residues `start .. start + len` of the round-`round` mask.
pub fn derive_mask_block(seed: &MaskSeed, round: u32, start: usize, len: usize, q: Modulus) -> Vec<u128> {
    let w = words_per_coordinate(q);
    let mut rng = ChaCha20Rng::from_seed(seed.seed);
    rng.set_stream(round as u64);
    // word_pos counts 32-bit words
    rng.set_word_pos((start * w * 2) as u128);
    (0..len)
        .map(|_| {
            let lo = rng.next_u64() as u128;
            let raw = if w == 2 { lo | ((rng.next_u64() as u128) << 64) } else { lo };
            q.reduce(raw)
        })
        .collect()
}

/// The full d-dimensional mask for `round`.
///
/// For q = 2^κ2 the reduction is truncation, so residues are exactly
/// uniform. For general q the 128-bit reduction has bias below q / 2^128.
pub fn derive_mask(seed: &MaskSeed, round: u32, d: usize, q: Modulus) -> QuantizedVector {
    QuantizedVector::from_reduced(derive_mask_block(seed, round, 0, d, q), q)
}

/// `(g + r) mod q`.
pub fn apply_mask(g: &QuantizedVector, r: &QuantizedVector) -> Result<QuantizedVector> {
    g.add(r)
}

/// `(m - r) mod q`.
pub fn remove_mask(m: &QuantizedVector, r: &QuantizedVector) -> Result<QuantizedVector> {
    m.sub(r)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn unmask_inverts_mask(seed: [u8; 32], round: u32, g in proptest::collection::vec(any::<u64>(), 1..64)) {
            let q = Modulus::PowerOfTwo(64);
            let s = MaskSeed { client_id: 1, seed };
            let g = QuantizedVector::new(g.into_iter().map(u128::from).collect(), q).unwrap();
            let r = derive_mask(&s, round, g.dim(), q);
            prop_assert_eq!(remove_mask(&apply_mask(&g, &r).unwrap(), &r).unwrap(), g);
        }

        #[test]
        fn blocks_agree_with_full_mask(seed: [u8; 32], round: u32, start in 0usize..50, len in 0usize..50, bits in prop::sample::select(vec![16u32, 64, 90, 128])) {
            let q = Modulus::PowerOfTwo(bits);
            let s = MaskSeed { client_id: 3, seed };
            let full = derive_mask(&s, round, start + len, q);
            prop_assert_eq!(&derive_mask_block(&s, round, start, len, q)[..], &full.residues()[start..]);
        }
    }
}
