//! Typed protocol messages and their payload encodings.

use num_bigint::BigUint;

use crate::codec::{self, Reader};
use crate::encoding::{Modulus, QuantizedVector};
use crate::error::{Error, Result};
use crate::masking::MaskSeed;
use crate::paillier::{Ciphertext, PaillierPublicKey};
use crate::transport::{Frame, MessageType};

/// How S1 should rebuild the projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionDescriptor {
    Rademacher { seed: [u8; 32], k: u32, d: u32 },
    Identity { d: u32 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    InitModel { modulus: Modulus, f: u32, fw: u32, clip: f64, lr: f64, weights: Vec<f64> },
    InitProjSeed(ProjectionDescriptor),
    InitPk(PaillierPublicKey),
    SeedReg(MaskSeed),
    EncMaskPack { client_id: u32, ciphertexts: Vec<Ciphertext> },
    MaskedUpdate(QuantizedVector),
    StdGrad(QuantizedVector),
    NormPair { client_id: u32, c_sum: Ciphertext, sq_norm: u128 },
    CosP0 { client_id: u32, p0: u128 },
    WeightsAndMaskSum { no_trust: bool, weights: Vec<(u32, u128)>, mask_sum: QuantizedVector },
    /// Aggregate residues at scale 2^(f + fw).
    GlobalGrad(QuantizedVector),
}

fn put_modulus(out: &mut Vec<u8>, q: Modulus) {
    match q {
        Modulus::PowerOfTwo(b) => {
            out.push(0);
            codec::put_u64(out, b as u64);
        }
        Modulus::General(q) => {
            out.push(1);
            codec::put_u64(out, q);
        }
    }
}

fn read_modulus(r: &mut Reader<'_>) -> Result<Modulus> {
    let tag = r.u8()?;
    let v = r.u64()?;
    let q = match tag {
        0 => Modulus::power_of_two(u32::try_from(v).unwrap_or(u32::MAX)),
        1 => Modulus::general(v),
        _ => return Err(Error::Codec(format!("unknown modulus tag {tag}"))),
    };
    q.map_err(|e| Error::Codec(e.to_string()))
}

impl Message {
    pub fn msg_type(&self) -> MessageType {
        match self {
            Message::InitModel { .. } => MessageType::InitModel,
            Message::InitProjSeed(_) => MessageType::InitProjSeed,
            Message::InitPk(_) => MessageType::InitPk,
            Message::SeedReg(_) => MessageType::SeedReg,
            Message::EncMaskPack { .. } => MessageType::EncMaskPack,
            Message::MaskedUpdate(_) => MessageType::MaskedUpdate,
            Message::StdGrad(_) => MessageType::StdGrad,
            Message::NormPair { .. } => MessageType::NormPair,
            Message::CosP0 { .. } => MessageType::CosP0,
            Message::WeightsAndMaskSum { .. } => MessageType::WeightsAndMaskSum,
            Message::GlobalGrad(_) => MessageType::GlobalGrad,
        }
    }

    /// Payload bytes. Scalars mod q use the fixed residue width of `q`.
    pub fn encode_payload(&self, q: Modulus) -> Vec<u8> {
        let w = q.byte_width();
        let mut out = Vec::new();
        match self {
            Message::InitModel { modulus, f, fw, clip, lr, weights } => {
                put_modulus(&mut out, *modulus);
                out.push(*f as u8);
                out.push(*fw as u8);
                codec::put_f64(&mut out, *clip);
                codec::put_f64(&mut out, *lr);
                codec::put_u32(&mut out, weights.len() as u32);
                for &w in weights {
                    codec::put_f64(&mut out, w);
                }
            }
            Message::InitProjSeed(desc) => match desc {
                ProjectionDescriptor::Rademacher { seed, k, d } => {
                    out.push(0);
                    out.extend_from_slice(seed);
                    codec::put_u32(&mut out, *k);
                    codec::put_u32(&mut out, *d);
                }
                ProjectionDescriptor::Identity { d } => {
                    out.push(1);
                    codec::put_u32(&mut out, *d);
                }
            },
            Message::InitPk(pk) => out = pk.to_bytes(),
            Message::SeedReg(seed) => seed.write_to(&mut out),
            Message::EncMaskPack { client_id, ciphertexts } => {
                codec::put_u32(&mut out, *client_id);
                put_ciphertexts(&mut out, ciphertexts);
            }
            Message::MaskedUpdate(v) | Message::StdGrad(v) | Message::GlobalGrad(v) => v.write_to(&mut out),
            Message::NormPair { client_id, c_sum, sq_norm } => {
                codec::put_u32(&mut out, *client_id);
                put_ciphertexts(&mut out, std::slice::from_ref(c_sum));
                codec::put_uint_be(&mut out, *sq_norm, w);
            }
            Message::CosP0 { client_id, p0 } => {
                codec::put_u32(&mut out, *client_id);
                codec::put_uint_be(&mut out, *p0, w);
            }
            Message::WeightsAndMaskSum { no_trust, weights, mask_sum } => {
                out.push(u8::from(*no_trust));
                codec::put_u32(&mut out, weights.len() as u32);
                for &(id, wq) in weights {
                    codec::put_u32(&mut out, id);
                    codec::put_uint_be(&mut out, wq, w);
                }
                mask_sum.write_to(&mut out);
            }
        }
        out
    }

    pub fn to_frame(&self, round: u32, sender: u32, q: Modulus) -> Frame {
        Frame { msg_type: self.msg_type(), round, sender, payload: self.encode_payload(q) }
    }

    /// Decodes a frame. `modulus` is required for every message that
    /// carries residues.
    pub fn from_frame(frame: &Frame, modulus: Option<Modulus>) -> Result<Self> {
        let need_q = || modulus.ok_or_else(|| Error::Protocol(format!("{} before the modulus is known", frame.msg_type.name())));
        let mut r = Reader::new(&frame.payload);
        let msg = match frame.msg_type {
            MessageType::InitModel => {
                let modulus = read_modulus(&mut r)?;
                let f = r.u8()? as u32;
                let fw = r.u8()? as u32;
                let clip = r.f64()?;
                let lr = r.f64()?;
                let n = r.u32()? as usize;
                if r.remaining() < n.saturating_mul(8) {
                    return Err(Error::Codec("INIT_MODEL weights truncated".into()));
                }
                let weights = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
                Message::InitModel { modulus, f, fw, clip, lr, weights }
            }
            MessageType::InitProjSeed => match r.u8()? {
                0 => {
                    let seed = r.take(32)?.try_into().unwrap();
                    let k = r.u32()?;
                    let d = r.u32()?;
                    Message::InitProjSeed(ProjectionDescriptor::Rademacher { seed, k, d })
                }
                1 => Message::InitProjSeed(ProjectionDescriptor::Identity { d: r.u32()? }),
                t => return Err(Error::Codec(format!("unknown projection tag {t}"))),
            },
            MessageType::InitPk => {
                let n = r.biguint()?;
                Message::InitPk(PaillierPublicKey::from_modulus(n).map_err(|e| Error::Codec(e.to_string()))?)
            }
            MessageType::SeedReg => Message::SeedReg(MaskSeed::read_from(&mut r)?),
            MessageType::EncMaskPack => {
                let client_id = r.u32()?;
                let ciphertexts = read_ciphertexts(&mut r)?;
                Message::EncMaskPack { client_id, ciphertexts }
            }
            MessageType::MaskedUpdate => Message::MaskedUpdate(QuantizedVector::read_from(&mut r, need_q()?)?),
            MessageType::StdGrad => Message::StdGrad(QuantizedVector::read_from(&mut r, need_q()?)?),
            MessageType::GlobalGrad => Message::GlobalGrad(QuantizedVector::read_from(&mut r, need_q()?)?),
            MessageType::NormPair => {
                let q = need_q()?;
                let client_id = r.u32()?;
                let mut cts = read_ciphertexts(&mut r)?;
                if cts.len() != 1 {
                    return Err(Error::Codec("NORM_PAIR must carry one ciphertext".into()));
                }
                let c_sum = cts.pop().unwrap();
                let sq_norm = read_residue(&mut r, q)?;
                Message::NormPair { client_id, c_sum, sq_norm }
            }
            MessageType::CosP0 => {
                let q = need_q()?;
                let client_id = r.u32()?;
                let p0 = read_residue(&mut r, q)?;
                Message::CosP0 { client_id, p0 }
            }
            MessageType::WeightsAndMaskSum => {
                let q = need_q()?;
                let no_trust = match r.u8()? {
                    0 => false,
                    1 => true,
                    t => return Err(Error::Codec(format!("bad no-trust flag {t}"))),
                };
                let count = r.u32()? as usize;
                let w = q.byte_width();
                if r.remaining() < count.saturating_mul(4 + w) {
                    return Err(Error::Codec("WEIGHTS_AND_MASKSUM truncated".into()));
                }
                let mut weights = Vec::with_capacity(count);
                for _ in 0..count {
                    let id = r.u32()?;
                    weights.push((id, r.uint_be(w)?));
                }
                let mask_sum = QuantizedVector::read_from(&mut r, q)?;
                Message::WeightsAndMaskSum { no_trust, weights, mask_sum }
            }
        };
        r.finish()?;
        Ok(msg)
    }
}

/// `count: u32 | width: u16 | count * width` big-endian ciphertext bytes.
fn put_ciphertexts(out: &mut Vec<u8>, cts: &[Ciphertext]) {
    let bytes: Vec<Vec<u8>> = cts.iter().map(|c| c.value().to_bytes_be()).collect();
    let width = bytes.iter().map(Vec::len).max().unwrap_or(0);
    codec::put_u32(out, cts.len() as u32);
    out.extend_from_slice(&(width as u16).to_be_bytes());
    for b in bytes {
        out.resize(out.len() + width - b.len(), 0);
        out.extend_from_slice(&b);
    }
}

fn read_ciphertexts(r: &mut Reader<'_>) -> Result<Vec<Ciphertext>> {
    let count = r.u32()? as usize;
    let width = u16::from_be_bytes(r.take(2)?.try_into().unwrap()) as usize;
    if width == 0 && count > 0 {
        return Err(Error::Codec("zero ciphertext width".into()));
    }
    if r.remaining() < count.saturating_mul(width) {
        return Err(Error::Codec("ciphertext list truncated".into()));
    }
    (0..count)
        .map(|_| Ok(Ciphertext::from_value(BigUint::from_bytes_be(r.take(width)?))))
        .collect()
}

fn read_residue(r: &mut Reader<'_>, q: Modulus) -> Result<u128> {
    let v = r.uint_be(q.byte_width())?;
    if !q.contains(v) {
        return Err(Error::Codec("residue not below q".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::paillier::{keygen, KeySecurity};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn roundtrip(m: &Message, q: Modulus) -> Message {
        Message::from_frame(&m.to_frame(4, 9, q), Some(q)).unwrap()
    }

    proptest! {
        #[test]
        fn residue_messages_roundtrip(bits in 2u32..=128, xs in proptest::collection::vec(any::<u128>(), 0..40), id: u32, no_trust: bool) {
            let q = Modulus::PowerOfTwo(bits);
            let xs: Vec<u128> = xs.into_iter().map(|x| q.reduce(x)).collect();
            let v = QuantizedVector::new(xs.clone(), q).unwrap();
            let weights: Vec<(u32, u128)> = xs.iter().enumerate().map(|(i, &x)| (i as u32, x)).collect();
            for m in [
                Message::MaskedUpdate(v.clone()),
                Message::StdGrad(v.clone()),
                Message::GlobalGrad(v.clone()),
                Message::CosP0 { client_id: id, p0: xs.first().copied().unwrap_or(0) },
                Message::WeightsAndMaskSum { no_trust, weights, mask_sum: v },
            ] {
                prop_assert_eq!(roundtrip(&m, q), m);
            }
        }

        #[test]
        fn ciphertext_messages_roundtrip(seed: u64, ms in proptest::collection::vec(any::<u64>(), 1..20), id: u32) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed % 4);
            let (pk, _) = keygen(24, KeySecurity::InsecureTest, &mut rng).unwrap();
            let q = Modulus::PowerOfTwo(20);
            let cts: Vec<_> = ms.iter().map(|&m| pk.encrypt_u128(u128::from(m) % (1 << 20), &mut rng).unwrap()).collect();
            let pack = Message::EncMaskPack { client_id: id, ciphertexts: cts.clone() };
            prop_assert_eq!(roundtrip(&pack, q), pack);
            let pair = Message::NormPair { client_id: id, c_sum: cts[0].clone(), sq_norm: q.reduce(ms[0] as u128) };
            prop_assert_eq!(roundtrip(&pair, q), pair);
        }
    }
}
