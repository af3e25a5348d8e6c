//! Length-prefixed framing, channels and per-link byte accounting.
//!
//! Wire layout of a frame, all integers big-endian:
//!
//! ```text
//! length: u32   // counts msg_type + round + sender_id + payload
//! msg_type: u8
//! round: u32
//! sender_id: u32
//! payload: [u8; length - 9]
//! ```

mod channel;

pub use channel::{Channel, Delivered, LinkCounters, MemoryChannel, Network, SocketChannel, TransportKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 9;
pub const DEFAULT_MAX_FRAME: usize = 256 << 20;

pub const SERVER0_ID: u32 = 0xFFFF_FF00;
pub const SERVER1_ID: u32 = 0xFFFF_FF01;
/// Round field used by messages sent before round 0.
pub const INIT_ROUND: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum MessageType {
    InitModel = 1,
    InitProjSeed = 2,
    InitPk = 3,
    SeedReg = 4,
    EncMaskPack = 5,
    MaskedUpdate = 6,
    StdGrad = 7,
    NormPair = 8,
    CosP0 = 9,
    WeightsAndMaskSum = 10,
    GlobalGrad = 11,
}

impl MessageType {
    pub const ALL: [MessageType; 11] = [
        MessageType::InitModel,
        MessageType::InitProjSeed,
        MessageType::InitPk,
        MessageType::SeedReg,
        MessageType::EncMaskPack,
        MessageType::MaskedUpdate,
        MessageType::StdGrad,
        MessageType::NormPair,
        MessageType::CosP0,
        MessageType::WeightsAndMaskSum,
        MessageType::GlobalGrad,
    ];

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| *t as u8 == tag)
            .ok_or_else(|| Error::Protocol(format!("unknown message type tag {tag}")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            MessageType::InitModel => "INIT_MODEL",
            MessageType::InitProjSeed => "INIT_PROJ_SEED",
            MessageType::InitPk => "INIT_PK",
            MessageType::SeedReg => "SEED_REG",
            MessageType::EncMaskPack => "ENC_MASK_PACK",
            MessageType::MaskedUpdate => "MASKED_UPDATE",
            MessageType::StdGrad => "STD_GRAD",
            MessageType::NormPair => "NORM_PAIR",
            MessageType::CosP0 => "COS_P0",
            MessageType::WeightsAndMaskSum => "WEIGHTS_AND_MASKSUM",
            MessageType::GlobalGrad => "GLOBAL_GRAD",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MessageType,
    pub round: u32,
    pub sender: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    /// Value of the length field.
    pub fn length_field(&self) -> u64 {
        (HEADER_LEN + self.payload.len()) as u64
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + HEADER_LEN + frame.payload.len());
    out.extend_from_slice(&((HEADER_LEN + frame.payload.len()) as u32).to_be_bytes());
    out.push(frame.msg_type as u8);
    out.extend_from_slice(&frame.round.to_be_bytes());
    out.extend_from_slice(&frame.sender.to_be_bytes());
    out.extend_from_slice(&frame.payload);
    out
}

/// Decodes one frame from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_frame(bytes: &[u8], max_frame: usize) -> Result<(Frame, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Codec("truncated frame: missing length field".into()));
    }
    let length = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    if length > max_frame {
        return Err(Error::Codec(format!("frame of {length} bytes exceeds limit {max_frame}")));
    }
    if length < HEADER_LEN {
        return Err(Error::Codec(format!("frame length {length} shorter than header")));
    }
    if bytes.len() < 4 + length {
        return Err(Error::Codec(format!(
            "truncated frame: length field says {length}, {} bytes available",
            bytes.len() - 4
        )));
    }
    let body = &bytes[4..4 + length];
    let msg_type = MessageType::from_tag(body[0])?;
    let round = u32::from_be_bytes(body[1..5].try_into().unwrap());
    let sender = u32::from_be_bytes(body[5..9].try_into().unwrap());
    Ok((
        Frame { msg_type, round, sender, payload: body[HEADER_LEN..].to_vec() },
        4 + length,
    ))
}

/// A protocol participant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Endpoint {
    Client(u32),
    Server0,
    Server1,
}

impl Endpoint {
    pub fn id(&self) -> u32 {
        match *self {
            Endpoint::Client(i) => i,
            Endpoint::Server0 => SERVER0_ID,
            Endpoint::Server1 => SERVER1_ID,
        }
    }

    pub fn is_client(&self) -> bool {
        matches!(self, Endpoint::Client(_))
    }
}

/// Byte totals per link class, counted as the frames' length fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteTotals {
    pub client_to_servers: u64,
    pub s0_to_s1: u64,
    pub s1_to_s0: u64,
    pub servers_to_clients: u64,
}

impl ByteTotals {
    pub fn add(&mut self, from: Endpoint, to: Endpoint, bytes: u64) {
        match (from, to) {
            (Endpoint::Client(_), _) => self.client_to_servers += bytes,
            (_, Endpoint::Client(_)) => self.servers_to_clients += bytes,
            (Endpoint::Server0, Endpoint::Server1) => self.s0_to_s1 += bytes,
            (Endpoint::Server1, Endpoint::Server0) => self.s1_to_s0 += bytes,
            _ => {}
        }
    }

    pub fn between_servers(&self) -> u64 {
        self.s0_to_s1 + self.s1_to_s0
    }
}

/// Sums `(from, to, frame)` records into per-link totals.
pub fn byte_accounting<'a>(frames: impl IntoIterator<Item = (Endpoint, Endpoint, &'a Frame)>) -> ByteTotals {
    let mut t = ByteTotals::default();
    for (from, to, f) in frames {
        t.add(from, to, f.length_field());
    }
    t
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn frames_roundtrip(tag in 0usize..MessageType::ALL.len(), round: u32, sender: u32, payload in proptest::collection::vec(any::<u8>(), 0..512)) {
            let frame = Frame { msg_type: MessageType::ALL[tag], round, sender, payload };
            let wire = encode_frame(&frame);
            prop_assert_eq!(wire.len() as u64, 4 + frame.length_field());
            let (back, used) = decode_frame(&wire, 1 << 20).unwrap();
            prop_assert_eq!(used, wire.len());
            prop_assert_eq!(back, frame);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            if let Ok((f, used)) = decode_frame(&bytes, 1 << 20) {
                prop_assert!(used <= bytes.len());
                prop_assert_eq!(&encode_frame(&f)[..], &bytes[..used]);
            }
        }
    }
}
