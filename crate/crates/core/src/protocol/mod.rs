//! The two-server protocol: message formats, the SecNorm / SecCos / SecAgg
//! sub-protocols, per-party state and the round driver.
//!
//! One round, with every arrow a framed message:
//!
//! ```text
//! client i -> S0   MASKED_UPDATE        m_i = g̃_i + r_i mod q
//! S1 -> S0         STD_GRAD             g̃_std
//! S0 -> S1         NORM_PAIR            Enc(m*_i · r*_i), ‖m*_i‖² mod q
//! S0 -> S1         COS_P0               m_i · g̃_std mod q
//! S1 -> S0         WEIGHTS_AND_MASKSUM  ω̃_i, Σ ω̃_i r_i mod q
//! S0 -> all        GLOBAL_GRAD          Σ ω̃_i g̃_i mod q
//! ```

pub mod entities;
pub mod federation;
pub mod messages;
pub mod secure;
#[cfg(test)]
mod tests;

pub use entities::{batch_seed, ClientState, ServerS0State, ServerS1State, Weighting};
pub use federation::{
    audit_messages, select_clients, ClientRecord, Federation, FederationSetup, ProtocolConfig, RoundFailure,
    RoundStatus, RoundTiming, RoundTranscript, TranscriptEntry,
};
pub use messages::{Message, ProjectionDescriptor};
pub use secure::{
    compute_trust_weights, sec_agg_s0, sec_agg_s1, sec_cos_s0, sec_cos_s1, sec_norm_s0, sec_norm_s1, CosRecovery,
    NormPairData, NormRecovery, TrustWeights,
};
