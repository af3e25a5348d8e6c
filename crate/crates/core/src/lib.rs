//! Two-server Byzantine-robust private federated aggregation.
//!
//! Clients mask fixed-point gradients with seed-derived pads. Server S0 sees
//! only masked vectors; server S1 holds the Paillier secret key, the mask
//! seeds and a small trusted dataset. Together they compute each client's
//! norm (over a ±1 JL projection) and cosine against S1's reference
//! gradient, derive trust weights, and release only the weighted aggregate.

pub mod attacks;
pub mod codec;
pub mod encoding;
pub mod error;
pub mod experiment;
pub mod jl;
pub mod learning;
pub mod masking;
pub mod oracle;
pub mod paillier;
pub mod protocol;
pub mod seeds;
pub mod transport;

pub use error::{Error, Result};
