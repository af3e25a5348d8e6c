//! Fixed-point encoding of reals into residues mod q, and the parameter
//! validator that keeps every protocol intermediate exactly liftable.

use std::fmt;

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader};
use crate::error::{invalid, Error, Result};

/// The public mask modulus q.
///
/// Powers of two up to 2^128 use wrapping u128 arithmetic. General moduli
/// are limited to q < 2^64 so products fit in u128.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modulus {
    PowerOfTwo(u32),
    General(u64),
}

impl Modulus {
    pub fn power_of_two(bits: u32) -> Result<Self> {
        if !(2..=128).contains(&bits) {
            return invalid(format!("kappa2 = {bits} outside [2, 128]"));
        }
        Ok(Modulus::PowerOfTwo(bits))
    }

    pub fn general(q: u64) -> Result<Self> {
        if q < 2 {
            return invalid("modulus must be at least 2");
        }
        if q.is_power_of_two() {
            return Ok(Modulus::PowerOfTwo(q.trailing_zeros()));
        }
        Ok(Modulus::General(q))
    }

    /// Bit length of q - 1, i.e. the number of bits a residue needs.
    pub fn bits(&self) -> u32 {
        match *self {
            Modulus::PowerOfTwo(b) => b,
            Modulus::General(q) => 64 - (q - 1).leading_zeros(),
        }
    }

    /// Bytes per residue on the wire.
    pub fn byte_width(&self) -> usize {
        self.bits().div_ceil(8).max(1) as usize
    }

    pub fn to_biguint(&self) -> BigUint {
        match *self {
            Modulus::PowerOfTwo(b) => BigUint::from(1u32) << b,
            Modulus::General(q) => BigUint::from(q),
        }
    }

    #[inline]
    fn mask(bits: u32) -> u128 {
        if bits == 128 {
            u128::MAX
        } else {
            (1u128 << bits) - 1
        }
    }

    #[inline]
    pub fn contains(&self, v: u128) -> bool {
        match *self {
            Modulus::PowerOfTwo(b) => b == 128 || v < (1u128 << b),
            Modulus::General(q) => v < q as u128,
        }
    }

    #[inline]
    pub fn reduce(&self, x: u128) -> u128 {
        match *self {
            Modulus::PowerOfTwo(b) => x & Self::mask(b),
            Modulus::General(q) => x % q as u128,
        }
    }

    #[inline]
    pub fn from_i128(&self, x: i128) -> u128 {
        match *self {
            Modulus::PowerOfTwo(b) => (x as u128) & Self::mask(b),
            Modulus::General(q) => x.rem_euclid(q as i128) as u128,
        }
    }

    pub fn reduce_biguint(&self, x: &BigUint) -> u128 {
        match *self {
            Modulus::PowerOfTwo(b) => {
                let digits = x.to_u64_digits();
                let lo = digits.first().copied().unwrap_or(0) as u128;
                let hi = digits.get(1).copied().unwrap_or(0) as u128;
                (lo | (hi << 64)) & Self::mask(b)
            }
            Modulus::General(q) => (x % q).to_u128().unwrap(),
        }
    }

    #[inline]
    pub fn add(&self, a: u128, b: u128) -> u128 {
        match *self {
            Modulus::PowerOfTwo(bits) => a.wrapping_add(b) & Self::mask(bits),
            Modulus::General(q) => (a + b) % q as u128,
        }
    }

    #[inline]
    pub fn sub(&self, a: u128, b: u128) -> u128 {
        match *self {
            Modulus::PowerOfTwo(bits) => a.wrapping_sub(b) & Self::mask(bits),
            Modulus::General(q) => (a + q as u128 - b) % q as u128,
        }
    }

    #[inline]
    pub fn mul(&self, a: u128, b: u128) -> u128 {
        match *self {
            Modulus::PowerOfTwo(bits) => a.wrapping_mul(b) & Self::mask(bits),
            Modulus::General(q) => (a * b) % q as u128,
        }
    }

    /// Representative of `v` in `[-q/2, q/2)`.
    #[inline]
    pub fn center_lift(&self, v: u128) -> i128 {
        match *self {
            Modulus::PowerOfTwo(128) => v as i128,
            Modulus::PowerOfTwo(b) => {
                if v >= 1u128 << (b - 1) {
                    v.wrapping_sub(1u128 << b) as i128
                } else {
                    v as i128
                }
            }
            Modulus::General(q) => {
                if 2 * v >= q as u128 {
                    v as i128 - q as i128
                } else {
                    v as i128
                }
            }
        }
    }
}

impl fmt::Display for Modulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modulus::PowerOfTwo(b) => write!(f, "2^{b}"),
            Modulus::General(q) => write!(f, "{q}"),
        }
    }
}

/// Free-function form of [`Modulus::center_lift`].
pub fn center_lift(v: u128, q: Modulus) -> i128 {
    q.center_lift(v)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointParams {
    pub modulus: Modulus,
    /// Fractional bits of gradient values.
    pub f: u32,
    /// Fractional bits of aggregation weights.
    pub fw: u32,
    pub clip: f64,
}

impl FixedPointParams {
    pub fn new(modulus: Modulus, f: u32, fw: u32, clip: f64) -> Result<Self> {
        if !(clip.is_finite() && clip > 0.0) {
            return invalid("clip must be positive and finite");
        }
        if f > 96 || fw > 96 {
            return invalid("fractional bits must be at most 96");
        }
        let p = FixedPointParams { modulus, f, fw, clip };
        let max = BigUint::from(p.max_magnitude());
        if max * 2u32 >= modulus.to_biguint() {
            return invalid(format!("2^f * clip does not fit below q/2 for q = {modulus}"));
        }
        Ok(p)
    }

    pub fn scale(&self) -> f64 {
        (self.f as f64).exp2()
    }

    pub fn weight_scale(&self) -> f64 {
        (self.fw as f64).exp2()
    }

    /// Largest encoded magnitude, round(clip * 2^f).
    pub fn max_magnitude(&self) -> u128 {
        (self.clip * self.scale()).round() as u128
    }
}

/// Encodes `x` after clamping to `[-clip, clip]`.
pub fn encode(x: f64, params: &FixedPointParams) -> u128 {
    let mut sat = 0;
    encode_counted(x, params, &mut sat)
}

/// Like [`encode`] but bumps `saturations` when clamping happened.
pub fn encode_counted(x: f64, params: &FixedPointParams, saturations: &mut usize) -> u128 {
    let c = params.clip;
    if x.abs() > c {
        *saturations += 1;
    }
    let v = (x.clamp(-c, c) * params.scale()).round() as i128;
    params.modulus.from_i128(v)
}

pub fn decode(v: u128, params: &FixedPointParams) -> Result<f64> {
    if !params.modulus.contains(v) {
        return invalid("residue not below q");
    }
    Ok(params.modulus.center_lift(v) as f64 / params.scale())
}

/// A vector of residues mod q.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedVector {
    residues: Vec<u128>,
    modulus: Modulus,
}

impl QuantizedVector {
    pub fn new(residues: Vec<u128>, modulus: Modulus) -> Result<Self> {
        if let Some(i) = residues.iter().position(|&v| !modulus.contains(v)) {
            return invalid(format!("residue {i} not below q"));
        }
        Ok(QuantizedVector { residues, modulus })
    }

    pub(crate) fn from_reduced(residues: Vec<u128>, modulus: Modulus) -> Self {
        debug_assert!(residues.iter().all(|&v| modulus.contains(v)));
        QuantizedVector { residues, modulus }
    }

    pub fn zeros(dim: usize, modulus: Modulus) -> Self {
        QuantizedVector { residues: vec![0; dim], modulus }
    }

    /// Encodes every coordinate. Returns the vector and how many
    /// coordinates were clamped.
    pub fn encode(xs: &[f64], params: &FixedPointParams) -> (Self, usize) {
        let mut sat = 0;
        let residues = xs.iter().map(|&x| encode_counted(x, params, &mut sat)).collect();
        (QuantizedVector { residues, modulus: params.modulus }, sat)
    }

    pub fn decode(&self, params: &FixedPointParams) -> Vec<f64> {
        let s = params.scale();
        self.residues
            .iter()
            .map(|&v| self.modulus.center_lift(v) as f64 / s)
            .collect()
    }

    pub fn lifts(&self) -> Vec<i128> {
        self.residues.iter().map(|&v| self.modulus.center_lift(v)).collect()
    }

    pub fn residues(&self) -> &[u128] {
        &self.residues
    }

    pub fn modulus(&self) -> Modulus {
        self.modulus
    }

    pub fn dim(&self) -> usize {
        self.residues.len()
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return invalid(format!("dimension mismatch: {} vs {}", self.dim(), other.dim()));
        }
        if self.modulus != other.modulus {
            return invalid("modulus mismatch");
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let q = self.modulus;
        Ok(Self::from_reduced(
            self.residues.iter().zip(&other.residues).map(|(&a, &b)| q.add(a, b)).collect(),
            q,
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let q = self.modulus;
        Ok(Self::from_reduced(
            self.residues.iter().zip(&other.residues).map(|(&a, &b)| q.sub(a, b)).collect(),
            q,
        ))
    }

    /// Inner product mod q.
    pub fn dot(&self, other: &Self) -> Result<u128> {
        self.check_compatible(other)?;
        let q = self.modulus;
        Ok(self
            .residues
            .iter()
            .zip(&other.residues)
            .fold(0, |acc, (&a, &b)| q.add(acc, q.mul(a, b))))
    }

    /// Squared norm mod q.
    pub fn sq_norm(&self) -> u128 {
        let q = self.modulus;
        self.residues.iter().fold(0, |acc, &a| q.add(acc, q.mul(a, a)))
    }

    /// 4-byte big-endian dim, then each residue in `byte_width` bytes.
    pub fn write_to(&self, out: &mut Vec<u8>) {
        let w = self.modulus.byte_width();
        codec::put_u32(out, self.residues.len() as u32);
        out.reserve(self.residues.len() * w);
        for &v in &self.residues {
            codec::put_uint_be(out, v, w);
        }
    }

    pub fn read_from(r: &mut Reader<'_>, modulus: Modulus) -> Result<Self> {
        let dim = r.u32()? as usize;
        let w = modulus.byte_width();
        if r.remaining() < dim.saturating_mul(w) {
            return Err(Error::Codec(format!("vector of dim {dim} truncated")));
        }
        let mut residues = Vec::with_capacity(dim);
        for _ in 0..dim {
            residues.push(r.uint_be(w)?);
        }
        Self::new(residues, modulus).map_err(|e| Error::Codec(e.to_string()))
    }

    pub fn wire_len(&self) -> usize {
        4 + self.residues.len() * self.modulus.byte_width()
    }
}

/// Which exactness bound a check refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bound {
    /// (a) k * (d * 2^f * clip)^2 < q/2
    SquaredNorm,
    /// (b) d * (2^f * clip)^2 < q/2
    InnerProduct,
    /// (c) n * 2^fw * 2^f * clip < q/2
    Aggregation,
    /// (d) k * q^2 < 2^(N_bits - 1)
    PaillierLift,
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bound::SquaredNorm => "bound (a) squared norm k*(d*2^f*clip)^2 < q/2",
            Bound::InnerProduct => "bound (b) inner product d*(2^f*clip)^2 < q/2",
            Bound::Aggregation => "bound (c) aggregation n*2^fw*2^f*clip < q/2",
            Bound::PaillierLift => "bound (d) Paillier lift k*q^2 < 2^(N_bits-1)",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundCheck {
    pub bound: Bound,
    pub lhs_log2: f64,
    pub limit_log2: f64,
    pub pass: bool,
}

impl BoundCheck {
    /// How many bits of headroom remain (negative when violated).
    pub fn margin_bits(&self) -> f64 {
        self.limit_log2 - self.lhs_log2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<BoundCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn first_violation(&self) -> Option<&BoundCheck> {
        self.checks.iter().find(|c| !c.pass)
    }

    pub fn into_result(self) -> Result<Self> {
        match self.first_violation() {
            None => Ok(self),
            Some(c) => Err(Error::Validation(format!(
                "{} violated (margin {:.2} bits)",
                c.bound,
                c.margin_bits()
            ))),
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })?;
        for c in &self.checks {
            writeln!(
                f,
                "  [{}] {}: margin {:+.2} bits",
                if c.pass { "ok" } else { "FAIL" },
                c.bound,
                c.margin_bits()
            )?;
        }
        Ok(())
    }
}

pub(crate) fn log2_big(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits == 0 {
        return f64::NEG_INFINITY;
    }
    if bits <= 64 {
        return (x.to_u64().unwrap() as f64).log2();
    }
    let shift = bits - 64;
    ((x >> shift).to_u64().unwrap() as f64).log2() + shift as f64
}

/// Checks the four exactness bounds for dimension `d`, compressed
/// dimension `k`, `n` clients and a Paillier modulus of `n_bits` bits.
pub fn validate_parameters(
    d: usize,
    k: usize,
    n: usize,
    params: &FixedPointParams,
    n_bits: u64,
) -> Result<ValidationReport> {
    if d == 0 || k == 0 || n == 0 || n_bits == 0 {
        return invalid("validate_parameters needs positive d, k, n and N_bits");
    }
    let q = params.modulus.to_biguint();
    let b = BigUint::from(params.max_magnitude());
    let d_big = BigUint::from(d);
    let k_big = BigUint::from(k);
    let n_big = BigUint::from(n);

    let half_q_check = |bound: Bound, lhs: BigUint| {
        let pass = &lhs * 2u32 < q;
        BoundCheck {
            bound,
            lhs_log2: log2_big(&lhs),
            limit_log2: log2_big(&q) - 1.0,
            pass,
        }
    };

    let db = &d_big * &b;
    let a = half_q_check(Bound::SquaredNorm, &k_big * &db * &db);
    let bb = half_q_check(Bound::InnerProduct, &d_big * &b * &b);
    let c = half_q_check(Bound::Aggregation, (&n_big << params.fw) * &b);
    let lift = &k_big * &q * &q;
    let limit = BigUint::from(1u32) << (n_bits - 1);
    let dd = BoundCheck {
        bound: Bound::PaillierLift,
        lhs_log2: log2_big(&lift),
        limit_log2: (n_bits - 1) as f64,
        pass: lift < limit,
    };
    Ok(ValidationReport { checks: vec![a, bb, c, dd] })
}

/// Smallest kappa2 in [2, 128] for which q = 2^kappa2 passes every bound.
pub fn minimal_passing_kappa2(
    d: usize,
    k: usize,
    n: usize,
    f: u32,
    fw: u32,
    clip: f64,
    n_bits: u64,
) -> Option<u32> {
    (2..=128).find(|&bits| {
        let Ok(params) = FixedPointParams::new(Modulus::PowerOfTwo(bits), f, fw, clip) else {
            return false;
        };
        validate_parameters(d, k, n, &params, n_bits)
            .map(|r| r.passed())
            .unwrap_or(false)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p64(f: u32) -> FixedPointParams {
        FixedPointParams::new(Modulus::PowerOfTwo(64), f, 20, 8.0).unwrap()
    }

    #[test]
    fn encode_examples() {
        let p = p64(16);
        assert_eq!(encode(0.0, &p), 0);
        assert_eq!(encode(1.0, &p), 65536);
        assert_eq!(encode(-1.0, &p), (1u128 << 64) - 65536);
    }

    #[test]
    fn decode_examples() {
        let p = p64(16);
        assert!((decode(encode(0.5, &p), &p).unwrap() - 0.5).abs() <= 2f64.powi(-17));
        assert_eq!(decode((1u128 << 64) - 65536, &p).unwrap(), -1.0);
        assert_eq!(decode(0, &p).unwrap(), 0.0);
        assert!(decode(1u128 << 64, &p).is_err());
    }

    #[test]
    fn clamping_is_counted() {
        let p = p64(4);
        let (v, sat) = QuantizedVector::encode(&[100.0, -100.0, 1.0], &p);
        assert_eq!(sat, 2);
        assert_eq!(v.decode(&p), vec![8.0, -8.0, 1.0]);
    }

    #[test]
    fn center_lift_examples() {
        let q = Modulus::general(101).unwrap();
        assert_eq!(center_lift(3, q), 3);
        assert_eq!(center_lift(100, q), -1);
        assert_eq!(center_lift(25, q), 25);
        assert_eq!(center_lift(50, q), 50);
        assert_eq!(center_lift(51, q), -50);
        let q = Modulus::PowerOfTwo(128);
        assert_eq!(center_lift(u128::MAX, q), -1);
        assert_eq!(center_lift(1u128 << 127, q), i128::MIN);
        let q = Modulus::PowerOfTwo(127);
        assert_eq!(center_lift((1u128 << 127) - 1, q), -1);
        assert_eq!(center_lift(1u128 << 126, q), -(1i128 << 126));
    }

    #[test]
    fn power_of_two_general_is_normalized() {
        assert_eq!(Modulus::general(256).unwrap(), Modulus::PowerOfTwo(8));
        assert_eq!(Modulus::general(101).unwrap().byte_width(), 1);
        assert_eq!(Modulus::PowerOfTwo(64).byte_width(), 8);
        assert_eq!(Modulus::PowerOfTwo(59).byte_width(), 8);
    }

    fn params(bits: u32, f: u32, fw: u32, clip: f64) -> FixedPointParams {
        FixedPointParams::new(Modulus::PowerOfTwo(bits), f, fw, clip).unwrap()
    }

    #[test]
    fn validator_examples() {
        let r = validate_parameters(10_000, 331, 50, &params(128, 16, 20, 8.0), 1024).unwrap();
        assert!(r.passed(), "{r}");
        let r = validate_parameters(10_000, 331, 50, &params(64, 16, 20, 8.0), 1024).unwrap();
        assert_eq!(r.first_violation().unwrap().bound, Bound::SquaredNorm);
        let r = validate_parameters(1, 1, 1, &params(64, 0, 0, 1.0), 1024).unwrap();
        assert!(r.passed());
        let err = r.clone().into_result().map(|_| ()).err();
        assert!(err.is_none());
    }

    #[test]
    fn validator_names_the_bound_in_errors() {
        let r = validate_parameters(10_000, 331, 50, &params(64, 16, 20, 8.0), 1024).unwrap();
        let msg = r.into_result().unwrap_err().to_string();
        assert!(msg.contains("bound (a)"), "{msg}");
    }

    #[test]
    fn validator_margins_match_hand_values() {
        // (a): 331 * (1e4 * 2^19)^2 = 2^(8.37 + 2*(13.29 + 19)) = 2^72.95
        let r = validate_parameters(10_000, 331, 50, &params(128, 16, 20, 8.0), 1024).unwrap();
        let a = &r.checks[0];
        let expect = (331f64).log2() + 2.0 * ((1e4f64).log2() + 19.0);
        assert!((a.lhs_log2 - expect).abs() < 1e-9);
        assert_eq!(a.limit_log2, 127.0);
    }

    #[test]
    fn minimal_kappa2_for_defaults() {
        let k2 = minimal_passing_kappa2(650, 331, 50, 16, 20, 8.0, 1024).unwrap();
        assert_eq!(k2, 67);
        let k2 = minimal_passing_kappa2(650, 331, 50, 12, 20, 8.0, 128).unwrap();
        assert_eq!(k2, 59);
    }

    #[test]
    fn wire_form_lengths() {
        let q = Modulus::PowerOfTwo(64);
        let v = QuantizedVector::new(vec![1, 2, 3], q).unwrap();
        let mut out = Vec::new();
        v.write_to(&mut out);
        assert_eq!(out.len(), 4 + 3 * 8);
        assert_eq!(v.wire_len(), out.len());
        let back = QuantizedVector::read_from(&mut Reader::new(&out), q).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn modular_products_for_general_q() {
        let q = Modulus::general(101).unwrap();
        let a = QuantizedVector::new(vec![13, 24], q).unwrap();
        let r = QuantizedVector::new(vec![10, 20], q).unwrap();
        assert_eq!(a.sq_norm(), 38);
        assert_eq!(r.sq_norm(), 96);
        assert_eq!(a.dot(&r).unwrap(), 4);
    }
}
