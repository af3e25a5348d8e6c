//! The two-server sub-protocols, one function per party and step.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::encoding::{FixedPointParams, QuantizedVector};
use crate::error::{invalid, Error, Result};
use crate::jl::norm_estimate_from_projection;
use crate::paillier::{Ciphertext, PaillierPublicKey, PaillierSecretKey};

/// What S0 sends S1 for one client in SecNorm.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NormPairData {
    pub c_sum: Ciphertext,
    /// `‖m*‖² mod q`.
    pub sq_norm: u128,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRecovery {
    /// Center-lifted `‖g*‖² mod q`.
    pub sq_norm_lift: i128,
    pub estimate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosRecovery {
    /// Center-lifted `g̃ · g̃_std mod q`, at scale 2^(2f).
    pub inner_lift: i128,
    pub inner: f64,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrustWeights {
    pub trust: Vec<f64>,
    pub weights: Vec<f64>,
    pub no_trust: bool,
}

/// S0 side of SecNorm: `c_sum = Π_j Enc(r*_j)^(m*_j) = Enc(m* · r*)`.
///
/// Costs k exponentiations and k multiplications mod N².
pub fn sec_norm_s0(
    pk: &PaillierPublicKey,
    masked_compressed: &QuantizedVector,
    enc_mask: &[Ciphertext],
) -> Result<NormPairData> {
    if masked_compressed.dim() != enc_mask.len() {
        return invalid(format!(
            "compressed update has {} coordinates but the mask pack has {}",
            masked_compressed.dim(),
            enc_mask.len()
        ));
    }
    let terms = masked_compressed
        .residues()
        .iter()
        .zip(enc_mask)
        .map(|(&m, c)| pk.scalar_mul(c, &BigUint::from(m)))
        .collect::<Result<Vec<_>>>()?;
    let c_sum = pk.add_ct(&terms)?;
    Ok(NormPairData { c_sum, sq_norm: masked_compressed.sq_norm() })
}

/// S1 side of SecNorm. `mask_sq_norm` is `‖r*‖² mod q` and `divisor` the
/// projection's norm divisor.
///
/// `‖g*‖² ≡ ‖m*‖² + ‖r*‖² - 2 (m* · r*) (mod q)`, where `m* · r*` is the
/// decrypted integer reduced mod q.
pub fn sec_norm_s1(
    pk: &PaillierPublicKey,
    sk: &PaillierSecretKey,
    pair: &NormPairData,
    mask_sq_norm: u128,
    params: &FixedPointParams,
    divisor: f64,
) -> Result<NormRecovery> {
    let q = params.modulus;
    if !q.contains(pair.sq_norm) || !q.contains(mask_sq_norm) {
        return invalid("squared norm residue not below q");
    }
    let cross = q.reduce_biguint(&sk.decrypt(pk, &pair.c_sum)?);
    let sq = q.sub(q.add(pair.sq_norm, mask_sq_norm), q.add(cross, cross));
    let estimate = norm_estimate_from_projection(sq, divisor, params)?;
    Ok(NormRecovery { sq_norm_lift: q.center_lift(sq), estimate })
}

/// S0 side of SecCos: `p0 = m · g̃_std mod q`.
pub fn sec_cos_s0(masked: &QuantizedVector, std_grad: &QuantizedVector) -> Result<u128> {
    masked.dot(std_grad)
}

/// S1 side of SecCos. Removes `p1 = r · g̃_std` and divides by the norms.
/// A zero client norm gives cosine 0.
pub fn sec_cos_s1(
    p0: u128,
    mask: &QuantizedVector,
    std_grad: &QuantizedVector,
    norm: f64,
    norm_std: f64,
    params: &FixedPointParams,
) -> Result<CosRecovery> {
    let q = params.modulus;
    if !q.contains(p0) {
        return invalid("p0 not below q");
    }
    if !(norm_std > 0.0) {
        return Err(Error::Protocol("reference gradient has zero norm".into()));
    }
    let p1 = mask.dot(std_grad)?;
    let inner_lift = q.center_lift(q.sub(p0, p1));
    let inner = inner_lift as f64 / (params.scale() * params.scale());
    let cosine = if norm > 0.0 { (inner / (norm * norm_std)).clamp(-1.0, 1.0) } else { 0.0 };
    Ok(CosRecovery { inner_lift, inner, cosine })
}

/// `TS_i = ReLU(cos_i)`, `ω_i = TS_i / Σ TS · ‖g_std‖ / ‖g_i‖`. Clients
/// with zero norm get weight 0; if every TS is 0 the round has no trust.
pub fn compute_trust_weights(cosines: &[f64], norms: &[f64], norm_std: f64) -> Result<TrustWeights> {
    if cosines.len() != norms.len() {
        return invalid("cosine and norm counts differ");
    }
    let trust: Vec<f64> = cosines
        .iter()
        .zip(norms)
        .map(|(&c, &n)| if n > 0.0 && c > 0.0 { c } else { 0.0 })
        .collect();
    let sum: f64 = trust.iter().sum();
    if sum == 0.0 {
        let weights = vec![0.0; trust.len()];
        return Ok(TrustWeights { trust, weights, no_trust: true });
    }
    let weights = trust.iter().zip(norms).map(|(&t, &n)| if t == 0.0 { 0.0 } else { t / sum * norm_std / n }).collect();
    Ok(TrustWeights { trust, weights, no_trust: false })
}

/// S1 side of SecAgg: quantized weights `ω̃_i = round(ω_i 2^fw)` and the
/// weighted mask sum `Σ ω̃_i r_i mod q`.
///
/// Fails if `Σ ω̃_i · B >= q/2`, since the aggregate would then wrap.
pub fn sec_agg_s1(
    weights: &[f64],
    masks: &[QuantizedVector],
    params: &FixedPointParams,
) -> Result<(Vec<u128>, QuantizedVector)> {
    if weights.len() != masks.len() || masks.is_empty() {
        return invalid("need one mask per weight");
    }
    let q = params.modulus;
    let wq = weights
        .iter()
        .map(|&w| {
            if !(w >= 0.0 && w.is_finite()) {
                return invalid(format!("weight {w} is not a finite nonnegative number"));
            }
            let v = (w * params.weight_scale()).round();
            if v >= 2f64.powi(127) {
                return Err(Error::Integrity(format!("weight {w} too large to quantize")));
            }
            Ok(v as u128)
        })
        .collect::<Result<Vec<u128>>>()?;
    let total: BigUint = wq.iter().map(|&w| BigUint::from(w)).sum::<BigUint>() * BigUint::from(params.max_magnitude());
    let half_q = q.to_biguint() >> 1u32;
    if total >= half_q {
        return Err(Error::Integrity(format!(
            "weighted aggregate may wrap: sum of quantized weights times B is {total}, limit {half_q}"
        )));
    }
    let d = masks[0].dim();
    let mut acc = vec![0u128; d];
    for (&w, r) in wq.iter().zip(masks) {
        if r.dim() != d || r.modulus() != q {
            return invalid("mask shape mismatch");
        }
        if w == 0 {
            continue;
        }
        let wr = q.reduce(w);
        for (a, &x) in acc.iter_mut().zip(r.residues()) {
            *a = q.add(*a, q.mul(wr, x));
        }
    }
    Ok((wq, QuantizedVector::new(acc, q)?))
}

/// S0 side of SecAgg: `Σ ω̃_i m_i - Σ ω̃_i r_i mod q`, returned as residues
/// at scale 2^(f + fw) together with the decoded real vector.
pub fn sec_agg_s0(
    masked: &[QuantizedVector],
    weights_q: &[u128],
    mask_sum: &QuantizedVector,
    params: &FixedPointParams,
) -> Result<(QuantizedVector, Vec<f64>)> {
    if masked.len() != weights_q.len() {
        return invalid("need one weight per masked update");
    }
    let q = params.modulus;
    let d = mask_sum.dim();
    let mut acc = vec![0u128; d];
    for (&w, m) in weights_q.iter().zip(masked) {
        if m.dim() != d || m.modulus() != q {
            return invalid("masked update shape mismatch");
        }
        if w == 0 {
            continue;
        }
        let wr = q.reduce(w);
        for (a, &x) in acc.iter_mut().zip(m.residues()) {
            *a = q.add(*a, q.mul(wr, x));
        }
    }
    for (a, &x) in acc.iter_mut().zip(mask_sum.residues()) {
        *a = q.sub(*a, x);
    }
    let agg = QuantizedVector::new(acc, q)?;
    let g = decode_aggregate(&agg, params);
    Ok((agg, g))
}

/// Decodes aggregate residues at scale 2^(f + fw).
pub fn decode_aggregate(agg: &QuantizedVector, params: &FixedPointParams) -> Vec<f64> {
    let s = params.scale() * params.weight_scale();
    agg.lifts().into_iter().map(|v| v as f64 / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::Modulus;
    use crate::jl::ProjectionMatrix;
    use crate::paillier::{keygen, KeySecurity};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn qv(v: &[u128], q: Modulus) -> QuantizedVector {
        QuantizedVector::new(v.to_vec(), q).unwrap()
    }

    #[test]
    fn sec_norm_toy_example() {
        let q = Modulus::general(101).unwrap();
        let params = FixedPointParams::new(q, 0, 0, 10.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (pk, sk) = keygen(32, KeySecurity::InsecureTest, &mut rng).unwrap();
        let r = qv(&[10, 20], q);
        let m = qv(&[13, 24], q);
        let proj = ProjectionMatrix::identity(2).unwrap();
        let ms = proj.project_mod_q(&m).unwrap();
        let rs = proj.project_mod_q(&r).unwrap();
        let enc: Vec<_> = rs.residues().iter().map(|&x| pk.encrypt_u128(x, &mut rng).unwrap()).collect();
        let pair = sec_norm_s0(&pk, &ms, &enc).unwrap();
        let rec = sec_norm_s1(&pk, &sk, &pair, rs.sq_norm(), &params, proj.norm_divisor()).unwrap();
        assert_eq!(rec.sq_norm_lift, 25);
        assert!((rec.estimate - 5.0).abs() < 1e-12);
        assert!(sec_norm_s0(&pk, &ms, &enc[..1]).is_err());
    }

    #[test]
    fn sec_cos_toy_example() {
        let q = Modulus::general(101).unwrap();
        let params = FixedPointParams::new(q, 0, 0, 10.0).unwrap();
        // p1 = r · s = 17 and p0 = 21
        let s = qv(&[1, 0], q);
        let r = qv(&[17, 5], q);
        let m = qv(&[21, 9], q);
        let p0 = sec_cos_s0(&m, &s).unwrap();
        assert_eq!(p0, 21);
        let c = sec_cos_s1(p0, &r, &s, 5.0, 1.0, &params).unwrap();
        assert_eq!(c.inner_lift, 4);
        assert!((c.cosine - 0.8).abs() < 1e-12);
        let z = sec_cos_s1(p0, &r, &s, 0.0, 1.0, &params).unwrap();
        assert_eq!(z.cosine, 0.0);
        assert!(sec_cos_s1(p0, &r, &s, 5.0, 0.0, &params).is_err());
    }

    #[test]
    fn trust_weight_examples() {
        let w = compute_trust_weights(&[0.8, -0.3], &[2.0, 4.0], 2.0).unwrap();
        assert_eq!(w.weights, vec![1.0, 0.0]);
        assert!(!w.no_trust);
        let w = compute_trust_weights(&[-0.5, -0.1], &[1.0, 1.0], 1.0).unwrap();
        assert!(w.no_trust);
        assert_eq!(w.weights, vec![0.0, 0.0]);
        let w = compute_trust_weights(&[0.9, 0.5], &[0.0, 1.0], 1.0).unwrap();
        assert_eq!(w.weights, vec![0.0, 1.0]);
    }

    #[test]
    fn sec_agg_unmasks_weighted_sum() {
        let q = Modulus::power_of_two(40).unwrap();
        let params = FixedPointParams::new(q, 4, 3, 4.0).unwrap();
        let g1 = [1.0, -2.0];
        let g2 = [0.5, 0.25];
        let (e1, _) = QuantizedVector::encode(&g1, &params);
        let (e2, _) = QuantizedVector::encode(&g2, &params);
        let r1 = qv(&[123456789, 987654321], q);
        let r2 = qv(&[555, (1u128 << 40) - 1], q);
        let m1 = e1.add(&r1).unwrap();
        let m2 = e2.add(&r2).unwrap();
        let (wq, msum) = sec_agg_s1(&[0.5, 2.0], &[r1, r2], &params).unwrap();
        assert_eq!(wq, vec![4, 16]);
        let (_, g) = sec_agg_s0(&[m1, m2], &wq, &msum, &params).unwrap();
        assert_eq!(g, vec![0.5 * 1.0 + 2.0 * 0.5, 0.5 * -2.0 + 2.0 * 0.25]);
    }

    #[test]
    fn sec_agg_rejects_wrapping_weights() {
        let q = Modulus::power_of_two(20).unwrap();
        let params = FixedPointParams::new(q, 4, 4, 4.0).unwrap();
        let r = QuantizedVector::zeros(2, q);
        // B = 64, 2^19 / 64 = 8192 = 512 * 2^4
        assert!(sec_agg_s1(&[511.0], &[r.clone()], &params).is_ok());
        assert!(matches!(sec_agg_s1(&[512.0], &[r.clone()], &params), Err(Error::Integrity(_))));
        assert!(sec_agg_s1(&[-1.0], &[r], &params).is_err());
    }
}
