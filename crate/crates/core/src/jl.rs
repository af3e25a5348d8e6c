//! Integer Johnson-Lindenstrauss projection with ±1 entries.
//!
//! Projections are exact integer sums; the 1/√k factor is applied only
//! when converting back to reals.

use std::sync::OnceLock;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::encoding::{FixedPointParams, QuantizedVector};
use crate::error::{invalid, Error, Result};

/// Smallest k with k >= (4 + 2 ln(1/δ)) / ε².
pub fn required_dimension(epsilon: f64, delta: f64) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 1.0) || !(delta > 0.0 && delta < 1.0) {
        return invalid(format!("epsilon = {epsilon}, delta = {delta} must lie in (0, 1)"));
    }
    Ok(((4.0 + 2.0 * (1.0 / delta).ln()) / (epsilon * epsilon)).ceil() as usize)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProjectionKind {
    /// Rows expanded from a ChaCha20 stream keyed by the seed, one stream per row.
    Rademacher { seed: [u8; 32] },
    /// k = d, no compression. Norm estimates are not descaled by k.
    Identity,
    /// Fixed rows with entries in {-1, 0, 1}, for tests.
    Explicit { rows: Vec<Vec<i8>> },
}

#[derive(Debug)]
pub struct ProjectionMatrix {
    kind: ProjectionKind,
    k: usize,
    d: usize,
    // Sign bitmaps, bit set means +1. Filled on first use.
    rows: OnceLock<Vec<Vec<u64>>>,
}

impl Clone for ProjectionMatrix {
    fn clone(&self) -> Self {
        ProjectionMatrix {
            kind: self.kind.clone(),
            k: self.k,
            d: self.d,
            rows: OnceLock::new(),
        }
    }
}

impl PartialEq for ProjectionMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.k == other.k && self.d == other.d
    }
}

/// Seeded k x d matrix with unbiased ±1 entries.
pub fn sample_matrix(seed: [u8; 32], k: usize, d: usize) -> Result<ProjectionMatrix> {
    if k == 0 || k > d {
        return invalid(format!("projection needs 1 <= k <= d, got k = {k}, d = {d}"));
    }
    Ok(ProjectionMatrix { kind: ProjectionKind::Rademacher { seed }, k, d, rows: OnceLock::new() })
}

fn row_words(seed: &[u8; 32], row: usize, d: usize) -> Vec<u64> {
    let mut rng = ChaCha20Rng::from_seed(*seed);
    rng.set_stream(row as u64);
    let words = d.div_ceil(64);
    let mut out: Vec<u64> = (0..words).map(|_| rng.next_u64()).collect();
    if d % 64 != 0 {
        *out.last_mut().unwrap() &= (1u64 << (d % 64)) - 1;
    }
    out
}

impl ProjectionMatrix {
    pub fn identity(d: usize) -> Result<Self> {
        if d == 0 {
            return invalid("identity projection of dimension 0");
        }
        Ok(ProjectionMatrix { kind: ProjectionKind::Identity, k: d, d, rows: OnceLock::new() })
    }

    pub fn from_rows(rows: Vec<Vec<i8>>) -> Result<Self> {
        let k = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        if k == 0 || d == 0 || k > d {
            return invalid("explicit projection needs 1 <= k <= d");
        }
        if rows.iter().any(|r| r.len() != d || r.iter().any(|e| !(-1..=1).contains(e))) {
            return invalid("explicit rows must be equal-length vectors over {-1, 0, 1}");
        }
        Ok(ProjectionMatrix { kind: ProjectionKind::Explicit { rows }, k, d, rows: OnceLock::new() })
    }

    pub fn kind(&self) -> &ProjectionKind {
        &self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> Option<[u8; 32]> {
        match &self.kind {
            ProjectionKind::Rademacher { seed } => Some(*seed),
            _ => None,
        }
    }

    /// Divisor applied to squared norms of the unscaled projection.
    pub fn norm_divisor(&self) -> f64 {
        match self.kind {
            ProjectionKind::Identity => 1.0,
            _ => self.k as f64,
        }
    }

    fn bitmaps(&self, seed: &[u8; 32]) -> &[Vec<u64>] {
        self.rows.get_or_init(|| (0..self.k).map(|l| row_words(seed, l, self.d)).collect())
    }

    pub fn entry(&self, l: usize, j: usize) -> i8 {
        assert!(l < self.k && j < self.d, "entry ({l}, {j}) out of range");
        match &self.kind {
            ProjectionKind::Identity => (l == j) as i8,
            ProjectionKind::Explicit { rows } => rows[l][j],
            ProjectionKind::Rademacher { seed } => {
                if (self.bitmaps(seed)[l][j / 64] >> (j % 64)) & 1 == 1 {
                    1
                } else {
                    -1
                }
            }
        }
    }

    /// Row `l` as ±1 values (0 off-diagonal for the identity).
    pub fn row(&self, l: usize) -> Vec<i8> {
        (0..self.d).map(|j| self.entry(l, j)).collect()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.d {
            return invalid(format!("projection expects dimension {}, got {len}", self.d));
        }
        Ok(())
    }

    /// `out_l = Σ_j R_lj v_j mod q`.
    pub fn project_mod_q(&self, v: &QuantizedVector) -> Result<QuantizedVector> {
        self.check_dim(v.dim())?;
        let q = v.modulus();
        let xs = v.residues();
        let seed = match &self.kind {
            ProjectionKind::Identity => return Ok(v.clone()),
            ProjectionKind::Explicit { rows } => {
                let out = rows
                    .iter()
                    .map(|r| {
                        r.iter().zip(xs).fold(0u128, |acc, (&e, &x)| match e {
                            1 => q.add(acc, x),
                            -1 => q.sub(acc, x),
                            _ => acc,
                        })
                    })
                    .collect();
                return QuantizedVector::new(out, q);
            }
            ProjectionKind::Rademacher { seed } => seed,
        };
        // Σ_j R_lj v_j = 2 Σ_{R_lj = +1} v_j - Σ_j v_j. Sums wrap mod 2^128 and
        // are reduced once per row: exact for q = 2^κ2, and for q < 2^64 the
        // sum of at most 2^64 residues cannot wrap.
        let total = q.reduce(xs.iter().fold(0u128, |acc, &x| acc.wrapping_add(x)));
        let out = self
            .bitmaps(seed)
            .iter()
            .map(|words| {
                let mut pos = 0u128;
                for (&w, chunk) in words.iter().zip(xs.chunks(64)) {
                    for (b, &x) in chunk.iter().enumerate() {
                        let m = 0u128.wrapping_sub(((w >> b) & 1) as u128);
                        pos = pos.wrapping_add(x & m);
                    }
                }
                let pos = q.reduce(pos);
                q.sub(q.add(pos, pos), total)
            })
            .collect();
        QuantizedVector::new(out, q)
    }

    /// Exact integer projection of integer coordinates.
    pub fn project_integer(&self, v: &[i128]) -> Result<Vec<i128>> {
        self.check_dim(v.len())?;
        let seed = match &self.kind {
            ProjectionKind::Identity => return Ok(v.to_vec()),
            ProjectionKind::Explicit { rows } => {
                return Ok(rows
                    .iter()
                    .map(|r| r.iter().zip(v).map(|(&e, &x)| e as i128 * x).sum())
                    .collect())
            }
            ProjectionKind::Rademacher { seed } => seed,
        };
        Ok(self
            .bitmaps(seed)
            .iter()
            .map(|words| {
                v.iter()
                    .enumerate()
                    .map(|(j, &x)| if (words[j / 64] >> (j % 64)) & 1 == 1 { x } else { -x })
                    .sum()
            })
            .collect())
    }

    /// `out_l = (1/√s) Σ_j R_lj v_j` with s = [`Self::norm_divisor`].
    pub fn project_real(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(v.len())?;
        let s = self.norm_divisor().sqrt();
        let seed = match &self.kind {
            ProjectionKind::Identity => return Ok(v.to_vec()),
            ProjectionKind::Explicit { rows } => {
                return Ok(rows
                    .iter()
                    .map(|r| r.iter().zip(v).map(|(&e, &x)| e as f64 * x).sum::<f64>() / s)
                    .collect())
            }
            ProjectionKind::Rademacher { seed } => seed,
        };
        Ok(self
            .bitmaps(seed)
            .iter()
            .map(|words| {
                let mut acc = 0.0;
                for (j, &x) in v.iter().enumerate() {
                    if (words[j / 64] >> (j % 64)) & 1 == 1 {
                        acc += x;
                    } else {
                        acc -= x;
                    }
                }
                acc / s
            })
            .collect())
    }
}

/// `sqrt(lift(sq_norm_mod) / divisor) / 2^f`. `divisor` is k for a
/// compressing projection.
pub fn norm_estimate_from_projection(
    sq_norm_mod: u128,
    divisor: f64,
    params: &FixedPointParams,
) -> Result<f64> {
    let lift = params.modulus.center_lift(sq_norm_mod);
    if lift < 0 {
        return Err(Error::Integrity(format!("negative squared norm lift {lift}")));
    }
    Ok((lift as f64 / divisor).sqrt() / params.scale())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{encode, Modulus};

    #[test]
    fn dimension_bound_examples() {
        assert_eq!(required_dimension(0.2, 0.01).unwrap(), 331);
        assert_eq!(required_dimension(0.1, 0.01).unwrap(), 1322);
        let loose = required_dimension(1.0 - 1e-9, 0.99).unwrap();
        assert!(loose >= 5, "{loose}");
        assert!(required_dimension(0.0, 0.5).is_err());
        assert!(required_dimension(0.5, 1.0).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_matrix([7; 32], 2, 4).unwrap();
        let b = sample_matrix([7; 32], 2, 4).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert!(sample_matrix([7; 32], 5, 4).is_err());
    }

    #[test]
    fn basis_vector_picks_a_column() {
        let r = sample_matrix([3; 32], 4, 4).unwrap();
        for j in 0..4 {
            let mut e = vec![0.0; 4];
            e[j] = 1.0;
            let out = r.project_real(&e).unwrap();
            for (l, &o) in out.iter().enumerate() {
                assert_eq!(o * 2.0, r.entry(l, j) as f64);
            }
        }
    }

    #[test]
    fn entries_are_unbiased() {
        let r = sample_matrix([11; 32], 100, 10_000).unwrap();
        let sum: i64 = (0..100).flat_map(|l| r.row(l)).map(|e| e as i64).sum();
        let mean = sum as f64 / 1e6;
        assert!(mean.abs() < 0.01, "{mean}");
    }

    #[test]
    fn hand_projection_mod_101() {
        let r = ProjectionMatrix::from_rows(vec![vec![1, -1]]).unwrap();
        let q = Modulus::general(101).unwrap();
        let v = QuantizedVector::new(vec![3, 4], q).unwrap();
        let out = r.project_mod_q(&v).unwrap();
        assert_eq!(out.residues(), &[100]);
        assert_eq!(out.lifts(), vec![-1]);
        let z = r.project_mod_q(&QuantizedVector::zeros(2, q)).unwrap();
        assert_eq!(z.residues(), &[0]);
    }

    #[test]
    fn norm_estimate_examples() {
        let p = FixedPointParams::new(Modulus::PowerOfTwo(64), 16, 20, 8.0).unwrap();
        let v = encode(5.0, &p);
        let sq = p.modulus.mul(v, v);
        assert!((norm_estimate_from_projection(sq, 1.0, &p).unwrap() - 5.0).abs() < 1e-12);

        let p0 = FixedPointParams::new(Modulus::general(101).unwrap(), 0, 0, 8.0).unwrap();
        let est = norm_estimate_from_projection(25, 2.0, &p0).unwrap();
        assert!((est - (12.5f64).sqrt()).abs() < 1e-12);
        assert!(norm_estimate_from_projection(100, 2.0, &p0).is_err());
    }

    #[test]
    fn identity_kind_is_a_no_op() {
        let r = ProjectionMatrix::identity(3).unwrap();
        let q = Modulus::PowerOfTwo(16);
        let v = QuantizedVector::new(vec![1, 2, 65535], q).unwrap();
        assert_eq!(r.project_mod_q(&v).unwrap(), v);
        assert_eq!(r.project_real(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(r.norm_divisor(), 1.0);
    }

    #[test]
    fn identity_double_scales_by_root_k() {
        let r = ProjectionMatrix::from_rows(vec![vec![1, 0], vec![0, 1]]).unwrap();
        let out = r.project_real(&[3.0, 4.0]).unwrap();
        assert!((out[0] - 3.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((out[1] - 4.0 / 2f64.sqrt()).abs() < 1e-12);
        let q = Modulus::general(101).unwrap();
        let v = QuantizedVector::new(vec![3, 4], q).unwrap();
        let out = r.project_mod_q(&v).unwrap();
        assert_eq!(out.residues(), &[3, 4]);
        let sq = out.sq_norm();
        assert_eq!(sq, 25);
        let p0 = FixedPointParams::new(q, 0, 0, 8.0).unwrap();
        let est = norm_estimate_from_projection(sq, r.norm_divisor(), &p0).unwrap();
        assert!((est - 3.5355339).abs() < 1e-6);
    }

    #[test]
    fn integer_and_modular_projections_agree() {
        let r = sample_matrix([5; 32], 7, 130).unwrap();
        let q = Modulus::PowerOfTwo(40);
        let ints: Vec<i128> = (0..130).map(|j| (j as i128 * 7919) % 1000 - 500).collect();
        let v = QuantizedVector::new(ints.iter().map(|&x| q.from_i128(x)).collect(), q).unwrap();
        let lifted = r.project_mod_q(&v).unwrap().lifts();
        assert_eq!(lifted, r.project_integer(&ints).unwrap());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::encoding::Modulus;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn modular_projection_matches_integer(
            seed: [u8; 32],
            v in proptest::collection::vec(-(1i128 << 40)..(1i128 << 40), 1..120),
            k_frac in 0.01f64..1.0,
            bits in prop::sample::select(vec![24u32, 61, 64, 100, 128]),
        ) {
            let d = v.len();
            let k = ((k_frac * d as f64).ceil() as usize).clamp(1, d);
            let q = Modulus::PowerOfTwo(bits);
            let m = sample_matrix(seed, k, d).unwrap();
            let qv = QuantizedVector::new(v.iter().map(|&x| q.from_i128(x)).collect(), q).unwrap();
            let want: Vec<u128> = m.project_integer(&v).unwrap().into_iter().map(|x| q.from_i128(x)).collect();
            let got = m.project_mod_q(&qv).unwrap();
            prop_assert_eq!(got.residues(), &want[..]);
        }

        #[test]
        fn entries_are_signs_and_deterministic(seed: [u8; 32], k in 1usize..20, extra in 0usize..20) {
            let d = k + extra;
            let a = sample_matrix(seed, k, d).unwrap();
            let b = sample_matrix(seed, k, d).unwrap();
            for l in 0..k {
                prop_assert_eq!(a.row(l), b.row(l));
                prop_assert!(a.row(l).iter().all(|&e| e == 1 || e == -1));
            }
        }
    }
}
