//! Poisoning behaviour of Byzantine clients. Attacks act on plaintext
//! gradients (or labels) before quantization and masking.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seeds::derive_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    #[default]
    None,
    Signflip,
    Labelflip,
    Gaussian,
    Scaling,
    Minmax,
    Minsum,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::None,
        AttackKind::Signflip,
        AttackKind::Labelflip,
        AttackKind::Gaussian,
        AttackKind::Scaling,
        AttackKind::Minmax,
        AttackKind::Minsum,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Signflip => "signflip",
            AttackKind::Labelflip => "labelflip",
            AttackKind::Gaussian => "gaussian",
            AttackKind::Scaling => "scaling",
            AttackKind::Minmax => "minmax",
            AttackKind::Minsum => "minsum",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| crate::Error::InvalidArgument(format!("unknown attack {s}")))
    }
}

pub fn sign_flip(g: &[f64]) -> Vec<f64> {
    g.iter().map(|x| -x).collect()
}

/// `y -> C - 1 - y`.
pub fn label_flip(labels: &[u32], classes: u32) -> Vec<u32> {
    labels.iter().map(|&y| classes - 1 - y).collect()
}

pub fn scaling_attack(g: &[f64], c: f64) -> Vec<f64> {
    g.iter().map(|x| c * x).collect()
}

/// Population standard deviation of the coordinates of `g`.
pub fn coordinate_std(g: &[f64]) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    let n = g.len() as f64;
    let mean = g.iter().sum::<f64>() / n;
    (g.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Adds iid N(0, (2σ)²) noise, σ being the std of `g`'s own coordinates.
pub fn gaussian_attack(g: &[f64], seed: u64) -> Vec<f64> {
    let sigma = coordinate_std(g);
    if sigma == 0.0 {
        return g.to_vec();
    }
    let mut rng = derive_rng(seed, "gaussian-attack", &[]);
    let noise = Normal::new(0.0, 2.0 * sigma).unwrap();
    g.iter().map(|x| x + noise.sample(&mut rng)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollusionResult {
    pub gradient: Vec<f64>,
    pub gamma: f64,
}

fn mean(gs: &[Vec<f64>]) -> Vec<f64> {
    let d = gs[0].len();
    let mut m = vec![0.0; d];
    for g in gs {
        for (a, b) in m.iter_mut().zip(g) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= gs.len() as f64);
    m
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

const BISECTION_STEPS: usize = 50;
const GAMMA_TOLERANCE: f64 = 1e-5;

/// Largest γ ≥ 0 with `ok(γ)`, assuming the feasible set is an interval
/// containing 0.
fn search_gamma(ok: impl Fn(f64) -> bool) -> f64 {
    let mut lo = 0.0;
    let mut hi = 1.0;
    while ok(hi) {
        lo = hi;
        hi *= 2.0;
        if hi > 1e18 {
            return lo;
        }
    }
    for _ in 0..BISECTION_STEPS {
        if hi - lo <= GAMMA_TOLERANCE {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn collude(benign: &[Vec<f64>], ok: impl Fn(&[f64]) -> bool) -> Result<CollusionResult> {
    if benign.len() < 2 {
        return invalid("collusion attacks need at least two colluding gradients");
    }
    let d = benign[0].len();
    if d == 0 || benign.iter().any(|g| g.len() != d) {
        return invalid("colluding gradients must share a nonzero dimension");
    }
    let mu = mean(benign);
    let norm = mu.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(CollusionResult { gradient: mu, gamma: 0.0 });
    }
    let p: Vec<f64> = mu.iter().map(|x| -x / norm).collect();
    let candidate = |gamma: f64| -> Vec<f64> { mu.iter().zip(&p).map(|(m, q)| m + gamma * q).collect() };
    let gamma = search_gamma(|g| ok(&candidate(g)));
    Ok(CollusionResult { gradient: candidate(gamma), gamma })
}

/// Largest pairwise distance among the benign gradients.
pub fn max_pairwise_distance(benign: &[Vec<f64>]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..benign.len() {
        for j in i + 1..benign.len() {
            best = best.max(sq_dist(&benign[i], &benign[j]));
        }
    }
    best.sqrt()
}

/// `max_i Σ_j ‖g_i - g_j‖²` over the benign gradients.
pub fn max_sum_sq_distance(benign: &[Vec<f64>]) -> f64 {
    benign
        .iter()
        .map(|gi| benign.iter().map(|gj| sq_dist(gi, gj)).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `μ + γp` with p = -μ/‖μ‖ and the largest γ keeping the malicious
/// gradient's farthest benign distance within the benign diameter.
pub fn min_max(benign: &[Vec<f64>]) -> Result<CollusionResult> {
    let limit = max_pairwise_distance(benign);
    let limit_sq = limit * limit;
    collude(benign, |m| benign.iter().all(|g| sq_dist(m, g) <= limit_sq))
}

/// `μ + γp` with the largest γ keeping the malicious gradient's sum of
/// squared distances to the benign set within the largest benign one.
pub fn min_sum(benign: &[Vec<f64>]) -> Result<CollusionResult> {
    let limit = max_sum_sq_distance(benign);
    collude(benign, |m| benign.iter().map(|g| sq_dist(m, g)).sum::<f64>() <= limit)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackPlan {
    pub kind: AttackKind,
    pub fraction: f64,
    /// Multiplier for the scaling attack.
    pub scale: f64,
    pub seed: u64,
    attackers: BTreeSet<u32>,
}

impl AttackPlan {
    /// Picks `round(fraction * n)` attackers among client ids `0..n`.
    pub fn new(kind: AttackKind, fraction: f64, n: usize, scale: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return invalid(format!("byzantine fraction {fraction} outside [0, 1)"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return invalid("scaling factor must be positive");
        }
        let count = if kind == AttackKind::None { 0 } else { (fraction * n as f64).round() as usize };
        let mut rng = derive_rng(seed, "attackers", &[]);
        let attackers = index::sample(&mut rng, n.max(1), count.min(n)).into_iter().map(|i| i as u32).collect();
        Ok(AttackPlan { kind, fraction, scale, seed, attackers })
    }

    pub fn none() -> Self {
        AttackPlan { kind: AttackKind::None, fraction: 0.0, scale: 6.0, seed: 0, attackers: BTreeSet::new() }
    }

    pub fn attackers(&self) -> &BTreeSet<u32> {
        &self.attackers
    }

    pub fn is_attacker(&self, id: u32) -> bool {
        self.attackers.contains(&id)
    }

    pub fn flips_labels(&self, id: u32) -> bool {
        self.kind == AttackKind::Labelflip && self.is_attacker(id)
    }

    /// Replaces the attackers' entries of `grads` (the benign gradients of
    /// this round's selected clients) with their poisoned versions.
    ///
    /// Collusion attacks need at least two selected attackers; with fewer
    /// the attackers submit their benign gradients.
    pub fn apply(&self, round: u32, grads: &mut BTreeMap<u32, Vec<f64>>) -> Result<()> {
        let ids: Vec<u32> = grads.keys().copied().filter(|id| self.is_attacker(*id)).collect();
        match self.kind {
            AttackKind::None | AttackKind::Labelflip => {}
            AttackKind::Signflip => {
                for id in ids {
                    let g = grads.get_mut(&id).unwrap();
                    *g = sign_flip(g);
                }
            }
            AttackKind::Scaling => {
                for id in ids {
                    let g = grads.get_mut(&id).unwrap();
                    *g = scaling_attack(g, self.scale);
                }
            }
            AttackKind::Gaussian => {
                for id in ids {
                    let seed = crate::seeds::derive_u64(self.seed, "gaussian", &[round as u64, id as u64]);
                    let g = grads.get_mut(&id).unwrap();
                    *g = gaussian_attack(g, seed);
                }
            }
            AttackKind::Minmax | AttackKind::Minsum => {
                if ids.len() < 2 {
                    return Ok(());
                }
                let benign: Vec<Vec<f64>> = ids.iter().map(|id| grads[id].clone()).collect();
                let res = if self.kind == AttackKind::Minmax { min_max(&benign)? } else { min_sum(&benign)? };
                for id in ids {
                    grads.insert(id, res.gradient.clone());
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn sign_flip_examples() {
        assert_eq!(sign_flip(&[3.0, 4.0]), vec![-3.0, -4.0]);
        assert_eq!(sign_flip(&sign_flip(&[1.5, -2.0])), vec![1.5, -2.0]);
        assert!((cos(&sign_flip(&[1.0, 2.0, 3.0]), &[1.0, 2.0, 3.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn label_flip_examples() {
        assert_eq!(label_flip(&[0, 9], 10), vec![9, 0]);
        let all: Vec<u32> = (0..10).collect();
        assert_eq!(label_flip(&label_flip(&all, 10), 10), all);
        assert_eq!(label_flip(&[3], 100), vec![96]);
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(scaling_attack(&[1.0, -2.0], 6.0), vec![6.0, -12.0]);
        let g = [0.3, -1.2, 2.0];
        let s = scaling_attack(&g, 6.0);
        assert!((cos(&s, &[1.0, 1.0, 1.0]) - cos(&g, &[1.0, 1.0, 1.0])).abs() < 1e-12);
    }

    #[test]
    fn gaussian_examples() {
        assert_eq!(gaussian_attack(&[2.0; 5], 1), vec![2.0; 5]);
        let mut rng = derive_rng(0, "t", &[]);
        let g: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = gaussian_attack(&g, 7);
        assert_eq!(out, gaussian_attack(&g, 7));
        let diff: Vec<f64> = out.iter().zip(&g).map(|(a, b)| a - b).collect();
        let ratio = coordinate_std(&diff) / (2.0 * coordinate_std(&g));
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn identical_colluders_collapse_to_mean() {
        let g = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        let r = min_max(&g).unwrap();
        assert_eq!(r.gamma, 0.0);
        assert_eq!(r.gradient, vec![1.0, 2.0]);
        assert!(min_max(&g[..1]).is_err());
        let z = min_sum(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert_eq!(z.gradient, vec![0.0, 0.0]);
    }

    #[test]
    fn attacker_set_is_deterministic_and_sized() {
        let a = AttackPlan::new(AttackKind::Signflip, 0.4, 50, 6.0, 3).unwrap();
        let b = AttackPlan::new(AttackKind::Signflip, 0.4, 50, 6.0, 3).unwrap();
        assert_eq!(a.attackers(), b.attackers());
        assert_eq!(a.attackers().len(), 20);
        assert!(a.attackers().iter().all(|&i| i < 50));
        assert_eq!(AttackPlan::new(AttackKind::None, 0.4, 50, 6.0, 3).unwrap().attackers().len(), 0);
        assert!(AttackPlan::new(AttackKind::Signflip, 1.0, 50, 6.0, 3).is_err());
    }

    #[test]
    fn plan_applies_only_to_attackers() {
        let plan = AttackPlan::new(AttackKind::Signflip, 0.5, 4, 6.0, 1).unwrap();
        let mut grads: BTreeMap<u32, Vec<f64>> = (0..4).map(|i| (i, vec![1.0, 2.0])).collect();
        plan.apply(0, &mut grads).unwrap();
        for (id, g) in grads {
            let want = if plan.is_attacker(id) { vec![-1.0, -2.0] } else { vec![1.0, 2.0] };
            assert_eq!(g, want);
        }
    }
}
