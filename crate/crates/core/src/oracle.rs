//! Plaintext references: FLTrust, FedAvg, Krum and trimmed mean in the
//! clear, the equal-observables gradient construction used by the S0
//! simulator, and a chi-square uniformity test.

use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::attacks::sq_dist;
use crate::error::{invalid, Error, Result};
use crate::seeds::derive_rng;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = l2_norm(a) * l2_norm(b);
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FltrustOutcome {
    pub aggregate: Vec<f64>,
    pub cosines: Vec<f64>,
    pub trust: Vec<f64>,
    pub weights: Vec<f64>,
    pub no_trust: bool,
}

/// Weights from given cosines and norms: `max(0, cos_i) / Σ max(0, cos_j)
/// * ‖g_std‖ / ‖g_i‖`, with zero-norm clients dropped.
pub fn fltrust_weights(cosines: &[f64], norms: &[f64], norm_std: f64) -> (Vec<f64>, Vec<f64>, bool) {
    let trust: Vec<f64> = cosines
        .iter()
        .zip(norms)
        .map(|(&c, &n)| if n > 0.0 { c.max(0.0) } else { 0.0 })
        .collect();
    let total: f64 = trust.iter().sum();
    if total <= 0.0 {
        return (trust.clone(), vec![0.0; trust.len()], true);
    }
    let weights = trust
        .iter()
        .zip(norms)
        .map(|(&t, &n)| if t > 0.0 { t / total * norm_std / n } else { 0.0 })
        .collect();
    (trust, weights, false)
}

/// FLTrust aggregation in real arithmetic.
pub fn fltrust_plain(gradients: &[Vec<f64>], g_std: &[f64]) -> Result<FltrustOutcome> {
    if gradients.is_empty() {
        return invalid("no gradients");
    }
    let norm_std = l2_norm(g_std);
    if norm_std == 0.0 {
        return Err(Error::Protocol("reference gradient has zero norm".into()));
    }
    if gradients.iter().any(|g| g.len() != g_std.len()) {
        return invalid("gradient dimension mismatch");
    }
    let norms: Vec<f64> = gradients.iter().map(|g| l2_norm(g)).collect();
    let cosines: Vec<f64> = gradients.iter().map(|g| cosine(g, g_std)).collect();
    let (trust, weights, no_trust) = fltrust_weights(&cosines, &norms, norm_std);
    let aggregate = weighted_sum(gradients, &weights);
    Ok(FltrustOutcome { aggregate, cosines, trust, weights, no_trust })
}

pub fn weighted_sum(gradients: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let d = gradients.first().map_or(0, |g| g.len());
    let mut out = vec![0.0; d];
    for (g, &w) in gradients.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(g) {
            *o += w * x;
        }
    }
    out
}

pub fn fedavg_plain(gradients: &[Vec<f64>]) -> Result<Vec<f64>> {
    if gradients.is_empty() {
        return invalid("no gradients");
    }
    let w = vec![1.0 / gradients.len() as f64; gradients.len()];
    Ok(weighted_sum(gradients, &w))
}

/// Index of the gradient with the smallest sum of squared distances to its
/// `n - f - 2` nearest neighbours.
pub fn krum_plain(gradients: &[Vec<f64>], f: usize) -> Result<usize> {
    let n = gradients.len();
    if n <= 2 * f + 2 {
        return invalid(format!("Krum needs n > 2f + 2, got n = {n}, f = {f}"));
    }
    let m = n - f - 2;
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(&gradients[i], &gradients[j])).collect();
            d.sort_by(f64::total_cmp);
            d[..m].iter().sum()
        })
        .collect();
    Ok((0..n).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap())
}

/// Coordinatewise mean after dropping the `beta` largest and smallest values.
pub fn trimmed_mean_plain(gradients: &[Vec<f64>], beta: usize) -> Result<Vec<f64>> {
    let n = gradients.len();
    if n == 0 || 2 * beta >= n {
        return invalid(format!("trimmed mean needs 2*beta < n, got n = {n}, beta = {beta}"));
    }
    let d = gradients[0].len();
    let mut col = vec![0.0; n];
    Ok((0..d)
        .map(|j| {
            for (c, g) in col.iter_mut().zip(gradients) {
                *c = g[j];
            }
            col.sort_by(f64::total_cmp);
            col[beta..n - beta].iter().sum::<f64>() / (n - 2 * beta) as f64
        })
        .collect())
}

/// A vector ψ with `ψ · g_std = rho` and `‖ψ‖ = norm_target` whose
/// component orthogonal to `g_std` is random (seeded).
pub fn construct_equivalent_gradient(rho: f64, norm_target: f64, g_std: &[f64], seed: u64) -> Result<Vec<f64>> {
    let d = g_std.len();
    if d < 2 {
        return invalid("need dimension at least 2");
    }
    let s = l2_norm(g_std);
    if s == 0.0 || !s.is_finite() {
        return invalid("reference gradient must be nonzero and finite");
    }
    if !(norm_target >= 0.0 && norm_target.is_finite() && rho.is_finite()) {
        return invalid("targets must be finite with norm >= 0");
    }
    let bound = norm_target * s;
    if rho.abs() > bound * (1.0 + 1e-12) {
        return invalid(format!("infeasible: |rho| = {} exceeds norm * ‖g_std‖ = {bound}", rho.abs()));
    }
    let unit: Vec<f64> = g_std.iter().map(|x| x / s).collect();
    let a = (rho / s).clamp(-norm_target, norm_target);
    let b = (norm_target * norm_target - a * a).max(0.0).sqrt();
    let mut rng = derive_rng(seed, "equivalent-gradient", &[]);
    let ortho = loop {
        let mut u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let before = l2_norm(&u);
        // two Gram-Schmidt passes for a clean orthogonal component
        for _ in 0..2 {
            let c = dot(&u, &unit);
            u.iter_mut().zip(&unit).for_each(|(x, e)| *x -= c * e);
        }
        let n = l2_norm(&u);
        if n > 1e-6 * before {
            u.iter_mut().for_each(|x| *x /= n);
            break u;
        }
    };
    Ok(unit.iter().zip(&ortho).map(|(e, o)| a * e + b * o).collect())
}

/// Upper-tail p-value of Pearson's chi-square statistic for equal
/// expected bucket counts.
pub fn chi_square_uniform_pvalue(counts: &[u64]) -> f64 {
    let k = counts.len();
    assert!(k >= 2, "need at least two buckets");
    let total: u64 = counts.iter().sum();
    let expect = total as f64 / k as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    ChiSquared::new((k - 1) as f64).unwrap().sf(stat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fltrust_single_client_rescales() {
        let g = vec![vec![3.0, 4.0]];
        let out = fltrust_plain(&g, &[1.0, 1.0]).unwrap();
        let s = 2f64.sqrt() / 5.0;
        assert!((out.aggregate[0] - 3.0 * s).abs() < 1e-12);
        assert!((out.aggregate[1] - 4.0 * s).abs() < 1e-12);
    }

    #[test]
    fn fltrust_zeroes_flipped_clients() {
        let g = vec![vec![1.0, 2.0], vec![-1.0, -2.0]];
        let out = fltrust_plain(&g, &[1.0, 1.0]).unwrap();
        assert_eq!(out.weights[1], 0.0);
        assert!(out.weights[0] > 0.0);
        assert!(fltrust_plain(&g, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn fltrust_weight_example() {
        let (_, w, nt) = fltrust_weights(&[0.8, -0.3], &[2.0, 4.0], 2.0);
        assert_eq!(w, vec![1.0, 0.0]);
        assert!(!nt);
        let (_, w, nt) = fltrust_weights(&[-1.0, -1.0], &[1.0, 1.0], 1.0);
        assert_eq!(w, vec![0.0, 0.0]);
        assert!(nt);
    }

    #[test]
    fn fedavg_examples() {
        assert_eq!(fedavg_plain(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(fedavg_plain(&[vec![1.5, -2.0]]).unwrap(), vec![1.5, -2.0]);
        assert_eq!(
            fedavg_plain(&[vec![3.0, 3.0], vec![1.0, 1.0]]).unwrap(),
            fedavg_plain(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap()
        );
        assert!(fedavg_plain(&[]).is_err());
    }

    #[test]
    fn krum_skips_outliers() {
        let mut g: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0 + 0.01 * i as f64, 1.0]).collect();
        g.push(vec![100.0, -100.0]);
        let i = krum_plain(&g, 1).unwrap();
        assert_ne!(i, 6);
        assert!(krum_plain(&g[..4], 1).is_err());
        let same = vec![vec![2.0, 2.0]; 5];
        assert_eq!(same[krum_plain(&same, 1).unwrap()], vec![2.0, 2.0]);
    }

    #[test]
    fn trimmed_mean_examples() {
        let g = vec![vec![0.0], vec![5.0], vec![10.0], vec![100.0]];
        assert_eq!(trimmed_mean_plain(&g, 1).unwrap(), vec![7.5]);
        assert_eq!(trimmed_mean_plain(&vec![vec![1.0, 2.0]; 3], 1).unwrap(), vec![1.0, 2.0]);
        assert!(trimmed_mean_plain(&g, 2).is_err());
    }

    #[test]
    fn equivalent_gradient_cases() {
        let gs = [3.0, 4.0, 0.0, 0.0];
        let psi = construct_equivalent_gradient(2.0 * 5.0, 2.0, &gs, 1).unwrap();
        for (p, e) in psi.iter().zip([1.2, 1.6, 0.0, 0.0]) {
            assert!((p - e).abs() < 1e-12);
        }
        let psi = construct_equivalent_gradient(0.0, 3.0, &gs, 2).unwrap();
        assert!(dot(&psi, &gs).abs() < 1e-12);
        assert!((l2_norm(&psi) - 3.0).abs() < 1e-12);
        assert!(construct_equivalent_gradient(10.1, 2.0, &gs, 1).is_err());
        assert!(construct_equivalent_gradient(1.0, 2.0, &[1.0], 1).is_err());
        let a = construct_equivalent_gradient(1.0, 2.0, &gs, 5).unwrap();
        let b = construct_equivalent_gradient(1.0, 2.0, &gs, 6).unwrap();
        assert_ne!(a, b);
        assert!((dot(&a, &gs) - dot(&b, &gs)).abs() < 1e-12);
        assert!((l2_norm(&a) - l2_norm(&b)).abs() < 1e-12);
    }

    #[test]
    fn chi_square_extremes() {
        assert!(chi_square_uniform_pvalue(&[100; 16]) > 0.99);
        let mut skew = [100u64; 16];
        skew[0] = 400;
        assert!(chi_square_uniform_pvalue(&skew) < 1e-6);
    }
}
