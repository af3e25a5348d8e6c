//! Training substrate: synthetic Gaussian-cluster data, sharding, a
//! softmax-regression or one-hidden-layer model, and mean cross-entropy
//! gradients.

use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader};
use crate::error::{invalid, Error, Result};
use crate::seeds::derive_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<u32>,
    num_features: usize,
    num_classes: usize,
    seed: u64,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<u32>,
        num_features: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_features == 0 || num_classes < 2 {
            return invalid("dataset needs at least one feature and two classes");
        }
        if features.len() != labels.len() * num_features {
            return invalid("feature matrix does not match label count");
        }
        if features.iter().any(|x| !x.is_finite()) {
            return invalid("non-finite feature value");
        }
        if labels.iter().any(|&y| y as usize >= num_classes) {
            return invalid("label out of range");
        }
        Ok(Dataset { features, labels, num_features, num_classes, seed })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { features, labels, num_features: self.num_features, num_classes: self.num_classes, seed: self.seed }
    }

    /// Same samples with every label replaced by `f(label)`.
    pub fn map_labels(&self, f: impl Fn(u32) -> u32) -> Dataset {
        let mut out = self.clone();
        for y in &mut out.labels {
            *y = f(*y);
        }
        out
    }

    /// Header (samples u64, features u32, classes u32, seed u64), then
    /// row-major f64 features, then u32 labels. All big-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.features.len() * 8 + self.labels.len() * 4);
        codec::put_u64(&mut out, self.len() as u64);
        codec::put_u32(&mut out, self.num_features as u32);
        codec::put_u32(&mut out, self.num_classes as u32);
        codec::put_u64(&mut out, self.seed);
        for &x in &self.features {
            codec::put_f64(&mut out, x);
        }
        for &y in &self.labels {
            codec::put_u32(&mut out, y);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let samples = r.u64()? as usize;
        let nf = r.u32()? as usize;
        let nc = r.u32()? as usize;
        let seed = r.u64()?;
        let cells = samples
            .checked_mul(nf)
            .filter(|c| c.checked_mul(8).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| Error::Codec("dataset body truncated".into()))?;
        let mut features = Vec::with_capacity(cells);
        for _ in 0..cells {
            features.push(r.f64()?);
        }
        let mut labels = Vec::with_capacity(samples);
        for _ in 0..samples {
            labels.push(r.u32()?);
        }
        r.finish()?;
        Dataset::new(features, labels, nf, nc, seed).map_err(|e| Error::Codec(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Gaussian clusters with unit noise around class means drawn from
/// N(0, separation² / (2F) I), so two means are `separation` apart in
/// expectation. Labels are uniform.
pub fn generate_synthetic(
    seed: u64,
    samples: usize,
    features: usize,
    classes: usize,
    separation: f64,
) -> Result<Dataset> {
    generate_synthetic_scaled(seed, samples, features, classes, separation, 1.0)
}

/// [`generate_synthetic`] with every feature multiplied by `feature_scale`.
pub fn generate_synthetic_scaled(
    seed: u64,
    samples: usize,
    features: usize,
    classes: usize,
    separation: f64,
    feature_scale: f64,
) -> Result<Dataset> {
    if classes < 2 || features == 0 {
        return invalid("synthetic data needs classes >= 2 and features >= 1");
    }
    if !(separation >= 0.0 && separation.is_finite() && feature_scale > 0.0 && feature_scale.is_finite()) {
        return invalid("separation must be >= 0 and feature_scale > 0");
    }
    let mut rng = derive_rng(seed, "synthetic", &[]);
    let mean_std = separation / (2.0 * features as f64).sqrt();
    let means: Vec<f64> = if mean_std > 0.0 {
        let dist = Normal::new(0.0, mean_std).unwrap();
        (0..classes * features).map(|_| dist.sample(&mut rng)).collect()
    } else {
        vec![0.0; classes * features]
    };
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut xs = Vec::with_capacity(samples * features);
    let mut ys = Vec::with_capacity(samples);
    for _ in 0..samples {
        let y = rng.random_range(0..classes);
        for j in 0..features {
            xs.push(feature_scale * (means[y * features + j] + noise.sample(&mut rng)));
        }
        ys.push(y as u32);
    }
    Dataset::new(xs, ys, features, classes, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum PartitionScheme {
    Iid,
    LabelSkew { alpha: f64 },
}

/// Splits `ds` into `n` disjoint shards covering every sample.
pub fn partition(ds: &Dataset, n: usize, scheme: PartitionScheme, seed: u64) -> Result<Vec<Dataset>> {
    if n == 0 || n > ds.len() {
        return invalid(format!("cannot split {} samples into {n} shards", ds.len()));
    }
    let mut rng = derive_rng(seed, "partition", &[]);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];
    match scheme {
        PartitionScheme::Iid => {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut rng);
            let base = ds.len() / n;
            let extra = ds.len() % n;
            let mut it = idx.into_iter();
            for (i, shard) in shards.iter_mut().enumerate() {
                let take = base + usize::from(i < extra);
                shard.extend(it.by_ref().take(take));
            }
        }
        PartitionScheme::LabelSkew { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return invalid("Dirichlet concentration must be positive");
            }
            let gamma = Gamma::new(alpha, 1.0).unwrap();
            let pick = Uniform::new(0, n).unwrap();
            for c in 0..ds.num_classes() as u32 {
                let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == c).collect();
                idx.shuffle(&mut rng);
                let mut w: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = w.iter().sum();
                if !(total > 0.0) {
                    // every draw underflowed; put the class on one client
                    w = vec![0.0; n];
                    w[pick.sample(&mut rng)] = 1.0;
                } else {
                    w.iter_mut().for_each(|x| *x /= total);
                }
                let mut start = 0usize;
                let mut cum = 0.0;
                for (i, shard) in shards.iter_mut().enumerate() {
                    cum += w[i];
                    let end = if i + 1 == n { idx.len() } else { ((cum * idx.len() as f64).round() as usize).min(idx.len()) };
                    let end = end.max(start);
                    shard.extend_from_slice(&idx[start..end]);
                    start = end;
                }
            }
            // No shard may be empty: move one sample from the largest.
            while let Some(empty) = shards.iter().position(|s| s.is_empty()) {
                let donor = (0..n).max_by_key(|&i| shards[i].len()).unwrap();
                let moved = shards[donor].pop().unwrap();
                shards[empty].push(moved);
            }
        }
    }
    Ok(shards
        .into_iter()
        .map(|mut s| {
            s.sort_unstable();
            ds.subset(&s)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Architecture {
    Softmax { features: usize, classes: usize },
    /// One tanh hidden layer.
    Mlp { features: usize, hidden: usize, classes: usize },
}

impl Architecture {
    pub fn dim(&self) -> usize {
        match *self {
            Architecture::Softmax { features, classes } => (features + 1) * classes,
            Architecture::Mlp { features, hidden, classes } => (features + 1) * hidden + (hidden + 1) * classes,
        }
    }

    pub fn features(&self) -> usize {
        match *self {
            Architecture::Softmax { features, .. } | Architecture::Mlp { features, .. } => features,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Architecture::Softmax { classes, .. } | Architecture::Mlp { classes, .. } => classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: Vec<f64>,
}

fn log_softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|v| *v -= lse);
}

impl Model {
    pub fn zeros(arch: Architecture) -> Self {
        Model { arch, params: vec![0.0; arch.dim()] }
    }

    /// Softmax models start at zero; hidden layers get seeded uniform
    /// Glorot initialisation.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut m = Self::zeros(arch);
        if let Architecture::Mlp { features, hidden, classes } = arch {
            let mut rng = derive_rng(seed, "model-init", &[]);
            let a1 = (6.0 / (features + hidden) as f64).sqrt();
            let a2 = (6.0 / (hidden + classes) as f64).sqrt();
            let split = (features + 1) * hidden;
            for (i, w) in m.params.iter_mut().enumerate() {
                let a = if i < split { a1 } else { a2 };
                *w = rng.random_range(-a..a);
            }
            // zero biases
            for h in 0..hidden {
                m.params[h * (features + 1) + features] = 0.0;
            }
            for c in 0..classes {
                m.params[split + c * (hidden + 1) + hidden] = 0.0;
            }
        }
        m
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.dim() {
            return invalid(format!("expected {} parameters, got {}", arch.dim(), params.len()));
        }
        if params.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite model parameter".into()));
        }
        Ok(Model { arch, params })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    /// `W <- W - lr * g`.
    pub fn apply_update(&mut self, g: &[f64], lr: f64) -> Result<()> {
        if g.len() != self.params.len() {
            return invalid("update dimension mismatch");
        }
        for (w, &d) in self.params.iter_mut().zip(g) {
            *w -= lr * d;
        }
        if self.params.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("model diverged to non-finite values".into()));
        }
        Ok(())
    }

    fn affine(w: &[f64], x: &[f64], out: &mut [f64]) {
        let f = x.len();
        for (o, row) in out.iter_mut().zip(w.chunks_exact(f + 1)) {
            *o = row[..f].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[f];
        }
    }

    /// Log-probabilities for one sample; also returns hidden activations.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self.arch {
            Architecture::Softmax { classes, .. } => {
                let mut z = vec![0.0; classes];
                Self::affine(&self.params, x, &mut z);
                log_softmax_in_place(&mut z);
                (z, Vec::new())
            }
            Architecture::Mlp { features, hidden, classes } => {
                let split = (features + 1) * hidden;
                let mut h = vec![0.0; hidden];
                Self::affine(&self.params[..split], x, &mut h);
                h.iter_mut().for_each(|v| *v = v.tanh());
                let mut z = vec![0.0; classes];
                Self::affine(&self.params[split..], &h, &mut z);
                log_softmax_in_place(&mut z);
                (z, h)
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let (z, _) = self.forward(x);
        z.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    /// Mean cross-entropy over `indices` of `data`.
    pub fn loss_on(&self, data: &Dataset, indices: &[usize]) -> f64 {
        let total: f64 = indices.iter().map(|&i| -self.forward(data.row(i)).0[data.label(i) as usize]).sum();
        total / indices.len() as f64
    }
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    if model.arch.features() != data.num_features() || model.arch.classes() != data.num_classes() {
        return invalid("model and dataset shapes differ");
    }
    Ok(())
}

/// Mean cross-entropy gradient over the samples at `indices`.
pub fn gradient_on_indices(model: &Model, data: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    check_compatible(model, data)?;
    if indices.is_empty() {
        return invalid("gradient over an empty batch");
    }
    let mut g = vec![0.0; model.dim()];
    let nf = data.num_features();
    for &i in indices {
        let x = data.row(i);
        let y = data.label(i) as usize;
        let (logp, h) = model.forward(x);
        let delta: Vec<f64> = logp
            .iter()
            .enumerate()
            .map(|(c, lp)| lp.exp() - if c == y { 1.0 } else { 0.0 })
            .collect();
        match model.arch {
            Architecture::Softmax { .. } => {
                for (c, &dc) in delta.iter().enumerate() {
                    let row = &mut g[c * (nf + 1)..(c + 1) * (nf + 1)];
                    for (gj, &xj) in row[..nf].iter_mut().zip(x) {
                        *gj += dc * xj;
                    }
                    row[nf] += dc;
                }
            }
            Architecture::Mlp { features, hidden, .. } => {
                let split = (features + 1) * hidden;
                let w2 = &model.params[split..];
                let mut dh = vec![0.0; hidden];
                for (c, &dc) in delta.iter().enumerate() {
                    let row = &mut g[split + c * (hidden + 1)..split + (c + 1) * (hidden + 1)];
                    for (gj, &hj) in row[..hidden].iter_mut().zip(&h) {
                        *gj += dc * hj;
                    }
                    row[hidden] += dc;
                    let wrow = &w2[c * (hidden + 1)..c * (hidden + 1) + hidden];
                    for (d, &w) in dh.iter_mut().zip(wrow) {
                        *d += dc * w;
                    }
                }
                for (k, d) in dh.iter_mut().enumerate() {
                    *d *= 1.0 - h[k] * h[k];
                    let row = &mut g[k * (features + 1)..(k + 1) * (features + 1)];
                    for (gj, &xj) in row[..features].iter_mut().zip(x) {
                        *gj += *d * xj;
                    }
                    row[features] += *d;
                }
            }
        }
    }
    let inv = 1.0 / indices.len() as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    if let Some(j) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient at coordinate {j} (max |W| = {:.3e})",
            model.params.iter().fold(0.0f64, |m, w| m.max(w.abs()))
        )));
    }
    Ok(g)
}

/// Gradient over a seeded batch of `batch_size` samples drawn without
/// replacement. A batch as large as the shard uses every sample.
pub fn compute_gradient(model: &Model, shard: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<f64>> {
    if batch_size == 0 || batch_size > shard.len() {
        return invalid(format!("batch of {batch_size} from a shard of {}", shard.len()));
    }
    let idx: Vec<usize> = if batch_size == shard.len() {
        (0..shard.len()).collect()
    } else {
        let mut rng = derive_rng(seed, "batch", &[]);
        let mut v = index::sample(&mut rng, shard.len(), batch_size).into_vec();
        v.sort_unstable();
        v
    };
    gradient_on_indices(model, shard, &idx)
}

/// Full-batch gradient on the trusted dataset.
pub fn reference_gradient(model: &Model, trusted: &Dataset) -> Result<Vec<f64>> {
    if trusted.is_empty() {
        return invalid("trusted dataset is empty");
    }
    let idx: Vec<usize> = (0..trusted.len()).collect();
    gradient_on_indices(model, trusted, &idx)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

pub fn evaluate(model: &Model, test: &Dataset) -> Result<Evaluation> {
    check_compatible(model, test)?;
    if test.is_empty() {
        return invalid("empty test set");
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..test.len() {
        let (logp, _) = model.forward(test.row(i));
        let y = test.label(i) as usize;
        loss -= logp[y];
        let pred = logp
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (c, &v)| if v > b.1 { (c, v) } else { b })
            .0;
        correct += usize::from(pred == y);
    }
    Ok(Evaluation { accuracy: correct as f64 / test.len() as f64, loss: loss / test.len() as f64 })
}
