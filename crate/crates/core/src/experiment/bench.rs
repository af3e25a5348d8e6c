//! Compression benchmark: one secure round per projection ratio, reporting
//! SecNorm time, ciphertext operation counts and S0↔S1 traffic against
//! the uncompressed row.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::config::{ExperimentConfig, Kappa2, ModelKind, Scheme};
use crate::experiment::runner::prepare_data;
use crate::protocol::{Federation, FederationSetup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub name: String,
    /// Projection ratios k/d; 1.0 runs the uncompressed identity.
    pub ratios: Vec<f64>,
    /// Model, data and crypto settings shared by every row. `scheme`,
    /// `compression_ratio`, `k` and `rounds` are overwritten per row.
    pub base: ExperimentConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut base = ExperimentConfig { name: "bench".into(), clients: 2, rounds: 1, ..Default::default() };
        base.model.kind = ModelKind::Softmax;
        base.model.features = 9999;
        base.model.classes = 10;
        base.data.train_samples = 64;
        base.data.test_samples = 16;
        base.data.trusted_samples = 16;
        base.batch_size = 16;
        base.record_timings = true;
        BenchConfig { name: "compression".into(), ratios: vec![1.0, 0.01, 0.001, 0.0001], base }
    }
}

impl BenchConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// κ2 resolved once for the uncompressed setting and used by every
    /// row, so rows differ only in k.
    pub fn kappa2_bits(&self) -> Result<u32> {
        let mut c = self.base.clone();
        c.scheme = Scheme::OursUncompressed;
        c.crypto.k = None;
        c.crypto.compression_ratio = None;
        c.kappa2_bits()
    }

    /// Configuration of the row for `ratio`.
    pub fn row_config(&self, ratio: f64, kappa2: u32) -> ExperimentConfig {
        let mut c = self.base.clone();
        c.rounds = 1;
        c.crypto.k = None;
        c.crypto.kappa2 = Kappa2::Bits(kappa2);
        if ratio == 1.0 {
            c.scheme = Scheme::OursUncompressed;
            c.crypto.compression_ratio = None;
        } else {
            c.scheme = Scheme::OursCompressed;
            c.crypto.compression_ratio = Some(ratio);
        }
        c.name = format!("{}-{ratio}", self.name);
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub ratio: f64,
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub kappa1: u32,
    pub kappa2: u32,
    pub sec_norm_ms: f64,
    pub online_ms: f64,
    pub offline_ms: f64,
    pub sec_norm_exps: u64,
    pub sec_norm_muls: u64,
    /// k·n + n.
    pub expected_ops: u64,
    /// Sum of S0→S1 and S1→S0 frame lengths, encrypted mask packs included.
    pub s0s1_bytes: u64,
    /// Payload content without framing, ids or counts:
    /// (kn + n) ciphertexts and (3d + 3n) residues.
    pub exact_bytes: u64,
    pub framing_overhead: f64,
    /// (2kn + 4n + d) · 2κ1 bits.
    pub table_bits: u64,
    /// Measured S0↔S1 bytes over those of the ratio 1.0 row.
    pub bytes_ratio: f64,
    pub table_ratio: f64,
    pub sec_norm_speedup: f64,
    pub online_speedup: f64,
}

impl BenchRow {
    pub fn ops_match(&self) -> bool {
        self.sec_norm_exps == self.expected_ops && self.sec_norm_muls == self.expected_ops
    }
}

/// Closed-form S0↔S1 content bytes for one round.
pub fn exact_s0s1_bytes(k: usize, d: usize, n: usize, ct_width: usize, residue_width: usize) -> u64 {
    ((k * n + n) * ct_width + (3 * n + 3 * d) * residue_width) as u64
}

pub fn table_bits(k: usize, d: usize, n: usize, kappa1: u32) -> u64 {
    (2 * k * n + 4 * n + d) as u64 * 2 * kappa1 as u64
}

pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.ratios.is_empty() {
        return Err(Error::Config("bench needs at least one ratio".into()));
    }
    let kappa2 = cfg.kappa2_bits()?;
    let mut rows = Vec::new();
    for &ratio in &cfg.ratios {
        let rc = cfg.row_config(ratio, kappa2);
        rc.validate()?;
        let data = prepare_data(&rc)?;
        let setup = FederationSetup {
            initial_model: data.initial.clone(),
            shards: data.shards,
            trusted: data.trusted,
            attack: rc.attack_plan()?,
        };
        let pc = rc.protocol_config()?;
        let (d, n, k) = (rc.dim(), rc.clients, pc.k.unwrap_or(rc.dim()));
        let w = pc.params.modulus.byte_width();
        let mut fed = Federation::initialize(pc, setup)?;
        let ct_width = fed.s1().public_key().n_squared().bits().div_ceil(8) as usize;
        let t = fed.run_round().map_err(|f| f.error)?;
        rows.push(BenchRow {
            ratio,
            k,
            d,
            n,
            kappa1: rc.crypto.kappa1,
            kappa2,
            sec_norm_ms: t.timing.sec_norm_ms,
            online_ms: t.timing.online_ms,
            offline_ms: t.timing.offline_ms,
            sec_norm_exps: t.sec_norm_ops.exponentiations,
            sec_norm_muls: t.sec_norm_ops.multiplications,
            expected_ops: (k * n + n) as u64,
            s0s1_bytes: t.bytes.s0_to_s1 + t.bytes.s1_to_s0,
            exact_bytes: exact_s0s1_bytes(k, d, n, ct_width, w),
            framing_overhead: 0.0,
            table_bits: table_bits(k, d, n, rc.crypto.kappa1),
            bytes_ratio: f64::NAN,
            table_ratio: f64::NAN,
            sec_norm_speedup: f64::NAN,
            online_speedup: f64::NAN,
        });
    }
    let base = rows.iter().find(|r| r.ratio == 1.0).cloned();
    for r in &mut rows {
        r.framing_overhead = r.s0s1_bytes as f64 / r.exact_bytes as f64 - 1.0;
        if let Some(b) = &base {
            r.bytes_ratio = r.s0s1_bytes as f64 / b.s0s1_bytes as f64;
            r.table_ratio = r.table_bits as f64 / b.table_bits as f64;
            r.sec_norm_speedup = b.sec_norm_ms / r.sec_norm_ms;
            r.online_speedup = b.online_ms / r.online_ms;
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        // 2 clients, k = 10, d = 100, 64-byte ciphertexts, 12-byte residues.
        assert_eq!(exact_s0s1_bytes(10, 100, 2, 64, 12), 22 * 64 + 306 * 12);
        assert_eq!(table_bits(10, 100, 2, 128), (40 + 8 + 100) * 256);
    }

    #[test]
    fn default_grid_is_d_1e5() {
        let c = BenchConfig::default();
        assert_eq!(c.base.dim(), 100_000);
        let r = c.row_config(0.01, 90);
        assert_eq!(r.projection_dim().unwrap(), Some(1000));
        assert_eq!(c.row_config(1.0, 90).projection_dim().unwrap(), None);
        assert_eq!(c.row_config(0.0001, 90).projection_dim().unwrap(), Some(10));
    }

    #[test]
    fn tiny_bench_counts_ops_and_bytes() {
        let mut c = BenchConfig::default();
        c.base.model.features = 39;
        c.base.model.classes = 5;
        c.base.crypto.kappa1 = 64;
        c.base.crypto.f = 10;
        c.base.crypto.fw = 12;
        c.base.crypto.insecure_test_keys = true;
        c.ratios = vec![1.0, 0.1];
        let rows = run_bench(&c).unwrap();
        assert_eq!(rows[0].k, 200);
        assert_eq!(rows[1].k, 20);
        for r in &rows {
            assert!(r.ops_match(), "{r:?}");
            assert!(r.framing_overhead > 0.0 && r.framing_overhead < 0.05, "{r:?}");
        }
        assert_eq!(rows[0].sec_norm_speedup, 1.0);
    }
}
