//! Experiment configuration: strict TOML with defaults for every key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackPlan};
use crate::encoding::{minimal_passing_kappa2, validate_parameters, FixedPointParams, Modulus, ValidationReport};
use crate::error::{Error, Result};
use crate::jl::required_dimension;
use crate::learning::{Architecture, PartitionScheme};
use crate::paillier::KeySecurity;
use crate::protocol::{ProtocolConfig, Weighting};
use crate::transport::{TransportKind, DEFAULT_MAX_FRAME};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    OursCompressed,
    OursUncompressed,
    FltrustPlain,
    Fedavg,
    Krum,
    TrimmedMean,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::OursCompressed,
        Scheme::OursUncompressed,
        Scheme::FltrustPlain,
        Scheme::Fedavg,
        Scheme::Krum,
        Scheme::TrimmedMean,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::OursCompressed => "ours-compressed",
            Scheme::OursUncompressed => "ours-uncompressed",
            Scheme::FltrustPlain => "fltrust-plain",
            Scheme::Fedavg => "fedavg",
            Scheme::Krum => "krum",
            Scheme::TrimmedMean => "trimmed-mean",
        }
    }

    pub fn is_secure(&self) -> bool {
        matches!(self, Scheme::OursCompressed | Scheme::OursUncompressed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Softmax,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub features: usize,
    pub classes: usize,
    /// Hidden width, MLP only.
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { kind: ModelKind::Softmax, features: 64, classes: 10, hidden: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    Iid,
    LabelSkew,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub trusted_samples: usize,
    pub separation: f64,
    pub feature_scale: f64,
    pub partition: PartitionKind,
    /// Dirichlet concentration for `label-skew`.
    pub alpha: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_samples: 5000,
            test_samples: 2000,
            trusted_samples: 100,
            separation: 6.0,
            feature_scale: 3.0,
            partition: PartitionKind::Iid,
            alpha: 0.5,
        }
    }
}

/// `"auto"` or an explicit number of bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Kappa2 {
    Bits(u32),
    Auto(AutoTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CryptoConfig {
    /// Bits per Paillier prime; N has 2 * kappa1 bits.
    pub kappa1: u32,
    pub kappa2: Kappa2,
    pub f: u32,
    pub fw: u32,
    pub clip: f64,
    /// Allows kappa1 < 128. Never use outside tests and simulations.
    pub insecure_test_keys: bool,
    /// Explicit projection dimension. Takes precedence over the ratio.
    pub k: Option<usize>,
    pub compression_ratio: Option<f64>,
    /// JL target used when neither `k` nor `compression_ratio` is set.
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for CryptoConfig {
    fn default() -> Self {
        CryptoConfig {
            kappa1: 128,
            kappa2: Kappa2::Auto(AutoTag::Auto),
            f: 16,
            fw: 20,
            clip: 8.0,
            insecure_test_keys: false,
            k: None,
            compression_ratio: None,
            epsilon: 0.2,
            delta: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub fraction: f64,
    /// Multiplier of the scaling attack.
    pub scale: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { kind: AttackKind::None, fraction: 0.0, scale: 6.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    pub data: u64,
    pub protocol: u64,
    pub attack: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig { data: 1, protocol: 2, attack: 3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Krum's assumed number of Byzantine clients; defaults to the
    /// attacker count.
    pub krum_f: Option<usize>,
    /// Trimmed-mean cut per side; defaults to the attacker count.
    pub trim_beta: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub scheme: Scheme,
    pub clients: usize,
    pub rounds: u32,
    pub selection_fraction: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub transport: TransportKind,
    /// When false, time columns are written as 0 so reruns are
    /// byte-identical.
    pub record_timings: bool,
    pub record_transcripts: bool,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub crypto: CryptoConfig,
    pub attack: AttackConfig,
    pub seeds: SeedConfig,
    pub baseline: BaselineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            scheme: Scheme::OursCompressed,
            clients: 50,
            rounds: 100,
            selection_fraction: 1.0,
            learning_rate: 0.1,
            batch_size: 32,
            transport: TransportKind::Memory,
            record_timings: true,
            record_transcripts: false,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            crypto: CryptoConfig::default(),
            attack: AttackConfig::default(),
            seeds: SeedConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

/// Parses `v` as a TOML value, falling back to a bare string.
fn parse_override_value(v: &str) -> toml::Value {
    let doc = format!("x = {v}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").unwrap(),
        Err(_) => toml::Value::String(v.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML table.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &path[..path.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_override_value(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides (which win over file values)
    /// and validates the result.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn architecture(&self) -> Architecture {
        let m = &self.model;
        match m.kind {
            ModelKind::Softmax => Architecture::Softmax { features: m.features, classes: m.classes },
            ModelKind::Mlp => Architecture::Mlp { features: m.features, hidden: m.hidden, classes: m.classes },
        }
    }

    pub fn dim(&self) -> usize {
        self.architecture().dim()
    }

    pub fn partition_scheme(&self) -> PartitionScheme {
        match self.data.partition {
            PartitionKind::Iid => PartitionScheme::Iid,
            PartitionKind::LabelSkew => PartitionScheme::LabelSkew { alpha: self.data.alpha },
        }
    }

    /// Projection dimension for the scheme; `None` means no compression.
    pub fn projection_dim(&self) -> Result<Option<usize>> {
        if self.scheme == Scheme::OursUncompressed {
            return Ok(None);
        }
        let c = &self.crypto;
        if let Some(k) = c.k {
            if k == 0 {
                return Err(Error::Config("crypto.k must be positive".into()));
            }
            return Ok(Some(k));
        }
        if let Some(r) = c.compression_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("compression_ratio {r} outside (0, 1]")));
            }
            if r == 1.0 {
                return Ok(None);
            }
            return Ok(Some(((r * self.dim() as f64).ceil() as usize).max(1)));
        }
        Ok(Some(required_dimension(c.epsilon, c.delta)?))
    }

    fn k_or_d(&self) -> Result<usize> {
        Ok(self.projection_dim()?.unwrap_or(self.dim()))
    }

    /// κ2 after resolving `auto`: 64 if it passes every bound, otherwise
    /// the smallest passing value.
    pub fn kappa2_bits(&self) -> Result<u32> {
        let c = &self.crypto;
        match c.kappa2 {
            Kappa2::Bits(b) => Ok(b),
            Kappa2::Auto(_) => {
                let (d, k, n) = (self.dim(), self.k_or_d()?, self.clients.max(1));
                let n_bits = 2 * c.kappa1 as u64;
                let passes = |bits| {
                    FixedPointParams::new(Modulus::PowerOfTwo(bits), c.f, c.fw, c.clip)
                        .and_then(|p| validate_parameters(d, k, n, &p, n_bits))
                        .map(|r| r.passed())
                        .unwrap_or(false)
                };
                if passes(64) {
                    return Ok(64);
                }
                minimal_passing_kappa2(d, k, n, c.f, c.fw, c.clip, n_bits).ok_or_else(|| {
                    Error::Validation(format!(
                        "no kappa2 satisfies the exactness bounds for d = {d}, k = {k}, n = {n}, kappa1 = {}",
                        c.kappa1
                    ))
                })
            }
        }
    }

    pub fn fixed_point(&self) -> Result<FixedPointParams> {
        let c = &self.crypto;
        FixedPointParams::new(Modulus::power_of_two(self.kappa2_bits()?)?, c.f, c.fw, c.clip)
    }

    /// Runs the bound checks. Built without [`FixedPointParams::new`] so an
    /// undersized q is reported by bound rather than rejected up front.
    pub fn validation_report(&self) -> Result<ValidationReport> {
        let c = &self.crypto;
        let params = FixedPointParams { modulus: Modulus::power_of_two(self.kappa2_bits()?)?, f: c.f, fw: c.fw, clip: c.clip };
        validate_parameters(self.dim(), self.k_or_d()?, self.clients.max(1), &params, 2 * c.kappa1 as u64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clients == 0 {
            return bad("clients must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.selection_fraction) {
            return bad(format!("selection_fraction {} outside [0, 1]", self.selection_fraction));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let m = &self.model;
        if m.features == 0 || m.classes < 2 || (m.kind == ModelKind::Mlp && m.hidden == 0) {
            return bad("model needs features >= 1, classes >= 2 and hidden >= 1 for mlp".into());
        }
        let d = &self.data;
        if d.train_samples < self.clients {
            return bad(format!("{} training samples cannot feed {} clients", d.train_samples, self.clients));
        }
        if d.test_samples == 0 || d.trusted_samples == 0 {
            return bad("test_samples and trusted_samples must be positive".into());
        }
        if d.partition == PartitionKind::LabelSkew && !(d.alpha > 0.0 && d.alpha.is_finite()) {
            return bad("label-skew alpha must be positive".into());
        }
        self.attack_plan()?;
        if self.scheme.is_secure() {
            let c = &self.crypto;
            let min = if c.insecure_test_keys { crate::paillier::MIN_TEST_KAPPA1 } else { crate::paillier::MIN_SECURE_KAPPA1 };
            if c.kappa1 < min {
                return Err(Error::Validation(format!(
                    "kappa1 = {} below the minimum of {min}{}",
                    c.kappa1,
                    if c.insecure_test_keys { "" } else { " (set crypto.insecure_test_keys for test keys)" }
                )));
            }
            self.validation_report()?.into_result()?;
            self.fixed_point()?;
        }
        Ok(())
    }

    pub fn attack_plan(&self) -> Result<AttackPlan> {
        AttackPlan::new(self.attack.kind, self.attack.fraction, self.clients, self.attack.scale, self.seeds.attack)
    }

    pub fn protocol_config(&self) -> Result<ProtocolConfig> {
        let c = &self.crypto;
        let mut p = ProtocolConfig::new(self.fixed_point()?, c.kappa1, self.projection_dim()?, self.rounds);
        p.key_security = if c.insecure_test_keys { KeySecurity::InsecureTest } else { KeySecurity::Standard };
        p.lr = self.learning_rate;
        p.batch_size = self.batch_size;
        p.selection_fraction = self.selection_fraction;
        p.weighting = Weighting::Trust;
        p.seed = self.seeds.protocol;
        p.data_seed = self.seeds.data;
        p.transport = self.transport;
        p.max_frame = DEFAULT_MAX_FRAME;
        p.record_frames = false;
        Ok(p)
    }
}
