//! Runs one scheme end to end and emits metrics rows.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::attacks::AttackPlan;
use crate::error::{Error, Result};
use crate::experiment::config::{ExperimentConfig, Scheme};
use crate::experiment::metrics::{MetricsRow, MetricsWriter};
use crate::learning::{
    compute_gradient, evaluate, generate_synthetic_scaled, partition, reference_gradient, Dataset, Model,
};
use crate::oracle::{fedavg_plain, fltrust_plain, krum_plain, trimmed_mean_plain};
use crate::protocol::{batch_seed, select_clients, Federation, FederationSetup, RoundTiming, RoundTranscript};
use crate::seeds::derive_u64;

/// Environment variable naming the output directory.
pub const OUTPUT_DIR_ENV: &str = "PPFL_OUTPUT_DIR";

/// Everything a run needs besides the configuration.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub shards: Vec<Dataset>,
    pub trusted: Dataset,
    pub test: Dataset,
    pub initial: Model,
}

/// Draws train, test and trusted samples from one synthetic distribution.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let d = &cfg.data;
    let arch = cfg.architecture();
    let total = d.train_samples + d.test_samples + d.trusted_samples;
    let all = generate_synthetic_scaled(
        cfg.seeds.data,
        total,
        arch.features(),
        arch.classes(),
        d.separation,
        d.feature_scale,
    )?;
    let range = |a: usize, b: usize| all.subset(&(a..b).collect::<Vec<_>>());
    let train = range(0, d.train_samples);
    let test = range(d.train_samples, d.train_samples + d.test_samples);
    let trusted = range(d.train_samples + d.test_samples, total);
    let shards = partition(&train, cfg.clients, cfg.partition_scheme(), derive_u64(cfg.seeds.data, "partition", &[]))?;
    let initial = Model::init(arch, derive_u64(cfg.seeds.data, "model", &[]));
    Ok(ExperimentData { shards, trusted, test, initial })
}

/// Result of one completed run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    /// Transcript fingerprints of the secure schemes, one per round.
    pub fingerprints: Vec<String>,
    pub final_model: Model,
}

impl RunSummary {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.accuracy)
    }
}

/// Called once per completed round, and once for a failed secure round
/// with `row = None`.
pub type RoundSink<'a> = dyn FnMut(Option<&MetricsRow>, Option<&RoundTranscript>) -> Result<()> + 'a;

fn row_base(cfg: &ExperimentConfig, round: u32, model: &Model, test: &Dataset) -> Result<MetricsRow> {
    let ev = evaluate(model, test)?;
    Ok(MetricsRow {
        round,
        scheme: cfg.scheme.name().into(),
        attack: cfg.attack.kind.name().into(),
        byz_frac: cfg.attack.fraction,
        accuracy: ev.accuracy,
        loss: ev.loss,
        online_round_ms: 0.0,
        offline_ms: 0.0,
        bytes_c2s: 0,
        bytes_s0s1: 0,
        bytes_s1s0: 0,
        bytes_s2c: 0,
        saturation_count: 0,
        no_trust_flag: 0,
    })
}

/// Runs `cfg.scheme` on `data`, reporting every round to `sink`.
pub fn run_scheme(cfg: &ExperimentConfig, data: &ExperimentData, sink: &mut RoundSink<'_>) -> Result<RunSummary> {
    cfg.validate()?;
    if data.shards.len() != cfg.clients {
        return Err(Error::Config(format!("{} shards for {} clients", data.shards.len(), cfg.clients)));
    }
    if cfg.scheme.is_secure() {
        run_secure(cfg, data, sink)
    } else {
        run_plain(cfg, data, sink)
    }
}

fn run_secure(cfg: &ExperimentConfig, data: &ExperimentData, sink: &mut RoundSink<'_>) -> Result<RunSummary> {
    let setup = FederationSetup {
        initial_model: data.initial.clone(),
        shards: data.shards.clone(),
        trusted: data.trusted.clone(),
        attack: cfg.attack_plan()?,
    };
    let mut fed = Federation::initialize(cfg.protocol_config()?, setup)?;
    let mut rows = Vec::new();
    let mut fingerprints = Vec::new();
    for _ in 0..cfg.rounds {
        let mut t = match fed.run_round() {
            Ok(t) => t,
            Err(mut fail) => {
                if !cfg.record_timings {
                    fail.transcript.timing = RoundTiming::default();
                }
                sink(None, Some(&fail.transcript))?;
                return Err(fail.error);
            }
        };
        // wall-clock values would make reruns differ byte-for-byte
        if !cfg.record_timings {
            t.timing = RoundTiming::default();
        }
        let mut row = row_base(cfg, t.round, fed.model(), &data.test)?;
        if cfg.record_timings {
            row.online_round_ms = t.timing.online_ms;
            row.offline_ms = t.timing.offline_ms;
        }
        row.bytes_c2s = t.bytes.client_to_servers;
        row.bytes_s0s1 = t.bytes.s0_to_s1;
        row.bytes_s1s0 = t.bytes.s1_to_s0;
        row.bytes_s2c = t.bytes.servers_to_clients;
        row.saturation_count = t.saturations;
        row.no_trust_flag = u8::from(t.no_trust);
        sink(Some(&row), Some(&t))?;
        fingerprints.push(t.fingerprint());
        rows.push(row);
    }
    Ok(RunSummary { rows, fingerprints, final_model: fed.model().clone() })
}

fn attacker_count(plan: &AttackPlan) -> usize {
    plan.attackers().len()
}

fn run_plain(cfg: &ExperimentConfig, data: &ExperimentData, sink: &mut RoundSink<'_>) -> Result<RunSummary> {
    let plan = cfg.attack_plan()?;
    let classes = cfg.model.classes as u32;
    let shards: Vec<Dataset> = data
        .shards
        .iter()
        .enumerate()
        .map(|(i, s)| if plan.flips_labels(i as u32) { s.map_labels(|y| classes - 1 - y) } else { s.clone() })
        .collect();
    let mut model = data.initial.clone();
    let mut rows = Vec::new();
    for round in 0..cfg.rounds {
        let selected = select_clients(cfg.seeds.protocol, round, cfg.clients, cfg.selection_fraction);
        let mut grads = BTreeMap::new();
        for &id in &selected {
            let shard = &shards[id as usize];
            let b = cfg.batch_size.min(shard.len());
            grads.insert(id, compute_gradient(&model, shard, b, batch_seed(cfg.seeds.data, id, round))?);
        }
        plan.apply(round, &mut grads)?;
        let grads: Vec<Vec<f64>> = grads.into_values().collect();
        let start = Instant::now();
        let mut no_trust = false;
        if !grads.is_empty() {
            let agg = match cfg.scheme {
                Scheme::FltrustPlain => {
                    let g_std = reference_gradient(&model, &data.trusted)?;
                    let out = fltrust_plain(&grads, &g_std)?;
                    no_trust = out.no_trust;
                    out.aggregate
                }
                Scheme::Fedavg => fedavg_plain(&grads)?,
                Scheme::Krum => {
                    let f = cfg.baseline.krum_f.unwrap_or(attacker_count(&plan));
                    grads[krum_plain(&grads, f)?].clone()
                }
                Scheme::TrimmedMean => {
                    let beta = cfg.baseline.trim_beta.unwrap_or(attacker_count(&plan));
                    trimmed_mean_plain(&grads, beta)?
                }
                Scheme::OursCompressed | Scheme::OursUncompressed => unreachable!(),
            };
            model.apply_update(&agg, cfg.learning_rate)?;
        }
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        let mut row = row_base(cfg, round, &model, &data.test)?;
        if cfg.record_timings {
            row.online_round_ms = elapsed;
        }
        row.no_trust_flag = u8::from(no_trust);
        sink(Some(&row), None)?;
        rows.push(row);
    }
    Ok(RunSummary { rows, fingerprints: Vec::new(), final_model: model })
}

/// `$PPFL_OUTPUT_DIR`, or `out` in the working directory.
pub fn output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
}

/// Paths written by [`run_experiment`].
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub metrics: PathBuf,
    pub transcripts: Option<PathBuf>,
}

pub fn output_paths(cfg: &ExperimentConfig, dir: &Path) -> RunOutputs {
    RunOutputs {
        metrics: dir.join(format!("{}.metrics.csv", cfg.name)),
        transcripts: cfg.record_transcripts.then(|| dir.join(format!("{}.transcripts", cfg.name))),
    }
}

/// Runs the configured experiment, writing `<name>.metrics.csv` and, if
/// enabled, one JSON transcript per round into `dir`. Rows of completed
/// rounds stay on disk if a later round fails.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<(RunSummary, RunOutputs)> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let out = output_paths(cfg, dir);
    let mut writer = MetricsWriter::create(&out.metrics)?;
    if let Some(t) = &out.transcripts {
        std::fs::create_dir_all(t)?;
    }
    let data = prepare_data(cfg)?;
    let tdir = out.transcripts.clone();
    let mut sink = |row: Option<&MetricsRow>, tr: Option<&RoundTranscript>| -> Result<()> {
        if let Some(r) = row {
            writer.write(r)?;
        }
        if let (Some(dir), Some(t)) = (&tdir, tr) {
            let path = dir.join(format!("round-{:05}.json", t.round));
            std::fs::write(path, serde_json::to_vec_pretty(t)?)?;
        }
        Ok(())
    };
    let summary = run_scheme(cfg, &data, &mut sink)?;
    Ok((summary, out))
}

/// Reruns a secure configuration and checks that every round transcript
/// is reproduced bit for bit.
pub fn verify_replay(cfg: &ExperimentConfig, fingerprints: &[String]) -> Result<()> {
    let data = prepare_data(cfg)?;
    let again = run_scheme(cfg, &data, &mut |_, _| Ok(()))?;
    if again.fingerprints != fingerprints {
        let round = again.fingerprints.iter().zip(fingerprints).position(|(a, b)| a != b);
        return Err(Error::Integrity(format!("replay diverged at round {round:?}")));
    }
    Ok(())
}
