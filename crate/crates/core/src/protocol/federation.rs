//! Wires clients, S0 and S1 together over a [`Network`] and runs rounds.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackPlan;
use crate::encoding::{validate_parameters, FixedPointParams, Modulus, QuantizedVector};
use crate::error::{invalid, Error, Result};
use crate::learning::{Architecture, Dataset, Model};
use crate::oracle::l2_norm;
use crate::paillier::{op_counts, reset_op_counts, KeySecurity, OpCounts};
use crate::protocol::entities::{ClientState, ServerS0State, ServerS1State, Weighting};
use crate::protocol::messages::Message;
use crate::protocol::secure::{CosRecovery, NormRecovery};
use crate::seeds::{derive_rng, derive_seed};
use crate::transport::{ByteTotals, Delivered, Endpoint, Network, TransportKind, DEFAULT_MAX_FRAME, INIT_ROUND};

#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub params: FixedPointParams,
    pub kappa1: u32,
    pub key_security: KeySecurity,
    /// Projection dimension; `None` for the uncompressed identity.
    pub k: Option<usize>,
    pub rounds: u32,
    pub lr: f64,
    pub batch_size: usize,
    pub selection_fraction: f64,
    pub weighting: Weighting,
    pub seed: u64,
    pub data_seed: u64,
    pub transport: TransportKind,
    pub max_frame: usize,
    /// Keep raw frames (hex) in transcripts.
    pub record_frames: bool,
}

impl ProtocolConfig {
    pub fn new(params: FixedPointParams, kappa1: u32, k: Option<usize>, rounds: u32) -> Self {
        ProtocolConfig {
            params,
            kappa1,
            key_security: KeySecurity::Standard,
            k,
            rounds,
            lr: 0.1,
            batch_size: 32,
            selection_fraction: 1.0,
            weighting: Weighting::Trust,
            seed: 0,
            data_seed: 0,
            transport: TransportKind::Memory,
            max_frame: DEFAULT_MAX_FRAME,
            record_frames: false,
        }
    }
}

pub struct FederationSetup {
    pub initial_model: Model,
    pub shards: Vec<Dataset>,
    pub trusted: Dataset,
    pub attack: AttackPlan,
}

/// One delivered frame as recorded in a transcript.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub from: Endpoint,
    pub to: Endpoint,
    pub msg_type: String,
    pub round: u32,
    pub sender: u32,
    pub length: u64,
    /// SHA-256 of the frame bytes.
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_hex: Option<String>,
}

impl TranscriptEntry {
    fn from_delivered(d: &Delivered, keep: bool) -> Self {
        TranscriptEntry {
            from: d.from,
            to: d.to,
            msg_type: d.frame.msg_type.name().to_string(),
            round: d.frame.round,
            sender: d.frame.sender,
            length: d.frame.length_field(),
            digest: hex::encode(Sha256::digest(&d.wire)),
            frame_hex: keep.then(|| hex::encode(&d.wire)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub id: u32,
    pub attacker: bool,
    pub saturations: usize,
    pub sq_norm_lift: i128,
    pub norm_estimate: f64,
    /// `‖g̃_i‖` computed by the harness from the unmasked update.
    pub norm_oracle: f64,
    pub inner_lift: i128,
    pub cosine: f64,
    pub trust: f64,
    pub weight: f64,
    pub weight_q: u128,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTiming {
    /// Server-side online time: reference gradient and all sub-protocols.
    pub online_ms: f64,
    pub sec_norm_ms: f64,
    pub sec_cos_ms: f64,
    pub sec_agg_ms: f64,
    /// Time spent producing this round's encrypted mask packs.
    pub offline_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "lowercase")]
pub enum RoundStatus {
    Completed,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTranscript {
    pub round: u32,
    pub status: RoundStatus,
    pub selected: Vec<u32>,
    pub clients: Vec<ClientRecord>,
    pub norm_std: f64,
    pub no_trust: bool,
    pub global_grad: Vec<f64>,
    pub saturations: usize,
    pub messages: Vec<TranscriptEntry>,
    /// Includes this round's offline mask packs.
    pub bytes: ByteTotals,
    pub timing: RoundTiming,
    pub sec_norm_ops: OpCounts,
}

impl RoundTranscript {
    fn empty(round: u32) -> Self {
        RoundTranscript {
            round,
            status: RoundStatus::Completed,
            selected: Vec::new(),
            clients: Vec::new(),
            norm_std: 0.0,
            no_trust: false,
            global_grad: Vec::new(),
            saturations: 0,
            messages: Vec::new(),
            bytes: ByteTotals::default(),
            timing: RoundTiming::default(),
            sec_norm_ops: OpCounts::default(),
        }
    }

    pub fn failed(&self) -> bool {
        matches!(self.status, RoundStatus::Failed(_))
    }

    /// Digest of everything in the transcript except timings.
    pub fn fingerprint(&self) -> String {
        let mut t = self.clone();
        t.timing = RoundTiming::default();
        let bytes = serde_json::to_vec(&t).expect("transcripts serialize");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug)]
pub struct RoundFailure {
    pub error: Error,
    pub transcript: RoundTranscript,
}

impl std::fmt::Display for RoundFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "round {} failed: {}", self.transcript.round, self.error)
    }
}

impl std::error::Error for RoundFailure {}

/// Clients selected in `round`: `round(fraction n)` ids, sorted.
pub fn select_clients(seed: u64, round: u32, n: usize, fraction: f64) -> Vec<u32> {
    let count = ((fraction * n as f64).round() as usize).min(n);
    if count == n {
        return (0..n as u32).collect();
    }
    let mut rng = derive_rng(seed, "selection", &[round as u64]);
    let mut ids: Vec<u32> = index::sample(&mut rng, n, count).into_iter().map(|i| i as u32).collect();
    ids.sort_unstable();
    ids
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub struct Federation {
    cfg: ProtocolConfig,
    plan: AttackPlan,
    clients: Vec<ClientState>,
    s0: ServerS0State,
    s1: ServerS1State,
    net: Network,
    init_messages: Vec<TranscriptEntry>,
    pack_bytes: BTreeMap<u32, ByteTotals>,
    offline_ms: BTreeMap<u32, f64>,
    offline_ops: OpCounts,
    next_round: u32,
}

impl Federation {
    /// Sets up keys, seeds and the projection, then precomputes the
    /// encrypted mask packs for every round.
    pub fn initialize(cfg: ProtocolConfig, setup: FederationSetup) -> Result<Self> {
        let n = setup.shards.len();
        if n == 0 {
            return invalid("need at least one client");
        }
        if !(0.0..=1.0).contains(&cfg.selection_fraction) {
            return invalid(format!("selection fraction {} outside [0, 1]", cfg.selection_fraction));
        }
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return invalid("learning rate must be positive");
        }
        let arch = setup.initial_model.arch();
        let d = arch.dim();
        let k = cfg.k.unwrap_or(d);
        if k == 0 {
            return invalid("projection dimension must be positive");
        }
        let n_bits = 2 * cfg.kappa1 as u64;
        validate_parameters(d, k, n, &cfg.params, n_bits)?.into_result()?;

        let mut clients = Vec::with_capacity(n);
        for (i, shard) in setup.shards.into_iter().enumerate() {
            let id = i as u32;
            let shard = if setup.attack.flips_labels(id) {
                let c = arch.classes() as u32;
                shard.map_labels(|y| c - 1 - y)
            } else {
                shard
            };
            let seed = derive_seed(cfg.seed, "client-mask-seed", &[id as u64]);
            clients.push(ClientState::new(id, arch, shard, seed, cfg.batch_size, cfg.data_seed)?);
        }
        let s0 = ServerS0State::new(cfg.params, cfg.lr, setup.initial_model, cfg.k, derive_seed(cfg.seed, "projection", &[]))?;
        let mut keyrng = derive_rng(cfg.seed, "paillier-keygen", &[]);
        let s1 = ServerS1State::new(arch, setup.trusted, cfg.kappa1, cfg.key_security, cfg.weighting, &mut keyrng)?;
        let net = Network::new(cfg.transport, cfg.max_frame);
        let mut fed = Federation {
            cfg,
            plan: setup.attack,
            clients,
            s0,
            s1,
            net,
            init_messages: Vec::new(),
            pack_bytes: BTreeMap::new(),
            offline_ms: BTreeMap::new(),
            offline_ops: OpCounts::default(),
            next_round: 0,
        };
        fed.setup_phase()?;
        fed.offline_phase()?;
        Ok(fed)
    }

    fn modulus_of(&self, to: Endpoint) -> Option<Modulus> {
        match to {
            Endpoint::Server0 => Some(self.cfg.params.modulus),
            Endpoint::Server1 => self.s1.modulus(),
            Endpoint::Client(i) => self.clients[i as usize].modulus(),
        }
    }

    /// Sends `msg` and returns it as decoded by the recipient.
    fn deliver(&mut self, from: Endpoint, to: Endpoint, round: u32, msg: &Message) -> Result<Message> {
        let frame = msg.to_frame(round, from.id(), self.cfg.params.modulus);
        self.net.send(from, to, &frame)?;
        let got = self.net.recv(from, to)?;
        if got.sender != from.id() {
            return Err(Error::Protocol(format!("frame claims sender {:#x}", got.sender)));
        }
        Message::from_frame(&got, self.modulus_of(to))
    }

    fn drain_log(&mut self) -> Vec<TranscriptEntry> {
        let keep = self.cfg.record_frames;
        self.net.take_log().iter().map(|d| TranscriptEntry::from_delivered(d, keep)).collect()
    }

    fn setup_phase(&mut self) -> Result<()> {
        let r = INIT_ROUND;
        let init = self.s0.init_model();
        let got = self.deliver(Endpoint::Server0, Endpoint::Server1, r, &init)?;
        self.s1.on_init_model(&got)?;
        for i in 0..self.clients.len() {
            let got = self.deliver(Endpoint::Server0, Endpoint::Client(i as u32), r, &init)?;
            self.clients[i].on_init_model(&got)?;
        }
        let proj = self.s0.init_projection();
        let got = self.deliver(Endpoint::Server0, Endpoint::Server1, r, &proj)?;
        self.s1.on_init_projection(&got)?;
        let pk = self.s1.init_pk();
        let got = self.deliver(Endpoint::Server1, Endpoint::Server0, r, &pk)?;
        self.s0.on_init_pk(&got)?;
        for i in 0..self.clients.len() {
            let reg = self.clients[i].seed_registration();
            let id = i as u32;
            let got = self.deliver(Endpoint::Client(id), Endpoint::Server1, r, &reg)?;
            self.s1.on_seed_reg(id, &got)?;
        }
        self.init_messages = self.drain_log();
        Ok(())
    }

    fn offline_phase(&mut self) -> Result<()> {
        reset_op_counts();
        for t in 0..self.cfg.rounds {
            let start = Instant::now();
            for i in 0..self.clients.len() as u32 {
                let mut rng = derive_rng(self.cfg.seed, "mask-encryption", &[i as u64, t as u64]);
                let pack = self.s1.mask_pack(i, t, &mut rng)?;
                let got = self.deliver(Endpoint::Server1, Endpoint::Server0, t, &pack)?;
                self.s0.on_enc_mask_pack(t, &got)?;
            }
            self.offline_ms.insert(t, ms(start));
            let mut totals = ByteTotals::default();
            for d in self.net.take_log() {
                totals.add(d.from, d.to, d.frame.length_field());
            }
            self.pack_bytes.insert(t, totals);
        }
        self.offline_ops = op_counts();
        Ok(())
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// The global model as held by S0.
    pub fn model(&self) -> &Model {
        self.s0.model()
    }

    pub fn client_model(&self, id: u32) -> Option<&Model> {
        self.clients.get(id as usize).and_then(|c| c.model())
    }

    pub fn s1_model(&self) -> Option<&Model> {
        self.s1.model()
    }

    pub fn s0(&self) -> &ServerS0State {
        &self.s0
    }

    pub fn s1(&self) -> &ServerS1State {
        &self.s1
    }

    pub fn init_messages(&self) -> &[TranscriptEntry] {
        &self.init_messages
    }

    pub fn offline_ops(&self) -> OpCounts {
        self.offline_ops
    }

    pub fn total_offline_ms(&self) -> f64 {
        self.offline_ms.values().sum()
    }

    pub fn architecture(&self) -> Architecture {
        self.s0.model().arch()
    }

    pub fn attack(&self) -> &AttackPlan {
        &self.plan
    }

    /// Runs the next round. Rounds must be run in order.
    pub fn run_round(&mut self) -> std::result::Result<RoundTranscript, RoundFailure> {
        let round = self.next_round;
        let mut tr = RoundTranscript::empty(round);
        let res = self.round_inner(round, &mut tr);
        self.s0.end_round(round);
        self.s1.end_round(round);
        tr.messages.extend(self.drain_log());
        for m in &tr.messages {
            tr.bytes.add(m.from, m.to, m.length);
        }
        if let Some(b) = self.pack_bytes.remove(&round) {
            tr.bytes.s1_to_s0 += b.s1_to_s0;
            tr.bytes.s0_to_s1 += b.s0_to_s1;
        }
        tr.timing.offline_ms = self.offline_ms.get(&round).copied().unwrap_or(0.0);
        self.next_round += 1;
        match res {
            Ok(()) => Ok(tr),
            Err(error) => {
                tr.status = RoundStatus::Failed(error.to_string());
                Err(RoundFailure { error, transcript: tr })
            }
        }
    }

    fn round_inner(&mut self, round: u32, tr: &mut RoundTranscript) -> Result<()> {
        if round >= self.cfg.rounds {
            return Err(Error::Protocol(format!("round {round} beyond the {} precomputed rounds", self.cfg.rounds)));
        }
        let n = self.clients.len();
        let selected = select_clients(self.cfg.seed, round, n, self.cfg.selection_fraction);
        tr.selected = selected.clone();
        self.s0.begin_round();
        if selected.is_empty() {
            return Ok(());
        }
        let params = self.cfg.params;

        // local training and attacks
        let mut grads = BTreeMap::new();
        for &id in &selected {
            grads.insert(id, self.clients[id as usize].local_gradient(round)?);
        }
        self.plan.apply(round, &mut grads)?;
        let mut records = BTreeMap::new();
        for (&id, g) in &grads {
            let up = self.clients[id as usize].masked_update(g, round)?;
            tr.saturations += up.saturations;
            let norm_oracle = l2_norm(&up.quantized.decode(&params));
            records.insert(id, (up.saturations, norm_oracle));
            let got = self.deliver(Endpoint::Client(id), Endpoint::Server0, round, &up.message)?;
            self.s0.on_masked_update(id, &got)?;
        }

        let online = Instant::now();
        let (std_msg, sat) = self.s1.reference()?;
        tr.saturations += sat;
        tr.norm_std = self.s1.norm_std().unwrap_or(0.0);
        let got = self.deliver(Endpoint::Server1, Endpoint::Server0, round, &std_msg)?;
        self.s0.on_std_grad(&got)?;

        let t = Instant::now();
        reset_op_counts();
        let mut norms: BTreeMap<u32, NormRecovery> = BTreeMap::new();
        for &id in &selected {
            let pair = self.s0.norm_pair(id, round)?;
            let got = self.deliver(Endpoint::Server0, Endpoint::Server1, round, &pair)?;
            norms.insert(id, self.s1.on_norm_pair(round, &got)?);
        }
        tr.sec_norm_ops = op_counts();
        tr.timing.sec_norm_ms = ms(t);

        let t = Instant::now();
        let mut cosines: BTreeMap<u32, CosRecovery> = BTreeMap::new();
        for &id in &selected {
            let share = self.s0.cos_share(id)?;
            let got = self.deliver(Endpoint::Server0, Endpoint::Server1, round, &share)?;
            cosines.insert(id, self.s1.on_cos_share(round, &got)?);
        }
        tr.timing.sec_cos_ms = ms(t);

        let t = Instant::now();
        let (wmsg, tw) = self.s1.weights_and_mask_sum(round, &selected)?;
        let weights_q: Vec<u128> = match &wmsg {
            Message::WeightsAndMaskSum { weights, .. } => weights.iter().map(|w| w.1).collect(),
            _ => unreachable!(),
        };
        let got = self.deliver(Endpoint::Server1, Endpoint::Server0, round, &wmsg)?;
        let (global, g, no_trust) = self.s0.aggregate(&got)?;
        tr.timing.sec_agg_ms = ms(t);
        tr.timing.online_ms = ms(online);
        tr.no_trust = no_trust;
        tr.global_grad = g;

        for (j, &id) in selected.iter().enumerate() {
            let (saturations, norm_oracle) = records[&id];
            tr.clients.push(ClientRecord {
                id,
                attacker: self.plan.is_attacker(id),
                saturations,
                sq_norm_lift: norms[&id].sq_norm_lift,
                norm_estimate: norms[&id].estimate,
                norm_oracle,
                inner_lift: cosines[&id].inner_lift,
                cosine: cosines[&id].cosine,
                trust: tw.trust[j],
                weight: tw.weights[j],
                weight_q: weights_q[j],
            });
        }

        for i in 0..n as u32 {
            let got = self.deliver(Endpoint::Server0, Endpoint::Client(i), round, &global)?;
            self.clients[i as usize].on_global_grad(&got)?;
        }
        let got = self.deliver(Endpoint::Server0, Endpoint::Server1, round, &global)?;
        self.s1.on_global_grad(&got)?;
        Ok(())
    }
}

/// Message types each party may receive.
pub fn allowed_inbound(to: Endpoint) -> &'static [&'static str] {
    match to {
        Endpoint::Server0 => &["INIT_PK", "ENC_MASK_PACK", "MASKED_UPDATE", "STD_GRAD", "WEIGHTS_AND_MASKSUM"],
        Endpoint::Server1 => &["INIT_MODEL", "INIT_PROJ_SEED", "SEED_REG", "NORM_PAIR", "COS_P0", "GLOBAL_GRAD"],
        Endpoint::Client(_) => &["INIT_MODEL", "GLOBAL_GRAD"],
    }
}

/// Checks that every recorded frame went to a party allowed to see it. In
/// particular S1 never receives a masked update and S0 never receives a
/// seed registration.
pub fn audit_messages(entries: &[TranscriptEntry]) -> Result<()> {
    for e in entries {
        if !allowed_inbound(e.to).contains(&e.msg_type.as_str()) {
            return Err(Error::Integrity(format!("{:?} received {} from {:?}", e.to, e.msg_type, e.from)));
        }
        if e.from == e.to || e.sender != e.from.id() {
            return Err(Error::Integrity(format!("bad routing for {} from {:?}", e.msg_type, e.from)));
        }
    }
    Ok(())
}

/// Quantized view of a real vector, exposed for tests that compare the
/// secure path with the plaintext oracle.
pub fn quantize(xs: &[f64], params: &FixedPointParams) -> QuantizedVector {
    QuantizedVector::encode(xs, params).0
}
