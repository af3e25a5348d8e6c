//! Quick invariant suite at toy parameters, with optional fault injection
//! to confirm each check can fail.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::encoding::{center_lift, decode, encode, validate_parameters, FixedPointParams, Modulus, QuantizedVector};
use crate::error::{Error, Result};
use crate::experiment::config::{ExperimentConfig, Scheme};
use crate::experiment::runner::{prepare_data, run_scheme};
use crate::jl::{required_dimension, sample_matrix};
use crate::masking::{apply_mask, derive_mask, remove_mask, MaskSeed};
use crate::paillier::{keygen, KeySecurity};
use crate::protocol::{sec_norm_s0, sec_norm_s1, Federation, FederationSetup};
use crate::seeds::derive_seed;
use crate::transport::{decode_frame, encode_frame, Frame, MessageType};

/// Module whose check gets a deliberately corrupted step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Decryption result off by one.
    Paillier,
    /// Center lift with the wrong sign.
    Encoding,
    /// One projected coordinate off by one.
    Jl,
    /// Unmasking with the next round's mask.
    Masking,
    /// One payload byte flipped on the wire.
    Transport,
    /// S1 uses a wrong ‖r*‖².
    Protocol,
}

impl Fault {
    pub const ALL: [Fault; 6] =
        [Fault::Paillier, Fault::Encoding, Fault::Jl, Fault::Masking, Fault::Transport, Fault::Protocol];

    pub fn module(&self) -> &'static str {
        match self {
            Fault::Paillier => "paillier",
            Fault::Encoding => "encoding",
            Fault::Jl => "jl",
            Fault::Masking => "masking",
            Fault::Transport => "transport",
            Fault::Protocol => "protocol",
        }
    }
}

impl FromStr for Fault {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Fault::ALL.into_iter().find(|f| f.module() == s).ok_or_else(|| {
            let names: Vec<_> = Fault::ALL.iter().map(Fault::module).collect();
            Error::InvalidArgument(format!("unknown module {s}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct SelfTestReport {
    pub checks: Vec<CheckResult>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed_modules(&self) -> Vec<&'static str> {
        let mut m: Vec<_> = self.checks.iter().filter(|c| !c.passed).map(|c| c.module).collect();
        m.dedup();
        m
    }
}

impl fmt::Display for SelfTestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}::{} {}", if c.passed { "PASS" } else { "FAIL" }, c.module, c.name, c.detail)?;
        }
        if self.passed() {
            write!(f, "selftest PASS ({} checks)", self.checks.len())
        } else {
            write!(f, "selftest FAIL in {}", self.failed_modules().join(", "))
        }
    }
}

type Check = fn(bool) -> Result<String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Integrity(msg()))
    }
}

const SEED: u64 = 0x5e1f_7e57;
const CASES: usize = 200;

fn paillier_check(fault: bool) -> Result<String> {
    let mut rng = ChaCha20Rng::seed_from_u64(SEED);
    let (pk, sk) = keygen(16, KeySecurity::InsecureTest, &mut rng)?;
    let n = pk.modulus().clone();
    let dec = |c: &crate::paillier::Ciphertext| -> Result<num_bigint::BigUint> {
        let m = sk.decrypt(&pk, c)?;
        Ok(if fault { (m + 1u32) % &n } else { m })
    };
    for i in 0..CASES {
        let a = crate::paillier::random_below(&n, &mut rng);
        let b = crate::paillier::random_below(&n, &mut rng);
        let s = crate::paillier::random_below(&n, &mut rng);
        let ca = pk.encrypt(&a, &mut rng)?;
        let cb = pk.encrypt(&b, &mut rng)?;
        ensure(dec(&ca)? == a, || format!("case {i}: decrypt(encrypt(a)) != a"))?;
        ensure(dec(&pk.add_ct(&[ca.clone(), cb])?)? == (&a + &b) % &n, || format!("case {i}: additive"))?;
        ensure(dec(&pk.scalar_mul(&ca, &s)?)? == (&a * &s) % &n, || format!("case {i}: scalar"))?;
    }
    Ok(format!("{CASES} cases at kappa1 = 16"))
}

fn encoding_check(fault: bool) -> Result<String> {
    let q = Modulus::power_of_two(40)?;
    let params = FixedPointParams::new(q, 12, 8, 4.0)?;
    let mut rng = ChaCha20Rng::seed_from_u64(SEED + 1);
    for i in 0..CASES {
        let x: f64 = rng.random_range(-4.0..4.0);
        let v = encode(x, &params);
        let back = decode(v, &params)?;
        ensure((back - x).abs() <= 0.5 / params.scale(), || format!("case {i}: {x} decoded as {back}"))?;
        let lift = if fault { -center_lift(v, q) } else { center_lift(v, q) };
        ensure(lift == (x * params.scale()).round() as i128, || format!("case {i}: lift {lift}"))?;
    }
    let small = FixedPointParams { modulus: Modulus::power_of_two(8)?, f: 12, fw: 8, clip: 4.0 };
    let r = validate_parameters(100, 10, 5, &small, 64)?;
    ensure(!r.passed(), || "undersized q passed validation".into())?;
    Ok(format!("{CASES} roundtrips within 2^-13, undersized q rejected"))
}

fn jl_check(fault: bool) -> Result<String> {
    ensure(required_dimension(0.2, 0.01)? == 331, || "required_dimension(0.2, 0.01) != 331".into())?;
    let q = Modulus::power_of_two(48)?;
    let m = sample_matrix(derive_seed(SEED, "selftest-jl", &[]), 32, 200)?;
    let mut rng = ChaCha20Rng::seed_from_u64(SEED + 2);
    for i in 0..20 {
        let v: Vec<i128> = (0..200).map(|_| rng.random_range(-5000..5000)).collect();
        let qv = QuantizedVector::new(v.iter().map(|&x| q.from_i128(x)).collect(), q)?;
        let mut got = m.project_mod_q(&qv)?.residues().to_vec();
        if fault {
            got[0] = q.add(got[0], 1);
        }
        let want: Vec<u128> = m.project_integer(&v)?.into_iter().map(|x| q.from_i128(x)).collect();
        ensure(got == want, || format!("case {i}: modular projection differs from integer projection"))?;
    }
    Ok("required_dimension = 331, modular projection exact on 20 vectors".into())
}

fn masking_check(fault: bool) -> Result<String> {
    let q = Modulus::power_of_two(64)?;
    let seed = MaskSeed { client_id: 7, seed: derive_seed(SEED, "selftest-mask", &[]) };
    let mut rng = ChaCha20Rng::seed_from_u64(SEED + 3);
    for round in 0..10u32 {
        let g = QuantizedVector::new((0..64).map(|_| rng.random::<u64>() as u128).collect(), q)?;
        let client_side = derive_mask(&seed, round, 64, q);
        let server_side = derive_mask(&seed.clone(), if fault { round + 1 } else { round }, 64, q);
        let masked = apply_mask(&g, &client_side)?;
        ensure(remove_mask(&masked, &server_side)? == g, || format!("round {round}: unmasking failed"))?;
        let next = derive_mask(&seed, round + 1, 64, q);
        ensure(next != client_side, || format!("round {round}: mask repeated"))?;
    }
    Ok("client and S1 derive identical per-round masks".into())
}

fn transport_check(fault: bool) -> Result<String> {
    let mut rng = ChaCha20Rng::seed_from_u64(SEED + 4);
    for (i, t) in MessageType::ALL.into_iter().enumerate() {
        let payload: Vec<u8> = (0..rng.random_range(0..300)).map(|_| rng.random()).collect();
        let frame = Frame { msg_type: t, round: i as u32, sender: rng.random(), payload };
        let mut wire = encode_frame(&frame);
        if fault && wire.len() > 13 {
            let last = wire.len() - 1;
            wire[last] ^= 1;
        }
        let (back, used) = decode_frame(&wire, 1 << 20)?;
        ensure(used == wire.len() && back == frame, || format!("{} frame changed on the wire", t.name()))?;
        ensure(decode_frame(&wire[..wire.len() - 1], 1 << 20).is_err(), || "truncated frame accepted".into())?;
    }
    Ok(format!("{} message types roundtrip, truncation rejected", MessageType::ALL.len()))
}

fn protocol_check(fault: bool) -> Result<String> {
    // SecNorm at kappa1 = 16: needs k q^2 < 2^31.
    let q = Modulus::general(20011)?;
    let params = FixedPointParams::new(q, 0, 0, 10.0)?;
    let mut rng = ChaCha20Rng::seed_from_u64(SEED + 5);
    let (pk, sk) = keygen(16, KeySecurity::InsecureTest, &mut rng)?;
    let proj = sample_matrix(derive_seed(SEED, "selftest-proj", &[]), 4, 6)?;
    for i in 0..20 {
        let g: Vec<i128> = (0..6).map(|_| rng.random_range(-2..=2)).collect();
        let r = QuantizedVector::new((0..6).map(|_| rng.random_range(0..20011)).collect(), q)?;
        let gq = QuantizedVector::new(g.iter().map(|&x| q.from_i128(x)).collect(), q)?;
        let m = apply_mask(&gq, &r)?;
        let rs = proj.project_mod_q(&r)?;
        let enc = rs.residues().iter().map(|&x| pk.encrypt_u128(x, &mut rng)).collect::<Result<Vec<_>>>()?;
        let pair = sec_norm_s0(&pk, &proj.project_mod_q(&m)?, &enc)?;
        let rsq = if fault { q.add(rs.sq_norm(), 1) } else { rs.sq_norm() };
        let rec = sec_norm_s1(&pk, &sk, &pair, rsq, &params, proj.norm_divisor())?;
        let want: i128 = proj.project_integer(&g)?.iter().map(|x| x * x).sum();
        ensure(rec.sq_norm_lift == want, || format!("case {i}: lifted norm {} != {want}", rec.sq_norm_lift))?;
    }
    let report = federation_run()?;
    Ok(format!("SecNorm exact on 20 instances at kappa1 = 16; {report}"))
}

/// Two short federations with identical seeds: transcripts must match and
/// every party must hold the same model.
fn federation_run() -> Result<String> {
    let mut cfg = ExperimentConfig { name: "selftest".into(), scheme: Scheme::OursCompressed, clients: 4, rounds: 3, ..Default::default() };
    cfg.model.features = 7;
    cfg.model.classes = 3;
    cfg.data.train_samples = 80;
    cfg.data.test_samples = 30;
    cfg.data.trusted_samples = 20;
    cfg.crypto.kappa1 = 48;
    cfg.crypto.insecure_test_keys = true;
    cfg.crypto.f = 10;
    cfg.crypto.fw = 10;
    cfg.crypto.compression_ratio = Some(0.5);
    cfg.record_timings = false;
    let data = prepare_data(&cfg)?;
    let a = run_scheme(&cfg, &data, &mut |_, _| Ok(()))?;
    let b = run_scheme(&cfg, &data, &mut |_, _| Ok(()))?;
    ensure(a.fingerprints == b.fingerprints, || "transcripts differ between identical runs".into())?;
    let setup = FederationSetup {
        initial_model: data.initial.clone(),
        shards: data.shards.clone(),
        trusted: data.trusted.clone(),
        attack: cfg.attack_plan()?,
    };
    let mut fed = Federation::initialize(cfg.protocol_config()?, setup)?;
    for _ in 0..cfg.rounds {
        fed.run_round().map_err(|f| f.error)?;
    }
    let m = fed.model();
    let in_sync = fed.s1_model() == Some(m) && (0..cfg.clients as u32).all(|i| fed.client_model(i) == Some(m));
    ensure(in_sync, || "party models diverged".into())?;
    ensure(m == &a.final_model, || "federation and runner disagree".into())?;
    Ok(format!("{}-round federation replays and stays in sync", cfg.rounds))
}

/// Runs every check, corrupting one step of `fault`'s module if given.
pub fn run_selftest(fault: Option<Fault>) -> SelfTestReport {
    let checks: [(Fault, &'static str, Check); 6] = [
        (Fault::Paillier, "homomorphism", paillier_check),
        (Fault::Encoding, "fixed_point", encoding_check),
        (Fault::Jl, "projection", jl_check),
        (Fault::Masking, "mask_determinism", masking_check),
        (Fault::Transport, "framing", transport_check),
        (Fault::Protocol, "sec_norm_and_rounds", protocol_check),
    ];
    let mut report = SelfTestReport::default();
    for (module, name, check) in checks {
        let (passed, detail) = match check(fault == Some(module)) {
            Ok(d) => (true, d),
            Err(e) => (false, e.to_string()),
        };
        report.checks.push(CheckResult { module: module.module(), name, passed, detail });
    }
    report
}
