use crate::attacks::{AttackKind, AttackPlan};
use crate::encoding::{minimal_passing_kappa2, FixedPointParams, Modulus, QuantizedVector};
use crate::learning::{generate_synthetic, partition, Architecture, Dataset, Model, PartitionScheme};
use crate::oracle::{fedavg_plain, fltrust_plain, l2_norm};
use crate::paillier::KeySecurity;
use crate::protocol::{audit_messages, Federation, FederationSetup, ProtocolConfig, Weighting};
use crate::transport::TransportKind;

const F: usize = 5;
const C: usize = 3;

fn data(n: usize) -> (Vec<Dataset>, Dataset) {
    let ds = generate_synthetic(7, 40 * n, F, C, 4.0).unwrap();
    let shards = partition(&ds, n, PartitionScheme::Iid, 1).unwrap();
    let trusted = generate_synthetic(8, 30, F, C, 4.0).unwrap();
    (shards, trusted)
}

fn config(d: usize, k: Option<usize>, n: usize, rounds: u32) -> ProtocolConfig {
    let (f, fw, clip) = (16, 20, 8.0);
    let kappa1 = 96;
    let bits = minimal_passing_kappa2(d, k.unwrap_or(d), n, f, fw, clip, 2 * kappa1 as u64).unwrap();
    let params = FixedPointParams::new(Modulus::power_of_two(bits).unwrap(), f, fw, clip).unwrap();
    let mut cfg = ProtocolConfig::new(params, kappa1, k, rounds);
    cfg.key_security = KeySecurity::InsecureTest;
    cfg.batch_size = 16;
    cfg.seed = 11;
    cfg.data_seed = 12;
    cfg
}

fn federation(cfg: ProtocolConfig, n: usize, attack: AttackPlan) -> Federation {
    let arch = Architecture::Softmax { features: F, classes: C };
    let (shards, trusted) = data(n);
    let setup = FederationSetup { initial_model: Model::init(arch, 3), shards, trusted, attack };
    Federation::initialize(cfg, setup).unwrap()
}

#[test]
fn identity_projection_matches_plaintext_fltrust() {
    let n = 4;
    let d = (F + 1) * C;
    let cfg = config(d, None, n, 3);
    let params = cfg.params;
    let mut fed = federation(cfg, n, AttackPlan::new(AttackKind::Signflip, 0.25, n, 6.0, 5).unwrap());
    for _ in 0..3 {
        let before = fed.model().clone();
        let t = fed.run_round().unwrap();
        audit_messages(&t.messages).unwrap();
        // with R = I the recovered norm is exact
        for c in &t.clients {
            assert!((c.norm_estimate - c.norm_oracle).abs() <= 1e-9 * c.norm_oracle.max(1.0));
        }
        // rebuild the quantized inputs the servers saw
        let grads: Vec<Vec<f64>> = t
            .clients
            .iter()
            .map(|c| {
                let g = crate::learning::compute_gradient(
                    &before,
                    &shard_of(c.id, n),
                    16,
                    crate::protocol::batch_seed(12, c.id, t.round),
                )
                .unwrap();
                let g = if c.attacker { g.iter().map(|x| -x).collect() } else { g };
                QuantizedVector::encode(&g, &params).0.decode(&params)
            })
            .collect();
        let trusted = data(n).1;
        let gs = crate::learning::reference_gradient(&before, &trusted).unwrap();
        let gs = QuantizedVector::encode(&gs, &params).0.decode(&params);
        let plain = fltrust_plain(&grads, &gs).unwrap();
        assert!((l2_norm(&gs) - t.norm_std).abs() < 1e-12);
        for (c, (&cos, &w)) in t.clients.iter().zip(plain.cosines.iter().zip(&plain.weights)) {
            assert!((c.cosine - cos).abs() < 1e-9, "cos {} vs {}", c.cosine, cos);
            assert!((c.weight - w).abs() < 1e-9);
        }
        let tol = n as f64 * 8.0 * 2f64.powi(-20) + 1e-9;
        for (a, b) in t.global_grad.iter().zip(&plain.aggregate) {
            assert!((a - b).abs() <= tol, "{a} vs {b}");
        }
        for id in 0..n as u32 {
            assert_eq!(fed.client_model(id).unwrap(), fed.model());
        }
        assert_eq!(fed.s1_model().unwrap(), fed.model());
    }
}

fn shard_of(id: u32, n: usize) -> Dataset {
    data(n).0[id as usize].clone()
}

#[test]
fn sec_norm_operation_counts() {
    let n = 3;
    let d = (F + 1) * C;
    let k = 7;
    let mut fed = federation(config(d, Some(k), n, 1), n, AttackPlan::none());
    let t = fed.run_round().unwrap();
    assert_eq!(t.sec_norm_ops.exponentiations, (k * n + n) as u64);
    assert_eq!(t.sec_norm_ops.multiplications, (k * n + n) as u64);
}

#[test]
fn uniform_weighting_recovers_fedavg() {
    let n = 4;
    let d = (F + 1) * C;
    let mut cfg = config(d, Some(9), n, 1);
    cfg.weighting = Weighting::Uniform;
    let params = cfg.params;
    let mut fed = federation(cfg, n, AttackPlan::none());
    let before = fed.model().clone();
    let t = fed.run_round().unwrap();
    let grads: Vec<Vec<f64>> = (0..n as u32)
        .map(|id| {
            let g = crate::learning::compute_gradient(&before, &shard_of(id, n), 16, crate::protocol::batch_seed(12, id, 0))
                .unwrap();
            QuantizedVector::encode(&g, &params).0.decode(&params)
        })
        .collect();
    let avg = fedavg_plain(&grads).unwrap();
    for (a, b) in t.global_grad.iter().zip(&avg) {
        assert!((a - b).abs() <= 1e-5);
    }
}

#[test]
fn runs_are_deterministic_across_transports() {
    let n = 3;
    let d = (F + 1) * C;
    let mut a = federation(config(d, Some(8), n, 2), n, AttackPlan::none());
    let mut cfg = config(d, Some(8), n, 2);
    cfg.transport = TransportKind::Socket;
    let mut b = federation(cfg, n, AttackPlan::none());
    for _ in 0..2 {
        let ta = a.run_round().unwrap();
        let tb = b.run_round().unwrap();
        assert_eq!(ta.fingerprint(), tb.fingerprint());
    }
    assert_eq!(a.model(), b.model());
}

#[test]
fn running_past_precomputed_rounds_fails_the_round() {
    let n = 2;
    let d = (F + 1) * C;
    let mut fed = federation(config(d, Some(5), n, 1), n, AttackPlan::none());
    fed.run_round().unwrap();
    let err = fed.run_round().unwrap_err();
    assert!(err.transcript.failed());
}
