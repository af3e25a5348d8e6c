use std::path::Path;
use std::process::{Command, Output};

fn ppfl(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppfl"))
        .args(args)
        .env("PPFL_OUTPUT_DIR", out_dir)
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const TINY: &str = r#"
name = "tiny"
clients = 4
rounds = 3
record_timings = false
[model]
features = 7
classes = 3
[data]
train_samples = 80
test_samples = 30
trusted_samples = 20
[crypto]
kappa1 = 48
insecure_test_keys = true
f = 10
fw = 10
compression_ratio = 0.5
"#;

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn empty_config_resolves_to_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "empty.toml", "");
    let out = ppfl(&["run", "--config", &cfg, "--dry-run"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let s = text(&out.stdout);
    assert!(s.contains("clients = 50"), "{s}");
    assert!(s.contains("scheme = \"ours-compressed\""), "{s}");
}

#[test]
fn small_kappa2_fails_naming_bound_a() {
    let dir = tempfile::tempdir().unwrap();
    // d = (999 + 1) * 10 = 10^4
    let cfg = write(dir.path(), "k8.toml", "[model]\nfeatures = 999\n[crypto]\nkappa2 = 8\n");
    let out = ppfl(&["run", "--config", &cfg], dir.path());
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("bound (a)"), "{}", text(&out.stderr));
}

#[test]
fn override_wins_and_unknown_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "clients = 10\n");
    let out = ppfl(&["run", "--config", &cfg, "--override", "clients=7", "--dry-run"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("clients = 7"));

    let bad = write(dir.path(), "bad.toml", "clients = 10\nmystery = 1\n");
    let out = ppfl(&["run", "--config", &bad], dir.path());
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("mystery"), "{}", text(&out.stderr));
}

#[test]
fn zero_rounds_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "t0.toml", TINY);
    let out = ppfl(&["run", "--config", &cfg, "--override", "rounds=0"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("tiny.metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.starts_with("round,scheme,attack,byz_frac,accuracy,loss,online_round_ms,offline_ms,"));
}

#[test]
fn reruns_are_byte_identical_and_write_transcripts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = write(a.path(), "tiny.toml", TINY);
    for dir in [a.path(), b.path()] {
        let out = ppfl(&["run", "--config", &cfg, "--override", "record_transcripts=true"], dir);
        assert!(out.status.success(), "{}", text(&out.stderr));
    }
    let ma = std::fs::read(a.path().join("tiny.metrics.csv")).unwrap();
    let mb = std::fs::read(b.path().join("tiny.metrics.csv")).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(text(&ma).lines().count(), 4);
    for r in 0..3 {
        let name = format!("round-{r:05}.json");
        let ta = std::fs::read(a.path().join("tiny.transcripts").join(&name)).unwrap();
        let tb = std::fs::read(b.path().join("tiny.transcripts").join(&name)).unwrap();
        assert_eq!(ta, tb, "{name}");
    }
}

#[test]
fn failing_round_exits_nonzero_and_keeps_earlier_rows() {
    let dir = tempfile::tempdir().unwrap();
    // the first update overflows the model, so the next client gradients are not finite
    let cfg = write(dir.path(), "blowup.toml", TINY);
    let out = ppfl(&["run", "--config", &cfg, "--override", "learning_rate=1e300"], dir.path());
    assert!(!out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("tiny.metrics.csv")).unwrap();
    let rows = csv.lines().count() - 1;
    assert!((1..3).contains(&rows), "{csv}");
}

#[test]
fn selftest_passes_and_reports_injected_faults() {
    let dir = tempfile::tempdir().unwrap();
    let ok = ppfl(&["selftest"], dir.path());
    assert!(ok.status.success(), "{}", text(&ok.stdout));
    assert_eq!(text(&ok.stdout), text(&ppfl(&["selftest"], dir.path()).stdout));
    let bad = ppfl(&["selftest", "--inject-fault", "paillier"], dir.path());
    assert!(!bad.status.success());
    assert!(text(&bad.stdout).contains("FAIL in paillier"), "{}", text(&bad.stdout));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bench.toml",
        r#"
name = "small"
ratios = [1.0, 0.1]
[base]
clients = 2
[base.model]
features = 39
classes = 5
[base.data]
train_samples = 40
test_samples = 10
trusted_samples = 10
[base.crypto]
kappa1 = 64
insecure_test_keys = true
f = 10
fw = 12
"#,
    );
    let out = ppfl(&["bench", "--config", &cfg], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("small.bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("ratio,k,d,n,"));
}

#[test]
fn shipped_configs_parse() {
    let dir = tempfile::tempdir().unwrap();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["default.toml", "signflip-test-keys.toml"] {
        let p = root.join(name);
        let out = ppfl(&["run", "--config", p.to_str().unwrap(), "--dry-run"], dir.path());
        assert!(out.status.success(), "{name}: {}", text(&out.stderr));
    }
    let bench = ppfl_core::experiment::bench::BenchConfig::load(&root.join("bench.toml")).unwrap();
    assert_eq!(bench, ppfl_core::experiment::bench::BenchConfig::default());
}
