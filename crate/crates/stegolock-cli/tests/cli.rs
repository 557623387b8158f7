//! End-to-end CLI checks on a miniature run: every subcommand is exercised
//! against one tiny synthetic task so the whole pipeline stays wired together.
//! Quality thresholds live in the library's acceptance suite, not here.

use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
users = ["alice"]

[dataset]
train = 60
test = 40
height = 16
width = 16
classes = 4

[codec]
key_side = 8
net_width = 8
epochs = 2
batch_size = 16

[backbone]
widths = [8, 8, 16, 16]

[baseline]
epochs = 3
batch_size = 16
lr = 0.005

[real]
epochs = 2
batch_size = 16
lr = 0.005

[fake]
steps = 4
batch_size = 16

[distill]
epochs = 2
batch_size = 16
layers = [2, 3]
lambda_at = 10.0

[verify]
probes = 12

[attack]
finetune_epochs = 1
prune_sparsities = [0.5]
reverse_steps = 4
"#;

fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stegolock"))
        .arg(args[0])
        .args(["--config", config.to_str().unwrap()])
        .args(["--seed", "7"])
        .args(["--out", out.to_str().unwrap()])
        .args(&args[1..])
        .output()
        .expect("spawning the stegolock binary")
}

fn assert_ok(out: &Output, what: &str) -> String {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_lists_every_subcommand() {
    let out = Command::new(env!("CARGO_BIN_EXE_stegolock")).arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success());
    for sub in
        ["train-baseline", "train-codec", "protect", "verify", "trace", "attack", "flipbits", "report"]
    {
        assert!(text.contains(sub), "--help is missing {sub}:\n{text}");
    }
}

#[test]
fn rejects_unknown_user() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let out = dir.path().join("run");
    let res = run(&config, &out, &["trace", "--user", "mallory"]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("mallory"), "stderr: {err}");
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let out = dir.path().join("run");

    let text = assert_ok(&run(&config, &out, &["train-codec"]), "train-codec");
    assert!(text.contains("codec ready"), "{text}");
    let text = assert_ok(&run(&config, &out, &["train-baseline"]), "train-baseline");
    assert!(text.contains("baseline ready"), "{text}");

    let text = assert_ok(&run(&config, &out, &["protect"]), "protect");
    assert!(text.contains("registry"), "{text}");
    assert!(out.join("protected/alice.ckpt").exists());
    assert!(out.join("registry.txt").exists());

    let text = assert_ok(&run(&config, &out, &["verify"]), "verify");
    assert!(text.contains("verdict:"), "{text}");

    let text = assert_ok(&run(&config, &out, &["trace"]), "trace");
    assert!(text.contains("TSR"), "{text}");

    let text = assert_ok(&run(&config, &out, &["flipbits"]), "flipbits");
    assert!(text.lines().next().unwrap_or("").contains("flips"), "{text}");

    let text = assert_ok(&run(&config, &out, &["attack"]), "attack");
    assert!(text.contains("attack,parameter,benign,authorized"), "{text}");

    let text = assert_ok(&run(&config, &out, &["report"]), "report");
    assert!(text.contains("report.json"), "{text}");
    assert!(out.join("reports/report.json").exists());

    // a mismatched seed must be refused: artifacts would be inconsistent
    let stale = Command::new(env!("CARGO_BIN_EXE_stegolock"))
        .args(["report", "--config", config.to_str().unwrap(), "--seed", "8"])
        .args(["--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!stale.status.success(), "seed mismatch must fail");
}
