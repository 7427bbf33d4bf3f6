use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use imloop::config::AppConfig;
use imloop::refine::RefinerStrategy;

const BIN: &str = env!("CARGO_BIN_EXE_imloop");

fn imloop(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// 100 synthetic two-hop samples with scripted oracle backends.
fn scripted_setup(dir: &Path) {
    ok(&imloop(dir, &["synth", "--out", "toy.jsonl", "--scripts", "scripts.jsonl", "--samples", "100"]));
    fs::write(
        dir.join("run.toml"),
        "seed = 3\noutput_dir = \"runs/full\"\n[corpus]\npaths = [\"toy.jsonl\"]\n[tracker]\nphi_r = 1.0\nn_max = 2\n\
         [backends]\nquestioner = { kind = \"scripted\", path = \"scripts.jsonl\" }\n\
         answerer = { kind = \"scripted\", path = \"scripts.jsonl\" }\n",
    )
    .unwrap();
}

#[test]
fn scripted_run_eval_and_mcnemar() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    scripted_setup(dir);

    let t0 = Instant::now();
    let stdout = ok(&imloop(dir, &["run", "--config", "run.toml"]));
    assert!(t0.elapsed() < Duration::from_secs(10), "run took {:?}", t0.elapsed());
    assert!(stdout.contains("fingerprint"));
    for f in ["transcripts.jsonl", "timings.jsonl", "config.toml", "report.json"] {
        assert!(dir.join("runs/full").join(f).exists(), "missing {f}");
    }

    let stdout = ok(&imloop(
        dir,
        &["eval", "--transcripts", "runs/full/transcripts.jsonl", "--samples", "toy.jsonl", "--json", "r.json"],
    ));
    let em = stdout.lines().find(|l| l.starts_with("EM ")).unwrap();
    assert!(em.ends_with("100.0"), "{stdout}");
    assert!(stdout.lines().any(|l| l.starts_with("samples") && l.ends_with("100")));

    let stdout = ok(&imloop(dir, &["mcnemar", "r.json", "r.json"]));
    assert!(stdout.contains("b=0 c=0 p=1.000000 significant=no method=exact"), "{stdout}");
}

#[test]
fn ablate_writes_identity_refiner_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    scripted_setup(dir);
    ok(&imloop(dir, &["ablate", "no-refiner", "--config", "run.toml", "--out", "ablated.toml"]));
    let cfg = AppConfig::load(&dir.join("ablated.toml")).unwrap();
    assert_eq!(cfg.refiner.strategy, RefinerStrategy::Identity);
    assert_eq!(cfg.refiner.top_k, 5);
    assert!(cfg.output_dir.ends_with("full-no-refiner"), "{}", cfg.output_dir.display());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(imloop(dir, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(imloop(dir, &["run"]).status.code(), Some(2));

    fs::write(dir.join("bad.toml"), "[tracker]\ngama = 0.5\n").unwrap();
    let out = imloop(dir, &["run", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tracker.gama"));

    fs::write(dir.join("zero.toml"), "[tracker]\nn_max = 0\n").unwrap();
    let out = imloop(dir, &["run", "--config", "zero.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tracker.n_max"));

    let out = imloop(dir, &["run", "--config", "absent.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_toy_writes_curve_and_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("toy.toml"),
        "[tracker]\nphi_r = 1.0\nn_max = 2\n[backends]\nanswerer = { kind = \"shortest-title\" }\n\
         [toy]\nsamples = 10\ndistractors = 20\n",
    )
    .unwrap();
    ok(&imloop(dir, &["train-toy", "--config", "toy.toml", "--out-dir", "toy-out", "--iterations", "3"]));
    let curve = fs::read_to_string(dir.join("toy-out/curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4, "{curve}");
    assert!(curve.starts_with("iteration,"));
    let policy: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("toy-out/policy.json")).unwrap()).unwrap();
    assert!(policy.is_object());
    assert!(dir.join("toy-out/report.json").exists());
}
