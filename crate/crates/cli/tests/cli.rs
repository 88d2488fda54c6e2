use std::path::Path;
use std::process::{Command, Output};

fn csil(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csil"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--devices",
    "5",
    "--initial-devices",
    "3",
    "--increment",
    "1",
    "--stages",
    "3",
    "--samples-per-device",
    "20",
    "--initial-epochs",
    "3",
    "--epochs",
    "2",
];

#[test]
fn gen_data_writes_container_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = csil(&["gen-data", "--out", "d.csil", "--devices", "4", "--samples-per-device", "10"], dir.path());
    ok(&out);
    let bytes = std::fs::read(dir.path().join("d.csil")).unwrap();
    assert_eq!(&bytes[..4], b"CSIL");
    let manifest = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    assert!(manifest.starts_with("device_id,train_samples,val_samples"));
}

#[test]
fn train_then_doc_on_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--output-dir", "run", "--strict"];
    args.extend_from_slice(TINY);
    let stdout = ok(&csil(&args, dir.path()));
    assert!(stdout.contains("csil"));
    let run = dir.path().join("run");
    for f in ["report.json", "summary.csv", "metrics_csil.csv", "checkpoint_csil.json", "checkpoint_stage0.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics_csil.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "stage,strategy,acc_new,acc_old,acc_avg,doc_all,doc_new,forget"
    );
    assert_eq!(metrics.lines().count(), 4);

    let out = ok(&csil(
        &["doc", "run/checkpoint_csil.json", "--similarity", "sim.csv"],
        dir.path(),
    ));
    assert!(out.contains("classes    5"));
    assert!(out.contains("max |sim| stage 0 vs 1: 0e0"));
    let sim = std::fs::read_to_string(dir.path().join("sim.csv")).unwrap();
    assert_eq!(sim.lines().count(), 5);
}

#[test]
fn config_file_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.toml"),
        "devices = 4\ninitial_devices = 4\nstages = 1\nsamples_per_device = 10\ninitial_epochs = 1\nseed = 3\n",
    )
    .unwrap();
    let args = [
        "bench", "--config", "c.toml", "--seed", "5", "--format", "json", "--output-dir", "o",
    ];
    ok(&csil(&args, dir.path()));
    let report = std::fs::read_to_string(dir.path().join("o/report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["config"]["seed"], 5);
    assert_eq!(v["config"]["devices"], 4);
    assert!(!dir.path().join("o/summary.csv").exists());
}

#[test]
fn bench_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let mut args = vec!["bench", "--format", "json", "--strategies", "csil,finetune", "--output-dir", out];
        args.extend_from_slice(TINY);
        ok(&csil(&args, dir.path()));
    }
    let a = std::fs::read_to_string(dir.path().join("a/report.json")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b/report.json")).unwrap();
    // only the output directory differs
    assert_eq!(a.replace("\"a\"", "\"b\""), b);
}

#[test]
fn bad_input_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!csil(&["bench", "--strategies", "icarl"], dir.path()).status.success());
    assert!(!csil(&["bench", "--devices", "21"], dir.path()).status.success());
    assert!(!csil(&["ablate", "--no-kd"], dir.path()).status.success());
    std::fs::write(dir.path().join("bad.toml"), "device = 3\n").unwrap();
    assert!(!csil(&["bench", "--config", "bad.toml"], dir.path()).status.success());
    assert!(!csil(&["doc", "missing.json"], dir.path()).status.success());
}
