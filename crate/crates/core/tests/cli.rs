use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn splitlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

const SMALL: [&str; 8] = ["--dataset", "synth", "--examples", "128", "--batch-size", "16", "--epochs", "1"];

#[test]
fn synthetic_training_writes_checkpoints_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    for topology in ["label-sharing", "server-data", "client-labels"] {
        let mut args = vec!["train", "--topology", topology, "--out-dir", &out];
        args.extend(SMALL);
        let r = splitlab(&args);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        let curve = fs::read_to_string(dir.path().join("train_curve.csv")).unwrap();
        assert_eq!(curve.lines().count(), 1 + 8, "{topology}");
        assert!(dir.path().join("client.uspl").exists());
        assert!(dir.path().join("server.uspl").exists());
    }
    assert!(dir.path().join("client_tail.uspl").exists());
    let cfg = fs::read_to_string(dir.path().join("effective.cfg")).unwrap();
    assert!(cfg.contains("batch_size=16"));
}

#[test]
fn two_processes_with_mismatched_configs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let transport = format!("tcp:127.0.0.1:{port}");
    let base = |role: &'static str, batch: &'static str, sub: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_splitlab"));
        c.args(["train", "--role", role, "--transport", &transport, "--dataset", "synth"]);
        c.args(["--examples", "64", "--epochs", "1", "--batch-size", batch]);
        c.args(["--out-dir", dir.path().join(sub).to_str().unwrap()]);
        c
    };
    let server = base("server", "16", "s").spawn().unwrap();
    let client = base("client", "8", "c").output().unwrap();
    let server = server.wait_with_output().unwrap();
    assert_eq!(client.status.code(), Some(3), "{}", String::from_utf8_lossy(&client.stderr));
    assert_eq!(server.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&client.stderr).contains("configuration mismatch"));
}

#[test]
fn two_processes_reproduce_the_in_process_run() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let transport = format!("tcp:127.0.0.1:{port}");
    let run = |role: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_splitlab"));
        c.args(["train", "--role", role, "--transport", &transport, "--topology", "client-labels"]);
        c.args(SMALL).args(["--out-dir", dir.path().join(role).to_str().unwrap()]);
        c
    };
    let server = run("server").spawn().unwrap();
    let client = run("client").output().unwrap();
    assert!(client.status.success(), "{}", String::from_utf8_lossy(&client.stderr));
    assert!(server.wait_with_output().unwrap().status.success());
    // the client computes the loss in this topology
    let curve = fs::read_to_string(dir.path().join("client/train_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 9);

    let local = dir.path().join("both");
    let mut args = vec!["train", "--topology", "client-labels", "--out-dir", local.to_str().unwrap()];
    args.extend(SMALL);
    assert!(splitlab(&args).status.success());
    assert_eq!(fs::read_to_string(local.join("train_curve.csv")).unwrap(), curve);
    assert_eq!(
        fs::read(local.join("client.uspl")).unwrap(),
        fs::read(dir.path().join("client/client.uspl")).unwrap()
    );
}

#[test]
fn label_inference_refuses_minibatches() {
    let dir = tempfile::tempdir().unwrap();
    let r = splitlab(&[
        "attack-labels", "--dataset", "synth", "--topology", "server-data", "--batch-size", "4", "--out-dir",
        &out_arg(dir.path()),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("one example per step"));
}

#[test]
fn label_inference_runs_with_single_examples() {
    let dir = tempfile::tempdir().unwrap();
    let r = splitlab(&[
        "attack-labels", "--dataset", "synth", "--topology", "client-labels", "--batch-size", "1", "--set",
        "label_steps=30", "--out-dir", &out_arg(dir.path()),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("100.0%"));
    let rows = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    assert_eq!(rows.lines().count(), 31);
}

#[test]
fn inversion_needs_a_checkpoint_and_uses_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let r = splitlab(&["attack-invert", "--dataset", "synth", "--out-dir", &out]);
    assert_eq!(r.status.code(), Some(2));
    let missing = dir.path().join("nope.uspl");
    let r = splitlab(&["attack-invert", "--dataset", "synth", "--out-dir", &out, "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(5));

    let mut args = vec!["train", "--out-dir", &out];
    args.extend(SMALL);
    assert!(splitlab(&args).status.success());
    let ck = dir.path().join("client.uspl");
    let r = splitlab(&[
        "attack-invert", "--dataset", "synth", "--out-dir", &out, "--checkpoint", ck.to_str().unwrap(), "--rounds",
        "3", "--input-steps", "10", "--model-steps", "10", "--attack-images", "4",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["targets.pgm", "estimates.pgm", "grid.pgm", "metrics.csv", "clone.uspl"] {
        assert!(dir.path().join("invert").join(f).exists(), "{f}");
    }
}

#[test]
fn report_resumes_without_redoing_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let args = [
        "report", "--dataset", "synth", "--examples", "200", "--set", "test_examples=100", "--epochs", "1",
        "--batch-size", "16", "--depths", "1,2", "--rounds", "2", "--input-steps", "5", "--model-steps", "5",
        "--attack-images", "2", "--set", "label_steps=10", "--set", "head_epochs=1", "--out-dir", &out,
    ];
    let first = splitlab(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 4);
    let hash = report.lines().nth(1).unwrap().rsplit(',').next().unwrap().to_string();
    assert!(report.lines().skip(1).all(|l| l.ends_with(&hash)));

    let again = splitlab(&args);
    assert!(again.status.success());
    assert!(String::from_utf8_lossy(&again.stdout).contains("0 new rows"));
    assert_eq!(fs::read_to_string(dir.path().join("report.csv")).unwrap(), report);

    // a different setting is a different configuration and adds rows
    let mut changed = args.to_vec();
    changed.extend(["--seed", "1"]);
    assert!(splitlab(&changed).status.success());
    assert_eq!(fs::read_to_string(dir.path().join("report.csv")).unwrap().lines().count(), 1 + 8);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    fs::write(&file, "# synthetic smoke run\ndataset=synth\nexamples=64\nbatch_size=32\nepochs=1\n").unwrap();
    let r = splitlab(&[
        "train", "--config", file.to_str().unwrap(), "--batch-size", "16", "--out-dir", &out_arg(dir.path()),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let cfg = fs::read_to_string(dir.path().join("effective.cfg")).unwrap();
    assert!(cfg.contains("batch_size=16") && cfg.contains("examples=64"));
    let curve = fs::read_to_string(dir.path().join("train_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 4);
}

#[test]
fn bad_settings_exit_with_config_code() {
    let r = splitlab(&["train", "--batch-size", "zero"]);
    assert_eq!(r.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let r = splitlab(&["train", "--dataset", "synth", "--role", "client", "--out-dir", &out_arg(dir.path())]);
    assert_eq!(r.status.code(), Some(2));
}
