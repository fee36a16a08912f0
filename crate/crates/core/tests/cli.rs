use std::path::Path;
use std::process::{Command, Output};

fn mgf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgf"))
        .args(args)
        .output()
        .expect("spawn mgf")
}

fn ok(args: &[&str]) -> Output {
    let out = mgf(args);
    assert!(
        out.status.success(),
        "mgf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn train_small(dir: &Path) -> String {
    let ckpt = dir.join("m.ckpt").to_string_lossy().into_owned();
    let log = dir.join("loss.tsv").to_string_lossy().into_owned();
    ok(&[
        "train",
        "--synth-n",
        "120",
        "--k",
        "3",
        "--epochs",
        "2",
        "--batch",
        "32",
        "--layers",
        "2",
        "--hidden",
        "16",
        "--context-dim",
        "8",
        "--m-train",
        "5",
        "--seed",
        "3",
        "--checkpoint",
        &ckpt,
        "--loss-log",
        &log,
    ]);
    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 2);
    assert!(lines.starts_with("epoch\t1\ttotal\t"));
    ckpt
}

#[derive(serde::Deserialize)]
struct Sample {
    candidates: Vec<Vec<[f64; 2]>>,
    components: Vec<usize>,
    log_probs: Vec<f64>,
    prior_version: u64,
}

fn sample(args: &[&str]) -> Sample {
    let out = ok(args);
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn train_sample_edit_eval() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path());

    let s = sample(&["sample", "--checkpoint", &ckpt, "--m", "20", "--seed", "4"]);
    assert_eq!(s.candidates.len(), 20);
    assert!(s.candidates.iter().all(|c| c.len() == 12));
    assert!(s.log_probs.iter().all(|v| v.is_finite()));
    let again = ok(&["sample", "--checkpoint", &ckpt, "--m", "20", "--seed", "4"]).stdout;
    assert_eq!(
        again,
        ok(&["sample", "--checkpoint", &ckpt, "--m", "20", "--seed", "4"]).stdout
    );

    let history = "0,0;1,0;2,0;3,0;4,0;5,0;6,0;7,0";
    let h = sample(&["sample", "--checkpoint", &ckpt, "--m", "5", "--history", history]);
    assert_eq!(h.candidates.len(), 5);

    let edited = dir.path().join("edited.ckpt").to_string_lossy().into_owned();
    ok(&[
        "edit-prior",
        "--checkpoint",
        &ckpt,
        "--output",
        &edited,
        "--set-weights",
        "2,1,1",
    ]);
    let s = sample(&["sample", "--checkpoint", &edited, "--m", "10000", "--seed", "9"]);
    assert_eq!(s.prior_version, 1);
    let mut counts = [0usize; 3];
    s.components.iter().for_each(|&c| counts[c] += 1);
    for (c, want) in counts.iter().zip([0.5, 0.25, 0.25]) {
        let freq = *c as f64 / 10_000.0;
        assert!((freq - want).abs() < 0.02, "{counts:?}");
    }

    let clustered = sample(&["sample", "--checkpoint", &ckpt, "--m", "6", "--clustering", "--j", "60"]);
    assert_eq!(clustered.candidates.len(), 6);

    let report = dir.path().join("report.json").to_string_lossy().into_owned();
    let out = ok(&[
        "eval",
        "--synth-n",
        "120",
        "--seed",
        "3",
        "--checkpoint",
        &ckpt,
        "--m",
        "5",
        "--m-sweep",
        "5,10",
        "--worst-n",
        "3",
        "--report",
        &report,
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("minADE") && text.contains("worst-3"), "{text}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["sweep"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_invocations_fail() {
    assert!(!mgf(&["train", "--no-such-flag"]).status.success());
    assert!(!mgf(&["sample", "--checkpoint", "/nonexistent/m.ckpt"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path());
    let out = mgf(&["edit-prior", "--checkpoint", &ckpt, "--set-weights", "1,1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("weights"));
    let out = mgf(&["sample", "--checkpoint", &ckpt, "--history", "0,0;1,0"]);
    assert!(!out.status.success());
}
