use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rlfat_cli::{read_metrics, MetricsRecord};

const CONFIG: &str = r#"
id = "cli"
seed = 5
output_dir = "out"

[data.source]
format = "synthetic"
classes = 3
shape = [1, 8, 8]
train_per_class = 10
test_per_class = 4

[model]
conv_widths = [4]
hidden = 8

[train]
method = "RLFAT_P"
steps = 6
batch_size = 6

[[attacks]]
kind = "fgsm"
epsilon = 0.1

[saliency]
indices = [0, 1, 2, 3]
samples = 3
"#;

fn rlfat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlfat")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn metrics(dir: &Path) -> Vec<MetricsRecord> {
    read_metrics(&dir.join("out/metrics.jsonl")).unwrap()
}

#[test]
fn stages_run_independently_against_a_checkpoint() {
    let (dir, cfg) = setup(CONFIG);
    let ckpt = dir.path().join("out/model.ckpt");
    ok(&rlfat(&["train", "--config", s(&cfg)]));
    assert!(ckpt.exists());
    assert!(dir.path().join("out/train_log.tsv").exists());

    let out = ok(&rlfat(&["attack", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--attack", "pgd"]));
    assert!(out.contains("pgd success rate"));
    let flags = fs::read_to_string(dir.path().join("out/attack_pgd.tsv")).unwrap();
    let lines: Vec<&str> = flags.lines().collect();
    assert_eq!(lines[0], "index\tlabel\tclean_pred\tadv_pred\tsuccess\tlinf");
    assert_eq!(lines.len(), 1 + 12);
    assert!(lines[1..].iter().all(|l| matches!(l.split('\t').nth(4), Some("0" | "1"))));

    ok(&rlfat(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt)]));
    ok(&rlfat(&["sensitivity", "--config", s(&cfg), "--checkpoint", s(&ckpt)]));
    let names: Vec<String> = metrics(dir.path()).into_iter().map(|r| r.metric).collect();
    for m in ["final_train_loss", "attack_success_rate", "clean_accuracy", "robust_accuracy"] {
        assert!(names.iter().any(|n| n == m), "{m} missing from {names:?}");
    }
    assert_eq!(names.iter().filter(|n| n.starts_with("sensitivity_")).count(), 4);

    let sal = dir.path().join("maps");
    let out = ok(&rlfat(&[
        "saliency", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--indices", "0,2,5,7", "--out", s(&sal),
    ]));
    assert_eq!(out.lines().count(), 8);
    for i in [0, 2, 5, 7] {
        assert!(fs::read(sal.join(format!("RLFAT_P_{i}.pgm"))).unwrap().starts_with(b"P5\n8 8\n255\n"));
        assert!(sal.join(format!("original_{i}.pgm")).exists());
    }

    let report = ok(&rlfat(&["report", "--metrics", s(&dir.path().join("out/metrics.jsonl"))]));
    assert!(report.contains("clean_accuracy"));
}

#[test]
fn evaluate_without_attacks_logs_clean_accuracy_only() {
    let text = CONFIG.replace("[[attacks]]\nkind = \"fgsm\"\nepsilon = 0.1\n", "");
    let (dir, cfg) = setup(&text);
    ok(&rlfat(&["train", "--config", s(&cfg)]));
    ok(&rlfat(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&dir.path().join("out/model.ckpt"))]));
    let names: Vec<String> = metrics(dir.path()).into_iter().map(|r| r.metric).collect();
    assert_eq!(names, vec!["final_train_loss", "clean_accuracy"]);
}

#[test]
fn full_run_writes_every_output() {
    let (dir, cfg) = setup(CONFIG);
    let out = ok(&rlfat(&["run", "--config", s(&cfg)]));
    assert!(out.contains("robust_accuracy"));
    let base = dir.path().join("out");
    assert!(base.join("model.ckpt").exists());
    assert!(!base.join("FAILED").exists());
    assert_eq!(fs::read_dir(base.join("saliency")).unwrap().count(), 8);
    let recs = metrics(dir.path());
    assert!(recs.iter().all(|r| r.experiment == "cli" && r.method == "RLFAT_P"));
}

#[test]
fn missing_checkpoint_is_reported() {
    let (dir, cfg) = setup(CONFIG);
    let out = rlfat(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&dir.path().join("nope.ckpt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let (dir, cfg) = setup(CONFIG);
    ok(&rlfat(&["train", "--config", s(&cfg)]));
    let other = CONFIG.replace("classes = 3", "classes = 4");
    let other_cfg = dir.path().join("other.toml");
    fs::write(&other_cfg, other).unwrap();
    let out = rlfat(&["evaluate", "--config", s(&other_cfg), "--checkpoint", s(&dir.path().join("out/model.ckpt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}

#[test]
fn failing_stage_leaves_a_marker() {
    let text = CONFIG.replace("indices = [0, 1, 2, 3]", "indices = [0, 99]");
    let (dir, cfg) = setup(&text);
    let out = rlfat(&["run", "--config", s(&cfg)]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("saliency"), "{stderr}");
    let marker = fs::read_to_string(dir.path().join("out/FAILED")).unwrap();
    assert!(marker.contains("saliency") && marker.contains("99"), "{marker}");
    // Earlier stages' outputs stay in place next to the marker.
    assert!(dir.path().join("out/model.ckpt").exists());
}

#[test]
fn bad_config_key_is_named() {
    let (_dir, cfg) = setup(&CONFIG.replace("hidden = 8", "hiden = 8"));
    let out = rlfat(&["train", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hiden"));
}

#[test]
fn reruns_reproduce_metrics() {
    let strip = |dir: &Path| -> Vec<MetricsRecord> {
        metrics(dir)
            .into_iter()
            .map(|mut r| {
                r.timestamp_ms = 0;
                r
            })
            .collect()
    };
    let (a, cfg_a) = setup(CONFIG);
    let (b, cfg_b) = setup(CONFIG);
    ok(&rlfat(&["run", "--config", s(&cfg_a)]));
    ok(&rlfat(&["run", "--config", s(&cfg_b)]));
    assert_eq!(strip(a.path()), strip(b.path()));
    // Rerunning in place replaces the log rather than appending to it.
    let before = metrics(a.path()).len();
    ok(&rlfat(&["run", "--config", s(&cfg_a)]));
    assert_eq!(metrics(a.path()).len(), before);
}

#[test]
fn shipped_config_is_valid() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/mnist-desk.toml");
    let cfg = rlfat_cli::load_config(&path).unwrap();
    assert_eq!(cfg.attacks.len(), 4);
    assert_eq!(cfg.train_config().eta, 0.5);
}
