use std::path::Path;
use std::process::{Command, Output};

fn shadowsam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shadowsam"))
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("SHADOWSAM_CONFIG")
        .output()
        .unwrap()
}

fn code(args: &[&str]) -> i32 {
    shadowsam(args).status.code().unwrap()
}

fn with<'a>(head: &[&'a str], rest: &[&'a str]) -> Vec<&'a str> {
    [head, rest].concat()
}

fn synth(dir: &Path) -> String {
    let d = dir.join("data");
    let d = d.to_str().unwrap().to_string();
    assert_eq!(code(&["synth", "--out", &d, "--videos", "2", "--frames", "3", "--height", "24", "--width", "24"]), 0);
    d
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["eval"]), 2);
    assert_eq!(code(&["--set", "steps", "synth", "--out", "x"]), 2);
    assert_eq!(code(&["--set", "steps=many", "synth", "--out", "x"]), 2);
    assert_eq!(code(&["--set", "no_such_key=1", "synth", "--out", "x"]), 2);
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path());
    assert_eq!(code(&["ablate", "blocks", "--data", &d, "--out", "o", "--long", "on"]), 2);
    assert_eq!(code(&["ablate", "components", "--data", &d, "--out", "o", "--values", "1"]), 2);
    let boxes = tmp.path().join("b.txt");
    std::fs::write(&boxes, "0 0 3 3\n").unwrap();
    let args = ["infer", "--data", &d, "--out", "o", "--segmenter", "s", "--lstn", "l", "--boxes", boxes.to_str().unwrap()];
    assert_eq!(code(&args), 2, "one box file for two videos");
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let m = missing.to_str().unwrap();
    assert_eq!(code(&["eval", "--pred", m, "--gt", m]), 1);
    let d = synth(tmp.path());
    assert_eq!(code(&["eval", "--pred", &d, "--gt", &d]), 1, "nothing scored");
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "steps = -3\n").unwrap();
    assert_eq!(code(&["--config", cfg.to_str().unwrap(), "synth", "--out", m]), 1);
}

#[test]
fn ground_truth_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path());
    let out = tmp.path().join("report");
    let ann = format!("{d}/annotations");
    let o = shadowsam(&["eval", "--pred", &ann, "--gt", &d, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("report.jsonl")).unwrap();
    let dataset: serde_json::Value = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["type"] == "dataset")
        .unwrap();
    assert_eq!(dataset["metrics"]["iou"], 1.0);
    assert_eq!(dataset["metrics"]["mae"], 0.0);
    assert_eq!(dataset["metrics"]["frames"], 6);
    assert!(String::from_utf8_lossy(&o.stdout).contains("ALL"));
}

#[test]
fn toy_pipeline_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path());
    let models = tmp.path().join("models");
    let m = models.to_str().unwrap();
    let toy = [
        "--set", "segmenter_input_size=32", "--set", "segmenter_channels=8", "--set", "finetune_epochs=1",
        "--set", "lstn_channels=8", "--set", "lst_blocks=1", "--set", "steps=1", "--set", "batch_size=1",
        "--set", "crop_size=24", "--set", "crop_scale_min=1.0",
    ];
    assert_eq!(code(&with(&toy, &["finetune", "--data", &d, "--out", m])), 0);
    assert_eq!(code(&with(&toy, &["train-lstn", "--data", &d, "--out", m])), 0);
    for f in ["segmenter.safetensors", "finetune_log.jsonl", "lstn.safetensors", "train_log.jsonl", "config.txt"] {
        assert!(models.join(f).exists(), "{f}");
    }
    let seg = models.join("segmenter.safetensors");
    let lstn = models.join("lstn.safetensors");
    let pred = tmp.path().join("pred");
    let common = ["--data", &d, "--segmenter", seg.to_str().unwrap(), "--lstn", lstn.to_str().unwrap(), "--boxes-from-gt"];
    let p = pred.to_str().unwrap();
    assert_eq!(code(&with(&toy, &[&["infer-plus", "--out", p][..], &common[..]].concat())), 0);
    let agreement = std::fs::read_to_string(pred.join("agreement/synth00.jsonl")).unwrap();
    assert_eq!(agreement.lines().count(), 3);
    assert_eq!(code(&["eval", "--pred", p, "--gt", &d]), 0);
}
