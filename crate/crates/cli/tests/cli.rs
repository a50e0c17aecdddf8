use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn s4mi(args: &[&str], root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_s4mi"));
    cmd.args(args).env_remove("S4MI_OUTPUT_ROOT");
    if let Some(r) = root {
        cmd.env("S4MI_OUTPUT_ROOT", r);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"
name = "cli-tiny"
method = "supervised"
label_fraction = 0.5
seeds = [1, 2]
epochs = 1

[synthetic]
n_images = 16
image_size = 32

[model]
param_budget = 4000

[seg]
batch_size = 4
"#;

#[test]
fn synth_preprocess_weights_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let out = s4mi(&["synth", "--out", p(&raw), "--n-images", "6", "--image-size", "32", "--seed", "3"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(raw.join("masks")).unwrap().count(), 6);

    let w = s4mi(&["weights", "--masks", p(&raw.join("masks"))], None);
    assert!(w.status.success());
    let rec: serde_json::Value = serde_json::from_str(&stdout(&w)).unwrap();
    let freqs = rec["frequencies"].as_array().unwrap();
    assert_eq!(freqs.len(), 2);
    assert!(freqs[0].as_f64().unwrap() > freqs[1].as_f64().unwrap());
    assert_eq!(rec["schemes"][0]["scheme"], "pixel_ratio");
    assert_eq!(rec["schemes"][1]["scheme"], "median_frequency");
    let ratio = rec["schemes"][0]["weights"].as_array().unwrap();
    assert!(ratio[1].as_f64().unwrap() > ratio[0].as_f64().unwrap());

    let proc = tmp.path().join("proc");
    let pre = s4mi(
        &[
            "preprocess", "--images", p(&raw.join("images")), "--masks", p(&raw.join("masks")),
            "--out", p(&proc), "--mode", "direct", "--final-side", "16",
        ],
        None,
    );
    assert!(pre.status.success(), "{}", String::from_utf8_lossy(&pre.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(proc.join("manifest.json")).unwrap()).unwrap();
    let total: usize = ["train", "val", "test"].iter().map(|k| manifest["splits"][k].as_array().unwrap().len()).sum();
    assert_eq!(total, 6);
}

#[test]
fn eval_scores_identical_masks_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    assert!(s4mi(&["synth", "--out", p(&raw), "--n-images", "3", "--image-size", "16"], None).status.success());
    let rec_path = tmp.path().join("eval.json");
    let masks = raw.join("masks");
    let out = s4mi(&["eval", "--pred", p(&masks), "--gt", p(&masks), "--out", p(&rec_path)], None);
    assert!(out.status.success());
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(rec_path).unwrap()).unwrap();
    assert_eq!(rec["images"], 3);
    assert_eq!(rec["mean_iou"].as_f64().unwrap(), 1.0);
    assert_eq!(rec["per_class"][0]["f1"].as_f64().unwrap(), 1.0);
}

#[test]
fn train_uses_env_root_caches_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let root = tmp.path().join("runs");
    let first = s4mi(&["train", "--config", p(&cfg)], Some(&root));
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(first.status.code(), Some(0));
    let text = stdout(&first);
    assert!(text.contains("seed 1: test_iou") && text.contains("seed 2: test_iou"), "{text}");
    assert!(!text.contains("cached"));

    let second = s4mi(&["train", "--config", p(&cfg)], Some(&root));
    assert!(second.status.success());
    assert_eq!(stdout(&second).matches("(cached)").count(), 2);

    let report = tmp.path().join("report");
    let r = s4mi(&["report", "--out", p(&report)], Some(&root));
    assert!(r.status.success());
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("supervised,iou,,,"));
    assert!(report.join("report.svg").exists());
}

#[test]
fn train_exits_nonzero_when_a_seed_aborts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, format!("dataset = \"{}\"\n{TINY}", p(&tmp.path().join("missing")))).unwrap();
    let out = s4mi(&["train", "--config", p(&cfg), "--output-root", p(&tmp.path().join("runs"))], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("aborted"));
}

#[test]
fn invalid_protocol_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("picie.toml");
    fs::write(&cfg, "method = \"picie\"\nlabel_fraction = 0.5\n").unwrap();
    let out = s4mi(&["train", "--config", p(&cfg)], Some(&tmp.path().join("runs")));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("label fraction"));
}

#[test]
fn report_writes_saliency_maps_from_a_classifier_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("aug.toml");
    fs::write(
        &cfg,
        "method = \"selfsup_aug\"\nlabel_fraction = 1.0\nseeds = [1]\nepochs = 1\n\n[synthetic]\nn_images = 16\nimage_size = 32\n\n[pretrain]\nbatch_size = 4\n\n[finetune]\nbatch_size = 4\n",
    )
    .unwrap();
    let root = tmp.path().join("runs");
    let out = s4mi(&["train", "--config", p(&cfg)], Some(&root));
    assert!(out.status.success(), "{}", stdout(&out));
    let ckpt = fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap().path().join("seed-1").join("model.s4ma"))
        .find(|p| p.exists())
        .unwrap();

    let raw = tmp.path().join("raw");
    assert!(s4mi(&["synth", "--out", p(&raw), "--n-images", "10", "--image-size", "32"], None).status.success());
    let proc = tmp.path().join("proc");
    let pre = s4mi(
        &["preprocess", "--images", p(&raw.join("images")), "--out", p(&proc), "--mode", "direct", "--final-side", "32"],
        None,
    );
    assert!(pre.status.success(), "{}", String::from_utf8_lossy(&pre.stderr));

    let report = tmp.path().join("report");
    let r = s4mi(
        &["report", "--out", p(&report), "--saliency-model", p(&ckpt), "--saliency-data", p(&proc), "--saliency-count", "2"],
        Some(&root),
    );
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let maps = fs::read_dir(report.join("saliency")).unwrap().count();
    assert_eq!(maps, 2);
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("selfsup_aug,f1,,,,,") && l.contains(" ± ")));
}
