use std::path::Path;
use std::process::{Command, Output};

use vistag::dataset::{self, ClipManifest, DatasetManifest};
use vistag::model::ModelState;

fn vistag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vistag"))
        .args(args)
        .env_remove("VISTAG_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small, fast configuration written next to the outputs.
fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let text = format!(
        r#"{{
  "seed": 3,
  "network": {{
    "frames": 4, "height": 32, "width": 32,
    "encoder_widths": [8, 8], "attention_dim": 4, "bottleneck_channels": 8,
    "q_channels": 8, "tag_hidden_channels": 4, "tag_strides": [2, 2],
    "tag_embed": 4, "decoder_widths": [8, 8], "classes": 3
  }},
  "synth": {{ "frames": 4, "height": 32, "width": 32, "max_instances": 3 }}
  {extra}
}}"#
    );
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn synth_with_zero_clips_writes_a_valid_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = vistag(&["synth", "--out", s(&out), "--clips", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: DatasetManifest = dataset::read_json(&out.join("manifest.json")).unwrap();
    assert!(m.clips.is_empty());
}

#[test]
fn zero_epochs_write_initial_checkpoint_and_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "train": { "epochs": 0 }"#);
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    assert!(vistag(&["synth", "--config", s(&cfg), "--out", s(&data), "--clips", "1"]).status.success());
    let o = vistag(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let state = ModelState::load(&out.join("model.ckpt")).unwrap();
    assert_eq!(state.step(), 0);
    let log = std::fs::read_to_string(out.join("loss_log.csv")).unwrap();
    assert_eq!(log, "step,l_spectra,l_specter,l_tempra,l_temper,l_crossentropy,l_overall\n");
}

#[test]
fn diverging_training_exits_3_and_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "train": { "epochs": 5, "augment": false, "adam": { "lr": 1e30 } }"#);
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    assert!(vistag(&["synth", "--config", s(&cfg), "--out", s(&data), "--clips", "1"]).status.success());
    let o = vistag(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let state = ModelState::load(&out.join("model.ckpt")).unwrap();
    assert!(state.step() < 5);
    assert!(state.params().values().all(|t| t.is_finite()));
}

#[test]
fn infer_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "train": { "epochs": 0 }"#);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(vistag(&["synth", "--config", s(&cfg), "--out", s(&data), "--clips", "2"]).status.success());
    assert!(vistag(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]).status.success());
    let ckpt = run.join("model.ckpt");
    let clip = data.join("clip_0000");
    let pred = dir.path().join("pred");
    let o = vistag(&["infer", "--config", s(&cfg), "--ckpt", s(&ckpt), "--frames", s(&clip), "--out", s(&pred)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: ClipManifest = dataset::read_json(&pred.join("manifest.json")).unwrap();
    assert_eq!(m.instance_masks.len(), 4);
    assert_eq!(m.interpolated_frames, Some(vec![]));

    // Ground truth scored against itself.
    let report = dir.path().join("self.json");
    let o = vistag(&["eval", "--config", s(&cfg), "--pred", s(&data), "--gt", s(&data), "--out", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["j_and_f"], 100.0);
    assert_eq!(r["map"], 100.0);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("J&F") && table.contains("100.0"), "{table}");

    // A prediction with a frame removed is reported with exit code 2.
    std::fs::remove_file(pred.join("inst_002.pgm")).unwrap();
    let o = vistag(&["eval", "--config", s(&cfg), "--pred", s(&pred), "--gt", s(&clip), "--out", s(&report)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("inst_002.pgm"));
}

#[test]
fn infer_rejects_wrong_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "train": { "epochs": 0 }"#);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(vistag(&["synth", "--config", s(&cfg), "--out", s(&data), "--clips", "1"]).status.success());
    assert!(vistag(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]).status.success());
    let other = dir.path().join("other");
    assert!(vistag(&["synth", "--out", s(&other), "--clips", "1"]).status.success());
    let o = vistag(&[
        "infer", "--config", s(&cfg), "--ckpt", s(&run.join("model.ckpt")),
        "--frames", s(&other.join("clip_0000")), "--out", s(&dir.path().join("pred")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"bogus": 1}"#).unwrap();
    assert_eq!(vistag(&["synth", "--config", s(&p), "--out", s(dir.path())]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_vistag"))
        .args(["synth", "--out", s(&dir.path().join("x")), "--clips", "0"])
        .env("VISTAG_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_flags_tiny_steps() {
    let o = vistag(&["gradcheck", "--seed", "1", "--points", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let again = vistag(&["gradcheck", "--seed", "1", "--points", "3"]);
    assert_eq!(o.stdout, again.stdout);
    let o = vistag(&["gradcheck", "--seed", "1", "--points", "1", "--eps", "1e-12"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("inconclusive"));
}
