use std::path::{Path, PathBuf};
use std::process::Command;

use bevpaint::cli::{cmd_datagen, cmd_eval, cmd_train, RunConfig};
use bevpaint::dataset::{Manifest, Split};
use bevpaint::metrics::IouAccumulator;
use serde_json::Value;

const TINY: &str = "\
[run]
preset = toy
out = run
[data]
dir = data
count = 5
[model]
encoder_widths = 8,8,8,8
decoder_width = 8
[train]
steps = 3
batch = 2
checkpoint_every = 2
[eval]
panels = 1
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bevpaint"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.ini");
    std::fs::write(&p, text).unwrap();
    p
}

fn log_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn without_wallclock(lines: &[Value]) -> Vec<Value> {
    lines
        .iter()
        .map(|v| {
            let mut v = v.clone();
            v.as_object_mut().unwrap().remove("wallclock");
            v
        })
        .collect()
}

#[test]
fn eighty_scene_manifest_splits_sixty_four_sixteen() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse("[run]\npreset = toy\n", dir.path()).unwrap();
    cfg.data.count = 80;
    let m = cmd_datagen(&cfg).unwrap();
    assert_eq!(m.entries(Split::Train).count(), 64);
    assert_eq!(m.entries(Split::Test).count(), 16);
    let back = Manifest::load(&dir.path().join("data/manifest.json")).unwrap();
    assert_eq!(back, m);
    assert!(dir.path().join("data/scene_0079/cam_1.ppm").exists());
}

#[test]
fn empty_dataset_still_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[run]\npreset = toy\n[data]\ncount = 0\n");
    let st = bin().args(["datagen", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let m = Manifest::load(&dir.path().join("data/manifest.json")).unwrap();
    assert!(m.scenes.is_empty());
}

#[test]
fn datagen_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    for out in ["a", "b"] {
        let st = bin().args(["datagen", "--config"]).arg(&cfg).args(["--out", out]).current_dir(dir.path()).status().unwrap();
        assert_eq!(st.code(), Some(0));
    }
    for f in ["manifest.json", "scene_0003/cam_0.ppm", "scene_0003/bev_occupancy.occg", "scene_0003/scene.json"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn train_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(TINY, dir.path()).unwrap();
    cmd_datagen(&cfg).unwrap();
    let s = cmd_train(&cfg).unwrap();
    assert!(s.checkpoint.exists());
    let lines = log_lines(&s.log);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["step"], 0);
    assert!((lines[0]["loss_occ"].as_f64().unwrap() - std::f64::consts::LN_2).abs() < 1e-5);
    for l in &lines {
        for k in ["loss_occ", "loss_app", "loss_total", "wallclock"] {
            assert!(l[k].is_number(), "{k}");
        }
    }

    let report = cmd_eval(&cfg).unwrap();
    assert_eq!(report.iou.len(), 3);
    assert_eq!(report.config_fingerprint, cfg.fingerprint());
    assert!(report.appearance_l1.is_some());
    let out = dir.path().join("run");
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config_fingerprint"], cfg.fingerprint());
    let centroids: Value = serde_json::from_str(&std::fs::read_to_string(out.join("centroids.json")).unwrap()).unwrap();
    assert_eq!(centroids.as_array().unwrap().len(), report.samples);
    assert_eq!(std::fs::read_dir(out.join("panels")).unwrap().count(), 1);
}

#[test]
fn occupancy_only_logs_zero_appearance_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = |args: &[&str]| bin().args(args).arg("--config").arg(&cfg).status().unwrap().code();
    assert_eq!(run(&["datagen"]), Some(0));
    assert_eq!(run(&["train", "--occupancy-only", "--out", dir.path().join("occ").to_str().unwrap()]), Some(0));
    for l in log_lines(&dir.path().join("occ/train_log.jsonl")) {
        assert_eq!(l["loss_app"].as_f64(), Some(0.0));
    }
    assert_eq!(run(&["eval", "--occupancy-only", "--out", dir.path().join("occ").to_str().unwrap()]), Some(0));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("occ/metrics.json")).unwrap()).unwrap();
    assert!(m["appearance_l1"].is_null());
}

#[test]
fn identical_runs_replay_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(TINY, dir.path()).unwrap();
    cmd_datagen(&cfg).unwrap();
    let a = log_lines(&cmd_train(&cfg).unwrap().log);
    cfg.out = dir.path().join("again");
    let b = log_lines(&cmd_train(&cfg).unwrap().log);
    assert_eq!(without_wallclock(&a), without_wallclock(&b));
    cfg.train.seed = 1;
    cfg.out = dir.path().join("other");
    let c = log_lines(&cmd_train(&cfg).unwrap().log);
    assert_ne!(without_wallclock(&a), without_wallclock(&c));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    // Missing config file.
    let st = bin().args(["train", "--config", "/nonexistent/x.ini"]).status().unwrap();
    assert_eq!(st.code(), Some(1));
    // Unknown key.
    let bad = write_config(dir.path(), "[train]\nrate = 3\n");
    assert_eq!(bin().args(["train", "--config"]).arg(&bad).status().unwrap().code(), Some(1));
    // Bad arguments.
    assert_eq!(bin().args(["train"]).status().unwrap().code(), Some(1));
    assert_eq!(bin().arg("--help").status().unwrap().code(), Some(0));

    // Checkpoint from a different model shape.
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(bin().args(["datagen", "--config"]).arg(&cfg).status().unwrap().code(), Some(0));
    assert_eq!(bin().args(["train", "--config"]).arg(&cfg).status().unwrap().code(), Some(0));
    let wide = write_config(dir.path(), &TINY.replace("decoder_width = 8", "decoder_width = 4"));
    let out = bin().args(["eval", "--config"]).arg(&wide).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("occupancy.stage1.conv1.weight"), "{msg}");

    // Diverging optimiser.
    let hot = write_config(dir.path(), &TINY.replace("steps = 3", "steps = 200\nlr = 1e30"));
    let out = bin().args(["train", "--config"]).arg(&hot).args(["--out", "hot"]).current_dir(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // Missing camera image for IPM.
    let ipm = write_config(
        dir.path(),
        "[run]\npreset = toy\n[ipm]\nrig = data/scene_0000/rig.json\nimages = data/scene_0000/cam_0.ppm, missing.ppm\n",
    );
    assert_eq!(bin().args(["ipm", "--config"]).arg(&ipm).status().unwrap().code(), Some(1));
}

#[test]
fn ground_truth_scores_perfectly_and_all_positive_scores_frequency() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(TINY, dir.path()).unwrap();
    cfg.data.count = 10;
    let m = cmd_datagen(&cfg).unwrap();
    let mut gt = IouAccumulator::new(3);
    let mut all = IouAccumulator::new(3);
    let (mut pos, mut total) = ([0u64; 3], 0u64);
    for e in m.entries(Split::Test) {
        let s = bevpaint::dataset::Sample::load(&cfg.data.dir.join(&e.name), &cfg.model.grid).unwrap();
        let occ = s.occupancy.data();
        gt.add(occ, occ, 0.5).unwrap();
        all.add(&vec![1.0; occ.len()], occ, 0.5).unwrap();
        let plane = occ.len() / 3;
        for c in 0..3 {
            pos[c] += occ[c * plane..(c + 1) * plane].iter().filter(|&&v| v > 0.5).count() as u64;
        }
        total += plane as u64;
    }
    assert!(gt.iou().iter().all(|&v| v == 1.0));
    for (iou, &p) in all.iou().iter().zip(&pos) {
        assert!((iou - p as f64 / total as f64).abs() < 1e-12);
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["toy.ini", "surround.ini", "front.ini"] {
        let cfg = RunConfig::load(&dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.validate().unwrap();
        cfg.camera_rig().unwrap();
    }
}
