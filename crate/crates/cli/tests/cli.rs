use std::path::Path;
use std::process::{Command, Output};

use posedet::annotation::{parse_box_file, read_manifest, ClassMap};
use posedet::postprocess::{Detection, DetectionRecord};

fn posedet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posedet"))
        .args(args)
        .current_dir(dir)
        .env_remove("POSEDET_CONFIG_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn failure(out: &Output) -> (i32, String) {
    assert!(!out.status.success(), "unexpected success: {}", String::from_utf8_lossy(&out.stdout));
    (out.status.code().unwrap(), String::from_utf8(out.stderr.clone()).unwrap())
}

fn count(dir: &Path, ext: &str) -> usize {
    std::fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext)).count()
}

#[test]
fn synth_writes_the_requested_corpus_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&posedet(d, &["synth", "--out", "a", "--seed", "7", "--n", "64"]));
    ok(&posedet(d, &["synth", "--out", "b", "--seed", "7", "--n", "64"]));
    assert_eq!(count(&d.join("a/images"), "png"), 64);
    assert_eq!(count(&d.join("a/annotations"), "xml"), 64);
    assert_eq!(count(&d.join("a/keypoints"), "json"), 64);
    assert_eq!(read_manifest(&d.join("a/manifest.jsonl")).unwrap().len(), 64);
    for rel in ["manifest.jsonl", "images/synth_s7_00063.png", "annotations/synth_s7_00010.xml"] {
        assert_eq!(std::fs::read(d.join("a").join(rel)).unwrap(), std::fs::read(d.join("b").join(rel)).unwrap());
    }
}

#[test]
fn eval_scores_ground_truth_detections_as_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&posedet(d, &["synth", "--out", "c", "--seed", "2", "--n", "12"]));
    let classes = ClassMap::default();
    let mut lines = String::new();
    for rec in read_manifest(&d.join("c/manifest.jsonl")).unwrap() {
        for b in parse_box_file(&d.join("c").join(&rec.boxes), &classes).unwrap() {
            let det = Detection { class_id: b.class_id, score: 1.0, bbox: b.bbox };
            lines += &serde_json::to_string(&DetectionRecord::new(&rec.image_id, &det, &classes)).unwrap();
            lines.push('\n');
        }
    }
    std::fs::write(d.join("dets.jsonl"), lines).unwrap();
    let stdout = ok(&posedet(
        d,
        &["eval", "--manifest", "c/manifest.jsonl", "--detections", "dets.jsonl", "--split", "all", "--out", "r.json"],
    ));
    assert!(stdout.contains("mAP 1.0000"), "{stdout}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["map"], 1.0);
    assert_eq!(report["split"], "all");
}

#[test]
fn errors_exit_nonzero_with_a_module_qualified_name() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let (code, err) = failure(&posedet(d, &["train", "--manifest", "missing.jsonl", "--out", "m.ckpt"]));
    assert_eq!(code, 1);
    assert!(err.starts_with("error[annotation_ingest::IoError]"), "{err}");

    let (code, err) = failure(&posedet(d, &["--set", "train.no_such_key=1", "config"]));
    assert_eq!(code, 2);
    assert!(err.starts_with("error[cli::ConfigError]"), "{err}");

    std::fs::write(d.join("bad.toml"), "[train]\nbase_lr = \"fast\"\n").unwrap();
    let (code, err) = failure(&posedet(d, &["--config", "bad.toml", "config"]));
    assert_eq!(code, 2);
    assert!(err.contains("cli::ConfigError"), "{err}");

    ok(&posedet(d, &["synth", "--out", "c", "--n", "2"]));
    let (_, err) = failure(&posedet(d, &["eval", "--manifest", "c/manifest.jsonl", "--checkpoint", "none.ckpt"]));
    assert!(err.starts_with("error[network::IoError]"), "{err}");

    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let (_, err) = failure(&posedet(d, &["eval", "--manifest", "c/manifest.jsonl", "--checkpoint", "junk.ckpt"]));
    assert!(err.starts_with("error[network::"), "{err}");

    let (_, err) = failure(&posedet(
        d,
        &[
            "--set",
            "train.batch_size=0",
            "train",
            "--manifest",
            "c/manifest.jsonl",
            "--out",
            "x.ckpt",
            "--split",
            "all",
        ],
    ));
    assert!(err.starts_with("error[trainer::InvalidConfig]"), "{err}");
    assert!(!d.join("x.ckpt").exists());
}

#[test]
fn config_precedence_is_defaults_then_file_then_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let lr = |out: &str| out.lines().find(|l| l.starts_with("base_lr")).unwrap().to_string();
    let default = ok(&posedet(d, &["config"]));
    assert_eq!(lr(&default), "base_lr = 0.01");

    std::fs::write(d.join("c.toml"), "[train]\nbase_lr = 0.5\nmax_steps = 7\n").unwrap();
    let from_file = ok(&posedet(d, &["--config", "c.toml", "config"]));
    assert_eq!(lr(&from_file), "base_lr = 0.5");
    assert!(from_file.contains("max_steps = 7"));

    let overridden = ok(&posedet(d, &["--config", "c.toml", "--set", "train.base_lr=0.25", "config"]));
    assert_eq!(lr(&overridden), "base_lr = 0.25");
    assert!(overridden.contains("max_steps = 7"));

    // the default config directory comes from the environment
    std::fs::create_dir(d.join("cfg")).unwrap();
    std::fs::write(d.join("cfg/posedet.toml"), "[train]\nbase_lr = 0.125\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_posedet"))
        .arg("config")
        .current_dir(d)
        .env("POSEDET_CONFIG_DIR", d.join("cfg"))
        .output()
        .unwrap();
    assert_eq!(lr(&ok(&out)), "base_lr = 0.125");
}

#[test]
fn prepare_standardizes_and_reports_rejections() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&posedet(d, &["--set", "synth.image_size=[384, 256]", "synth", "--out", "raw", "--n", "3"]));
    // break one record so it is rejected
    let manifest = std::fs::read_to_string(d.join("raw/manifest.jsonl")).unwrap();
    let broken = manifest.replacen("annotations/synth_s0_00001.xml", "annotations/gone.xml", 1);
    std::fs::write(d.join("raw/manifest.jsonl"), broken).unwrap();
    ok(&posedet(
        d,
        &["--set", "prepare.size=[256, 128]", "prepare", "--manifest", "raw/manifest.jsonl", "--out", "std"],
    ));
    let recs = read_manifest(&d.join("std/manifest.jsonl")).unwrap();
    assert_eq!(recs.len(), 2);
    assert!(recs.iter().all(|r| (r.width, r.height) == (256, 128)));
    let rejected = std::fs::read_to_string(d.join("std/rejected.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(rejected.lines().next().unwrap()).unwrap();
    assert_eq!(line["image_id"], "synth_s0_00001");
    assert_eq!(line["error"], "annotation_ingest::IoError");
}

#[test]
fn dumps_and_a_short_ablation_write_their_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&posedet(d, &["synth", "--out", "c", "--n", "6"]));
    ok(&posedet(d, &["dump-targets", "--manifest", "c/manifest.jsonl", "--out", "t.png"]));
    ok(&posedet(
        d,
        &["dump-heatmaps", "--manifest", "c/manifest.jsonl", "--image-id", "synth_s0_00002", "--out", "h.png"],
    ));
    assert!(std::fs::metadata(d.join("t.png")).unwrap().len() > 0);
    assert!(std::fs::metadata(d.join("h.png")).unwrap().len() > 0);
    let (_, err) = failure(&posedet(
        d,
        &["dump-targets", "--manifest", "c/manifest.jsonl", "--image-id", "nope", "--out", "x.png"],
    ));
    assert!(err.starts_with("error[cli::"), "{err}");

    let set = ["--set", "train.max_steps=2", "--set", "train.batch_size=2"];
    let mut args: Vec<&str> = set.to_vec();
    args.extend(["ablate", "--manifest", "c/manifest.jsonl", "--out", "abl", "--stacks", "0,1"]);
    ok(&posedet(d, &args));
    let table = std::fs::read_to_string(d.join("abl/table.txt")).unwrap();
    assert!(table.contains("baseline-tiny") && table.contains("pose-T1-tiny"), "{table}");
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("abl/rows.json")).unwrap()).unwrap();
    assert_eq!(rows["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn overfit_checkpoint_recovers_the_training_boxes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&posedet(d, &["synth", "--out", "c", "--seed", "3", "--n", "1"]));
    let set = [
        "--set",
        "train.batch_size=1",
        "--set",
        "train.max_steps=300",
        "--set",
        "train.warmup_steps=20",
        "--set",
        "train.flip_prob=0",
    ];
    let mut args: Vec<&str> = set.to_vec();
    args.extend(["train", "--manifest", "c/manifest.jsonl", "--out", "m.ckpt", "--split", "all", "--log", "log.jsonl"]);
    ok(&posedet(d, &args));
    assert_eq!(std::fs::read_to_string(d.join("log.jsonl")).unwrap().lines().count(), 300);

    let image = "c/images/synth_s3_00000.png";
    let boxes = "c/annotations/synth_s3_00000.xml";
    let stdout =
        ok(&posedet(d, &["infer", "--checkpoint", "m.ckpt", "--image", image, "--boxes", boxes, "--out", "inf"]));
    assert!(d.join("inf/synth_s3_00000_overlay.png").exists());

    let classes = ClassMap::default();
    let gts = parse_box_file(&d.join(boxes), &classes).unwrap();
    let records: Vec<DetectionRecord> =
        serde_json::from_str(&std::fs::read_to_string(d.join("inf/synth_s3_00000_detections.json")).unwrap()).unwrap();
    for g in &gts {
        let hit = records
            .iter()
            .filter_map(|r| r.detection(&classes))
            .any(|det| det.class_id == g.class_id && det.score >= 0.3 && det.bbox.iou(&g.bbox) >= 0.5);
        assert!(hit, "no detection for {g:?} in {stdout}");
    }
    assert!(stdout.contains(&format!("matched {0}/{0}", gts.len())), "{stdout}");
}
