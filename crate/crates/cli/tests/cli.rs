use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sgctx_core::dataset::load_split;
use sgctx_core::image::RgbImage;
use sgctx_core::metrics::{write_ratings, Answer};
use sgctx_core::study::StudyManifest;

fn sgctx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgctx")).args(args).env("SGCTX_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sgctx(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_TRAIN: &str = r#"{
  "batch_size": 4, "log_every": 10, "checkpoint_every": 25, "probe_size": 4,
  "model": {"embed_dim": 8, "gcn_layers": 2, "box_hidden": 16, "mask_channels": 4, "image_size": 16,
            "gen_channels": [8, 8, 8], "dimg_channels": [8, 8, 8], "dobj_channels": [8, 8]}
}"#;

#[test]
fn usage_errors_exit_2() {
    let out = sgctx(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(sgctx(&["eval", "layout", "--dataset", "x", "--boxes", "maybe"]).status.code(), Some(2));
    assert_eq!(sgctx(&["dataset", "gen"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = sgctx(&["eval", "layout", "--dataset", p(&dir.path().join("none")), "--boxes", "gt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("none"));
    ok(&["dataset", "gen", "--seed", "1", "--scenes", "3", "--out", p(dir.path())]);
    assert_eq!(sgctx(&["eval", "layout", "--dataset", p(dir.path()), "--boxes", "pred"]).status.code(), Some(1));
}

#[test]
fn ground_truth_layouts_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    ok(&["dataset", "gen", "--seed", "7", "--scenes", "10", "--out", p(&d)]);
    let m: Value = serde_json::from_str(&ok(&["eval", "layout", "--dataset", p(&d), "--boxes", "gt"])).unwrap();
    assert_eq!(m["relation_score"], 1.0);
    assert_eq!(m["avg_iou"], 1.0);
    assert_eq!(m["graphs"], 10);
    let again = dir.path().join("again");
    ok(&["dataset", "gen", "--seed", "7", "--scenes", "10", "--out", p(&again)]);
    assert_eq!(fs::read(d.join("split.json")).unwrap(), fs::read(again.join("split.json")).unwrap());
}

#[test]
fn ingest_builds_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let ann = r#"{"images":[
      {"id":1,"width":100,"height":100,"objects":[
        {"category":"cat","bbox":[0,0,40,40]},{"category":"dog","bbox":[50,50,40,40]},{"category":"cat","bbox":[60,0,30,30]}]},
      {"id":2,"width":100,"height":100,"objects":[{"category":"dog","bbox":[0,0,50,50]}]}]}"#;
    let a = dir.path().join("ann.json");
    fs::write(&a, ann).unwrap();
    let out = dir.path().join("coco");
    let report: Value = serde_json::from_str(&ok(&["dataset", "ingest", "--annotations", p(&a), "--out", p(&out)])).unwrap();
    assert_eq!(report["kept"], 1);
    assert_eq!(report["too_few"], 1);
    let split = load_split(&out).unwrap();
    assert_eq!(split.len(), 1);
    assert_eq!(split.examples[0].graph.real_objects().count(), 3);
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    ok(&["dataset", "gen", "--seed", "3", "--scenes", "24", "--image-size", "16", "--out", p(&d)]);
    let cfg = dir.path().join("train.json");
    fs::write(&cfg, SMALL_TRAIN).unwrap();
    let run = dir.path().join("run");
    let summary: Value = serde_json::from_str(&ok(&["train", "--dataset", p(&d), "--config", p(&cfg), "--steps", "50", "--seed", "1", "--out", p(&run)])).unwrap();
    assert_eq!(summary["steps"], 50);
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.lines().nth(5).unwrap().split(',').all(|f| !f.is_empty()));
    let ckpt = run.join("final.ckpt");
    assert!(run.join("checkpoints/step_000025.ckpt").is_file());

    let m: Value = serde_json::from_str(&ok(&["eval", "layout", "--dataset", p(&d), "--boxes", "pred", "--ckpt", p(&ckpt)])).unwrap();
    for k in ["graphs", "spatial_triples", "satisfied", "relation_score", "random_baseline", "avg_iou"] {
        assert!(!m[k].is_null(), "{k} missing in {m}");
    }

    // Resuming from the midpoint reaches the same final weights.
    let resumed = dir.path().join("resumed");
    ok(&["train", "--resume", p(&run.join("checkpoints/step_000025.ckpt")), "--out", p(&resumed)]);
    assert_eq!(fs::read(resumed.join("final.ckpt")).unwrap(), fs::read(&ckpt).unwrap());

    let g = dir.path().join("g.json");
    fs::write(&g, r#"{"objects":["red circle","blue square"],"triples":[[0,"left of",1]],"boxes":[[0.1,0.1,0.4,0.4],[0.5,0.5,0.9,0.9]]}"#).unwrap();
    for boxes in ["gt", "pred"] {
        let img = dir.path().join(format!("{boxes}.ppm"));
        ok(&["generate", "--graph", p(&g), "--ckpt", p(&ckpt), "--boxes", boxes, "--out", p(&img)]);
        let im = RgbImage::read_ppm(&fs::read(&img).unwrap()[..]).unwrap();
        assert_eq!((im.width, im.height), (16, 16));
    }
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"objects":["purple hexagon"],"triples":[]}"#).unwrap();
    let out = sgctx(&["generate", "--graph", p(&bad), "--ckpt", p(&ckpt), "--out", p(&dir.path().join("x.ppm"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("purple hexagon"));

    // Study export and offline aggregation.
    let study = dir.path().join("study");
    let a = format!("ours={}", p(&ckpt));
    let b = format!("base={}", p(&run.join("checkpoints/step_000025.ckpt")));
    ok(&["eval", "study", "export", "--dataset", p(&d), "--model", &a, "--model", &b, "--design", "avb", "--trials", "20", "--seed", "5", "--out", p(&study)]);
    let manifest = StudyManifest::from_json(&fs::read_to_string(study.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.trials.len(), 20);
    assert_eq!(manifest.control_count(), 2);
    manifest.validate(Some(&study.join("media"))).unwrap();

    let records: Vec<_> = manifest
        .trials
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let answer = t.control_truth.unwrap_or(if i % 3 == 0 { Answer::B } else { Answer::A });
            manifest.record(i, "w1", answer)
        })
        .collect();
    let ratings = dir.path().join("ratings.csv");
    write_ratings(fs::File::create(&ratings).unwrap(), &records).unwrap();
    let res = dir.path().join("results.json");
    ok(&["eval", "study", "aggregate", "--ratings", p(&ratings), "--manifest", p(&study.join("manifest.json")), "--out", p(&res)]);
    let v: Value = serde_json::from_str(&fs::read_to_string(&res).unwrap()).unwrap();
    assert_eq!(v["design"], "AvB");
    assert_eq!(v["ratings"], 18);
    let total: f64 = v["scores"].as_object().unwrap().values().map(|s| s.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn export_control_rate_is_respected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    ok(&["dataset", "gen", "--seed", "2", "--scenes", "100", "--image-size", "16", "--out", p(&d)]);
    let cfg = dir.path().join("train.json");
    fs::write(&cfg, SMALL_TRAIN).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--dataset", p(&d), "--config", p(&cfg), "--steps", "1", "--out", p(&run)]);
    let model = format!("ours={}", p(&run.join("final.ckpt")));
    for (trials, rate) in [(100usize, 0.1f64), (37, 0.1), (40, 0.25), (10, 0.0)] {
        let out = dir.path().join(format!("s{trials}-{rate}"));
        let r = rate.to_string();
        let t = trials.to_string();
        ok(&["eval", "study", "export", "--dataset", p(&d), "--model", &model, "--design", "mors", "--trials", &t, "--control-rate", &r, "--out", p(&out)]);
        let m = StudyManifest::from_json(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.trials.len(), trials);
        let want = rate * trials as f64;
        assert!((m.control_count() as f64 - want).abs() <= 1.0, "{trials} at {rate}: {}", m.control_count());
        assert!(m.trials.iter().filter(|t| t.is_control).all(|t| t.control_truth.is_some()));
    }
    let bad = sgctx(&["eval", "study", "export", "--dataset", p(&d), "--model", &model, "--design", "avb", "--out", p(&dir.path().join("x"))]);
    assert_eq!(bad.status.code(), Some(1));
}
