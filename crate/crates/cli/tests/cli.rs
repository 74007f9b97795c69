use std::path::Path;
use std::process::{Command, Output};

use attnlabel::manifest::load_manifest;
use attnlabel::raster::{write_raster, Raster};

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_attnlabel")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "attnlabel {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn geom_prints_box_side() {
    let v = json(&run(&["geom", "--radius", "12", "--alpha", "0.5"]));
    assert!((v["box_side"].as_f64().unwrap() - 42.36).abs() < 0.01);
    assert!((v["quadrant_area"].as_f64().unwrap() - 36.0 * std::f64::consts::PI).abs() < 0.1);
    assert!(v["disagreement_fraction"].as_f64().unwrap() > 0.0);
}

#[test]
fn generate_fit_detect_refine_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let src = d.join("src");
    run(&["scenegen", "--style", "source", "--n", "16", "--seed", "3", "--out", s(&src)]);
    let gt = src.join("manifest.jsonl");
    assert_eq!(load_manifest(&gt).unwrap().len(), 16);

    let model = d.join("model.json");
    run(&["fit", "--manifest", s(&gt), "--on", "image", "--threshold-min", "0.4", "--threshold-max", "0.6", "--out", s(&model)]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    let t = m["bin_threshold"].as_f64().unwrap();
    assert!((0.4..=0.6).contains(&t));

    let pred = d.join("pred.jsonl");
    run(&["detect", "--model", s(&model), "--manifest", s(&gt), "--on", "image", "--out", s(&pred)]);
    let p = load_manifest(&pred).unwrap();
    assert_eq!(p.len(), 16);
    assert!(p.entries.iter().flat_map(|e| &e.annotations).all(|a| a.confidence.is_some()));

    let refined = d.join("refined.jsonl");
    run(&["refine", "--manifest", s(&pred), "--images", s(&src), "--out", s(&refined)]);
    assert!(load_manifest(&refined).unwrap().annotation_count() <= p.annotation_count());

    let svg = d.join("pr.svg");
    let v = json(&run(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--svg", s(&svg)]));
    let ap = v["ap50"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ap));
    assert!(std::fs::read_to_string(&svg).unwrap().contains("AP50"));
    let v = json(&run(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--mode", "iou"]));
    assert_eq!(v["mode"]["kind"], "box-iou");
}

#[test]
fn map_detection_and_attention_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&["scenegen", "--style", "target", "--n", "6", "--seed", "1", "--out", s(d)]);
    let model = d.join("m.json");
    std::fs::write(
        &model,
        r#"{"channel_reduce":"stack-mean","bin_threshold":0.5,"min_area":4,"max_area":2000,"merge_radius":8,"fitted_f1":0}"#,
    )
    .unwrap();
    let out = run(&["detect", "--model", s(&model), "--manifest", s(&d.join("manifest.jsonl")), "--on", "map"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 6);

    let map = d.join("target/000000.map.amap");
    let v = json(&run(&["attn", "reg", s(&map)]));
    let reg = v["value"].as_f64().unwrap();
    assert!((0.0..=2.0).contains(&reg));
    let v = json(&run(&["attn", "tv", s(&map), s(&map), "--channel", "1"]));
    assert_eq!(v["value"].as_f64().unwrap(), 0.0);

    let png = d.join("p.png");
    run(&["preview", s(&map), s(&png)]);
    assert_eq!(&std::fs::read(&png).unwrap()[1..4], b"PNG");
}

#[test]
fn sample_windows_from_tile() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tile = d.join("t1.amap");
    write_raster(&Raster::from_fn(300, 300, 1, |_, y, x| ((x + y) % 7) as f32), &tile).unwrap();
    let labels = d.join("labels.json");
    std::fs::write(&labels, r#"[{"cx": 150.0, "cy": 150.0}]"#).unwrap();
    let out = d.join("win");
    run(&["sample", "--tile", s(&tile), "--labels", s(&labels), "--n", "20", "--window", "112", "--seed", "4", "--out", s(&out)]);
    let m = load_manifest(out.join("manifest.jsonl")).unwrap();
    assert_eq!(m.len(), 20);
    assert!(out.join(&m.entries[0].image_path).is_file());
}

#[test]
fn pipeline_run_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 4}"#).unwrap();
    let out = dir.path().join("run");
    let v = json(&run(&["pipeline", "run", "--config", s(&cfg), "--scale", "30", "--out", s(&out)]));
    assert_eq!(v["seed"], 4);
    assert!(v["final_detector"]["target"]["ap50"].is_number());
    assert!(out.join("summary.json").is_file());
    assert!(out.join("manifests/y_gt.jsonl").is_file());
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_attnlabel"))
        .args(["geom", "--radius", "-1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_attnlabel"))
        .args(["eval", "--pred", "/nonexistent.jsonl", "--gt", "/nonexistent.jsonl"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
