use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvocc::geometry::GroundGrid;
use mvocc::metrics::{match_frame, EvalReport, MatchConfig};
use mvocc::multiview::{read_annotations, read_detections, read_json_lines, read_occupancy_csv, write_detections};
use mvocc::nms::score_weighted_nms;
use tempfile::TempDir;

fn mvocc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvocc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mvocc(args);
    assert!(
        out.status.success(),
        "mvocc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{"rows": 6, "cols": 6, "n_frames": 8, "image_width": 96, "image_height": 96,
  "min_persons": 2, "max_persons": 2, "min_separation": 2, "seed": 4}"#;

fn small_dataset(dir: &Path) -> PathBuf {
    let scen = dir.join("scenario.json");
    fs::write(&scen, SMALL).unwrap();
    let data = dir.join("data");
    ok(&["synth", "--scenario", s(&scen), "--out", s(&data)]);
    data
}

#[test]
fn synth_writes_the_documented_layout() {
    let dir = TempDir::new().unwrap();
    let data = small_dataset(dir.path());
    for c in 0..3 {
        let n = fs::read_dir(data.join(format!("cam{c}"))).unwrap().count();
        assert_eq!(n, 8);
    }
    assert!(data.join("cam2/frame00007.png").is_file());
    let anns = read_annotations(&data.join("annotations.jsonl")).unwrap();
    // Two persons per frame, minus the frames where one has just left.
    assert!((8..=16).contains(&anns.len()), "{}", anns.len());
    assert!(anns.iter().all(|a| a.frame < 8 && a.cell < 36));
    let calib: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("calibrations.json")).unwrap()).unwrap();
    assert_eq!(calib.as_array().unwrap().len(), 3);
    assert_eq!(calib[0]["P"].as_array().unwrap().len(), 3);
    let grid = GroundGrid::load(&data.join("grid.json")).unwrap();
    assert_eq!(grid.len(), 36);
}

#[test]
fn empty_scenario_gives_an_empty_dataset() {
    let dir = TempDir::new().unwrap();
    let scen = dir.path().join("empty.json");
    fs::write(&scen, r#"{"min_persons": 0, "max_persons": 0, "n_frames": 2, "rows": 4, "cols": 4}"#).unwrap();
    let out = ok(&["synth", "--scenario", s(&scen), "--out", s(&dir.path().join("d"))]);
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["annotations"], 0);
    assert_eq!(summary["images"], 6);
    assert_eq!(fs::read_to_string(dir.path().join("d/annotations.jsonl")).unwrap(), "");
}

#[test]
fn exit_codes_separate_validation_from_runtime_errors() {
    let dir = TempDir::new().unwrap();
    let code = |args: &[&str]| mvocc(args).status.code().unwrap();
    assert_eq!(code(&["detect", "--data", "/nonexistent", "--model", "m", "--out", "o"]), 2);
    assert_eq!(code(&["--set", "detect.nms_threshold=7", "nms", "--input", "a", "--out", "b"]), 2);
    assert_eq!(code(&["--profile", "no-such-profile", "synth", "--out", "x"]), 2);
    assert_eq!(code(&["bogus-subcommand"]), 2);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nepochs = \"many\"\n").unwrap();
    assert_eq!(code(&["--config", s(&bad), "synth", "--out", "x"]), 2);

    // The output location is a regular file, so writing fails at run time.
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    assert_eq!(code(&["synth", "--frames", "1", "--out", s(&blocker.join("sub"))]), 1);
}

#[test]
fn training_logs_resume_and_detection_outputs() {
    let dir = TempDir::new().unwrap();
    let data = small_dataset(dir.path());
    let d = |n: &str| dir.path().join(n);

    ok(&["--profile", "quick", "train-mono", "--data", s(&data), "--out", s(&d("m1")), "--log", s(&d("mono.jsonl"))]);
    let rows = read_json_lines(&d("mono.jsonl")).unwrap();
    assert_eq!(rows.len(), 2);
    ok(&[
        "--profile", "quick", "train-mono", "--data", s(&data), "--out", s(&d("m2")), "--log", s(&d("mono.jsonl")),
        "--resume", s(&d("m1")), "--epochs", "3",
    ]);
    let rows = read_json_lines(&d("mono.jsonl")).unwrap();
    let epochs: Vec<u64> = rows.iter().map(|r| r["epoch"].as_u64().unwrap()).collect();
    assert_eq!(epochs, vec![0, 1, 2, 3, 4]);
    for r in &rows {
        assert!(r["train_loss"].is_f64() && r["val_loss"].is_f64());
    }

    ok(&[
        "--profile", "quick", "train-mv", "--data", s(&data), "--mono", s(&d("m2")), "--out", s(&d("mv")),
        "--log", s(&d("mv.jsonl")), "--hard-negatives", "shift",
    ]);
    assert_eq!(read_json_lines(&d("mv.jsonl")).unwrap().len(), 2);

    // Nothing reaches a threshold above 1, yet every cell is scored.
    ok(&["detect", "--data", s(&data), "--model", s(&d("mv")), "--out", s(&d("none")), "--score-threshold", "1.01"]);
    assert_eq!(fs::read_to_string(d("none/detections.jsonl")).unwrap(), "");
    let maps = read_occupancy_csv(&d("none/occupancy.csv")).unwrap();
    assert_eq!(maps.len(), 8);
    assert!(maps.iter().all(|m| m.q.len() == 36 && m.q.iter().all(|q| (0.0..=1.0).contains(q))));

    ok(&["detect", "--data", s(&data), "--model", s(&d("mv")), "--out", s(&d("det")), "--score-threshold", "0.0", "--frames", "2:6"]);
    let cands = read_detections(&d("det/candidates.jsonl")).unwrap();
    let dets = read_detections(&d("det/detections.jsonl")).unwrap();
    assert!(cands.len() >= dets.len());
    assert!(dets.iter().all(|r| (2..6).contains(&r.frame) && r.rects.len() == 3));
    for line in fs::read_to_string(d("det/detections.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["cell", "frame", "rects", "score"]);
    }
    // Emitted files survive load-then-save unchanged.
    let again = d("again.jsonl");
    write_detections(&again, &dets).unwrap();
    assert_eq!(fs::read(&again).unwrap(), fs::read(d("det/detections.jsonl")).unwrap());
}

#[test]
fn eval_of_ground_truth_is_perfect_and_matches_the_library() {
    let dir = TempDir::new().unwrap();
    let data = small_dataset(dir.path());
    let anns = read_annotations(&data.join("annotations.jsonl")).unwrap();
    let grid = GroundGrid::load(&data.join("grid.json")).unwrap();

    let perfect: Vec<_> = anns
        .iter()
        .map(|a| mvocc::multiview::DetectionRecord { frame: a.frame, cell: a.cell, score: 0.9, rects: vec![None; 3] })
        .collect();
    let p = dir.path().join("perfect.jsonl");
    write_detections(&p, &perfect).unwrap();
    let out = dir.path().join("ev");
    let stdout = ok(&[
        "eval", "--data", s(&data), "--detections", s(&p), "--candidates", s(&p), "--out", s(&out), "--sweep", "0.2,0.4,0.6",
    ]);
    let summary: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["moda"], 1.0);
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!((report.moda, report.modp, report.precision, report.recall), (1.0, Some(1.0), Some(1.0), Some(1.0)));
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 3);

    // A shifted, partly wrong detection set: compare with direct metric calls.
    let shifted: Vec<_> = perfect
        .iter()
        .enumerate()
        .map(|(i, r)| mvocc::multiview::DetectionRecord { cell: (r.cell + i % 2) % 36, score: 0.5 + (i % 5) as f64 / 10.0, ..r.clone() })
        .collect();
    let p = dir.path().join("shifted.jsonl");
    write_detections(&p, &shifted).unwrap();
    ok(&["eval", "--data", s(&data), "--detections", s(&p), "--out", s(&out)]);
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let frames: Vec<_> = (0..8u64)
        .map(|f| {
            let d: Vec<(usize, f64)> = shifted.iter().filter(|r| r.frame == f).map(|r| (r.cell, r.score)).collect();
            let mut g: Vec<usize> = anns.iter().filter(|a| a.frame == f).map(|a| a.cell).collect();
            g.sort_unstable();
            match_frame(f, &d, &g, &grid, 0.5).unwrap()
        })
        .collect();
    let direct = EvalReport::from_frames(frames, MatchConfig::default()).unwrap();
    assert_eq!(report, direct);
    // Report survives load-then-save unchanged.
    let text = fs::read_to_string(out.join("report.json")).unwrap();
    assert_eq!(serde_json::to_string_pretty(&report).unwrap(), text);
    assert!(fs::read_to_string(out.join("roc.csv")).unwrap().starts_with("threshold,tpr,fpr\n"));
}

#[test]
fn nms_subcommand_equals_the_library() {
    let dir = TempDir::new().unwrap();
    let recs: Vec<_> = (0..12)
        .map(|i| mvocc::multiview::DetectionRecord {
            frame: (i / 6) as u64,
            cell: i,
            score: 0.3 + (i * 7 % 10) as f64 / 20.0,
            rects: vec![Some([i as f64 * 4.0, 0.0, i as f64 * 4.0 + 10.0, 20.0]), None],
        })
        .collect();
    let input = dir.path().join("c.jsonl");
    write_detections(&input, &recs).unwrap();
    let out = dir.path().join("k.jsonl");
    ok(&["nms", "--input", s(&input), "--out", s(&out), "--nms-threshold", "0.3"]);
    let got = read_detections(&out).unwrap();
    let mut want = Vec::new();
    for f in 0..2u64 {
        let c: Vec<_> = recs.iter().filter(|r| r.frame == f).map(|r| r.to_candidate()).collect();
        want.extend(score_weighted_nms(&c, 0.3).iter().map(|k| mvocc::multiview::DetectionRecord::from_candidate(f, k)));
    }
    assert_eq!(got, want);
    assert!(got.len() < recs.len());
    let code = mvocc(&["nms", "--input", s(&input), "--out", s(&out), "--min-cell-distance", "2"]).status.code();
    assert_eq!(code, Some(2), "grid required for the distance filter");
}

#[test]
fn inspect_forest_prints_a_view_table() {
    use mvocc::forest::{train_forest, ForestOptions};
    let dir = TempDir::new().unwrap();
    let xs: Vec<Vec<f64>> = (0..60).map(|i| (0..6).map(|j| ((i * (j + 3)) % 11) as f64).collect()).collect();
    let ys: Vec<u8> = (0..60).map(|i| ((i * 3) % 11 > 5) as u8).collect();
    let f = train_forest(&xs, &ys, &ForestOptions { n_trees: 4, ..Default::default() }, 2).unwrap();
    let p = dir.path().join("f.json");
    f.save(&p).unwrap();
    let table = ok(&["inspect-forest", "--forest", s(&p), "--q", "2", "--views", "3", "--top-k", "1,5"]);
    assert_eq!(table, f.view_distribution_csv(&[1, 5], 2, 3));
    assert!(table.starts_with("top_k,view_0,view_1,view_2\n1,"));
    assert_eq!(mvocc(&["inspect-forest", "--forest", s(&p), "--q", "4", "--views", "3"]).status.code(), Some(2));
}
