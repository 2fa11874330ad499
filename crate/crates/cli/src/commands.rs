//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mvocc::augment::MaskTable;
use mvocc::forest::{train_forest, Forest};
use mvocc::geometry::{load_calibrations, CameraCalibration, CropSpec, Cylinder, GroundGrid};
use mvocc::metrics::{match_frame, roc_auc, EvalReport, FrameEval, MatchConfig};
use mvocc::multiview::{
    build_dataset, build_multiview, features_in_chunks, generate_hard_negatives, read_annotations, read_detections,
    read_occupancy_csv, train_head, train_monocular, write_detections, write_occupancy_csv, Annotation, Dataset,
    DatasetOptions, DetectionRecord, DetectionRig, EpochLog, HardNegativeMode, MultiViewModel, MultiViewSample,
    TrainReport,
};
use mvocc::nms::{min_cell_distance_filter, score_weighted_nms, DetectionCandidate};
use mvocc::nnet::{mono_classifier_layers, Network};
use mvocc::synthscene::{write_dataset, FrameStore, ScenarioFile, ScenarioParams, ScenarioSpec};
use nalgebra::Point3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{Classifier, HardNegatives, RunConfig};
use crate::{
    CliError, DetectArgs, EvalArgs, HardNegArg, InspectForestArgs, NmsArgs, SynthArgs, TrainMonoArgs, TrainMvArgs,
};

pub struct Context {
    pub cfg: RunConfig,
    pub seed: u64,
    /// `--seed` when given explicitly.
    pub seed_flag: Option<u64>,
}

type Out<'a> = &'a mut (dyn Write + Send);

fn invalid(path: &Path) -> impl Fn(mvocc::Error) -> CliError + '_ {
    move |e| CliError::Validation(format!("{}: {e}", path.display()))
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("missing input: {}", path.display())))
    }
}

fn print_json(out: Out, v: &serde_json::Value) -> Result<(), CliError> {
    writeln!(out, "{}", serde_json::to_string(v)?)?;
    Ok(())
}

fn with_data(ctx: &Context, data: &Option<PathBuf>) -> RunConfig {
    let mut cfg = ctx.cfg.clone();
    if let Some(d) = data {
        cfg.paths.data = Some(d.clone());
    }
    cfg
}

struct Scene {
    calibs: Vec<CameraCalibration>,
    grid: GroundGrid,
    images: PathBuf,
    n_frames: usize,
}

fn load_scene(cfg: &RunConfig) -> Result<Scene, CliError> {
    let calib_path = cfg.calibration_path()?;
    let grid_path = cfg.grid_path()?;
    let images = cfg.images_dir()?;
    for p in [&calib_path, &grid_path, &images] {
        require(p)?;
    }
    let calibs = load_calibrations(&calib_path).map_err(invalid(&calib_path))?;
    let grid = GroundGrid::load(&grid_path).map_err(invalid(&grid_path))?;
    let n_frames = FrameStore::count_frames(&images);
    Ok(Scene {
        calibs,
        grid,
        images,
        n_frames,
    })
}

fn load_annotations(path: &Path) -> Result<Vec<Annotation>, CliError> {
    require(path)?;
    read_annotations(path).map_err(invalid(path))
}

/// Samples from the first `train.frames` frames (all when 0).
fn training_data(cfg: &RunConfig, scene: &Scene, seed: u64) -> Result<(Dataset, FrameStore), CliError> {
    let n = match cfg.train.frames {
        0 => scene.n_frames,
        k => k.min(scene.n_frames),
    };
    if n == 0 {
        return Err(CliError::Validation(format!("no frames found under {}", scene.images.display())));
    }
    let anns: Vec<Annotation> = load_annotations(&cfg.annotations_path()?)?
        .into_iter()
        .filter(|a| (a.frame as usize) < n)
        .collect();
    let store = FrameStore::load(&scene.images, n, scene.calibs.len())?;
    let opts = DatasetOptions {
        negatives_per_frame: cfg.train.negatives_per_frame,
        crop: CropSpec::default(),
        near_negative_fraction: cfg.train.near_negative_fraction,
        seed,
    };
    let ds = build_dataset(&scene.grid, &scene.calibs, &anns, &store, &opts)?;
    Ok((ds, store))
}

/// Log rows for `report`, epochs shifted by `offset`.
fn write_log(path: &Path, stage: &str, report: &TrainReport, offset: usize, append: bool) -> Result<(), CliError> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    let mut w = BufWriter::new(file);
    for EpochLog {
        epoch,
        train_loss,
        val_loss,
        val_accuracy,
    } in &report.log
    {
        let row = json!({
            "stage": stage,
            "epoch": epoch + offset,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_accuracy": if val_accuracy.is_finite() { json!(val_accuracy) } else { json!(null) },
        });
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn epochs_done(meta: &serde_json::Value) -> usize {
    meta.get("epochs_done").and_then(|v| v.as_u64()).unwrap_or(0) as usize
}

pub fn synth(ctx: &Context, a: &SynthArgs, out: Out) -> Result<(), CliError> {
    let spec = match &a.scenario {
        Some(path) => {
            require(path)?;
            let text = fs::read_to_string(path)?;
            let file: ScenarioFile = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            match file {
                ScenarioFile::Spec(s) => {
                    if a.frames.is_some() {
                        return Err(CliError::Validation(
                            "--frames only applies to generated scenes, not to a full scenario".into(),
                        ));
                    }
                    s.validate().map_err(invalid(path))?;
                    *s
                }
                ScenarioFile::Params(mut p) => {
                    if let Some(n) = a.frames {
                        p.n_frames = n;
                    }
                    if let Some(s) = ctx.seed_flag {
                        p.seed = s;
                    }
                    ScenarioSpec::generate(&p).map_err(invalid(path))?
                }
            }
        }
        None => {
            let mut p = ScenarioParams {
                seed: ctx.seed,
                ..ScenarioParams::default()
            };
            if let Some(n) = a.frames {
                p.n_frames = n;
            }
            ScenarioSpec::generate(&p).map_err(|e| CliError::Validation(e.to_string()))?
        }
    };
    let summary = write_dataset(&spec, &a.out)?;
    print_json(out, &serde_json::to_value(summary)?)
}

pub fn train_mono(ctx: &Context, a: &TrainMonoArgs, out: Out) -> Result<(), CliError> {
    let mut cfg = with_data(ctx, &a.data.data);
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if a.no_input_dropout {
        cfg.train.input_dropout = false;
    }
    if let Some(m) = &a.mask_table {
        cfg.paths.mask_table = Some(m.clone());
    }
    let scene = load_scene(&cfg)?;
    let (net, done) = match &a.resume {
        Some(p) => {
            require(p)?;
            let (net, meta) = Network::load(p).map_err(invalid(p))?;
            (net, epochs_done(&meta))
        }
        None => (Network::new(&mono_classifier_layers(), ctx.seed)?, 0),
    };
    let (ds, _) = training_data(&cfg, &scene, ctx.seed)?;
    let mut opts = cfg.train_options(ctx.seed.wrapping_add(done as u64));
    if let Some(p) = &cfg.paths.mask_table {
        require(p)?;
        opts.masks = MaskTable::load(p).map_err(invalid(p))?;
    }
    let (net, report) = train_monocular(&net, &ds.mono, &CropSpec::default(), &opts)?;
    let total = done + report.log.len();
    let meta = json!({
        "stage": "mono",
        "epochs_done": total,
        "best_epoch": report.best_epoch.map(|e| e + done),
        "seed": ctx.seed,
    });
    net.save(&a.out, meta)?;
    if let Some(log) = &a.log {
        write_log(log, "mono", &report, done, a.resume.is_some())?;
    }
    print_json(
        out,
        &json!({
            "samples": ds.mono.len(),
            "positives": ds.mono.iter().filter(|s| s.label == 1).count(),
            "epochs_done": total,
            "best_epoch": report.best_epoch.map(|e| e + done),
        }),
    )
}

fn hard_negatives(
    mode: HardNegatives,
    samples: &[MultiViewSample],
    store: &FrameStore,
    seed: u64,
) -> Result<Vec<MultiViewSample>, CliError> {
    let positives: Vec<MultiViewSample> = samples.iter().filter(|s| s.label == 1).cloned().collect();
    let modes: &[HardNegativeMode] = match mode {
        HardNegatives::None => &[],
        HardNegatives::Shift => &[HardNegativeMode::Shift],
        HardNegatives::Mix => &[HardNegativeMode::Mix],
        HardNegatives::Both => &[HardNegativeMode::Shift, HardNegativeMode::Mix],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4A7D_0E5B);
    let mut out = Vec::new();
    for &m in modes {
        out.extend(generate_hard_negatives(&positives, m, store, &CropSpec::default(), &mut rng)?);
    }
    Ok(out)
}

pub fn train_mv(ctx: &Context, a: &TrainMvArgs, out: Out) -> Result<(), CliError> {
    let mut cfg = with_data(ctx, &a.data.data);
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(d) = a.depth {
        cfg.model.depth = d;
    }
    if let Some(h) = a.hard_negatives {
        cfg.train.hard_negatives = match h {
            HardNegArg::None => HardNegatives::None,
            HardNegArg::Shift => HardNegatives::Shift,
            HardNegArg::Mix => HardNegatives::Mix,
            HardNegArg::Both => HardNegatives::Both,
        };
    }
    if let Some(c) = a.classifier {
        cfg.model.classifier = match c {
            crate::ClassifierArg::Mlp => Classifier::Mlp,
            crate::ClassifierArg::Forest => Classifier::Forest,
        };
    }
    if a.unfreeze {
        cfg.train.freeze_embeddings = false;
    }
    cfg.validate()?;
    let scene = load_scene(&cfg)?;
    let camera_ids: Vec<u32> = scene.calibs.iter().map(|c| c.camera_id()).collect();
    let (mut model, done) = match (&a.resume, &a.mono) {
        (Some(p), _) => {
            require(p)?;
            let (m, meta) = MultiViewModel::load(p).map_err(invalid(p))?;
            (m, epochs_done(&meta))
        }
        (None, Some(p)) => {
            require(p)?;
            let (mono, _) = Network::load(p).map_err(invalid(p))?;
            let m = build_multiview(&mono, cfg.model.depth, &camera_ids, &cfg.head_spec(), CropSpec::default(), ctx.seed)
                .map_err(invalid(p))?;
            (m, 0)
        }
        (None, None) => return Err(CliError::Validation("train-mv needs --mono or --resume".into())),
    };
    if model.camera_ids != camera_ids {
        return Err(CliError::Validation(format!(
            "model cameras {:?} do not match calibration cameras {camera_ids:?}",
            model.camera_ids
        )));
    }
    model.freeze_embeddings = cfg.train.freeze_embeddings;
    let (ds, store) = training_data(&cfg, &scene, ctx.seed)?;
    let mut samples = ds.multiview;
    let hard = hard_negatives(cfg.train.hard_negatives, &samples, &store, ctx.seed)?;
    let n_hard = hard.len();
    samples.extend(hard);
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();

    let summary;
    match cfg.model.classifier {
        Classifier::Mlp => {
            let opts = cfg.train_options(ctx.seed.wrapping_add(done as u64));
            let (trained, report) = train_head(&model, &samples, &opts)?;
            model = trained;
            let total = done + report.log.len();
            if let Some(log) = &a.log {
                write_log(log, "multiview", &report, done, a.resume.is_some())?;
            }
            summary = json!({
                "classifier": "mlp",
                "samples": samples.len(),
                "hard_negatives": n_hard,
                "epochs_done": total,
                "best_epoch": report.best_epoch.map(|e| e + done),
            });
            model.forest = None;
            model.save(
                &a.out,
                json!({"stage": "multiview", "epochs_done": total, "seed": ctx.seed}),
            )?;
        }
        Classifier::Forest => {
            if !model.freeze_embeddings {
                return Err(CliError::Validation("the forest classifier needs frozen embeddings".into()));
            }
            model.forest = None;
            let refs: Vec<&MultiViewSample> = samples.iter().collect();
            let feats = features_in_chunks(&model, &refs)?;
            let rows: Vec<Vec<f64>> = (0..feats.batch()).map(|i| feats.row(i).to_vec()).collect();
            let forest = train_forest(&rows, &labels, &cfg.forest_options(), ctx.seed)?;
            let train_acc = {
                let p = forest.predict_batch(&rows)?;
                p.iter().zip(&labels).filter(|(p, &l)| (**p >= 0.5) == (l == 1)).count() as f64 / labels.len() as f64
            };
            if let Some(log) = &a.log {
                let mut w = BufWriter::new(fs::File::create(log)?);
                let row = json!({"stage": "forest", "trees": forest.n_trees, "train_accuracy": train_acc});
                writeln!(w, "{}", serde_json::to_string(&row)?)?;
                w.flush()?;
            }
            if let Some(p) = &a.forest_out {
                forest.save(p)?;
            }
            summary = json!({
                "classifier": "forest",
                "samples": samples.len(),
                "hard_negatives": n_hard,
                "trees": forest.n_trees,
                "train_accuracy": train_acc,
            });
            model.forest = Some(forest);
            model.save(&a.out, json!({"stage": "forest", "epochs_done": done, "seed": ctx.seed}))?;
        }
    }
    print_json(out, &summary)
}

fn frame_range(arg: Option<(usize, usize)>, cfg: &[usize], n_frames: usize) -> (usize, usize) {
    match (arg, cfg) {
        (Some(r), _) => r,
        (None, [a, b]) => (*a, *b),
        _ => (0, n_frames),
    }
}

pub fn detect(ctx: &Context, a: &DetectArgs, out: Out) -> Result<(), CliError> {
    let mut cfg = with_data(ctx, &a.data.data);
    if let Some(t) = a.score_threshold {
        cfg.detect.score_threshold = t;
    }
    if let Some(t) = a.nms_threshold {
        cfg.detect.nms_threshold = t;
    }
    if let Some(k) = a.min_cell_distance {
        cfg.detect.min_cell_distance = k;
    }
    cfg.validate()?;
    let scene = load_scene(&cfg)?;
    require(&a.model)?;
    let (model, _) = MultiViewModel::load(&a.model).map_err(invalid(&a.model))?;
    let camera_ids: Vec<u32> = scene.calibs.iter().map(|c| c.camera_id()).collect();
    if model.camera_ids != camera_ids {
        return Err(CliError::Validation(format!(
            "model cameras {:?} do not match calibration cameras {camera_ids:?}",
            model.camera_ids
        )));
    }
    let (start, end) = frame_range(a.frames, &cfg.detect.frames, scene.n_frames);
    if end > scene.n_frames {
        return Err(CliError::Validation(format!(
            "frames {start}:{end} requested but only {} are present",
            scene.n_frames
        )));
    }
    let rig = DetectionRig::new(scene.grid, scene.calibs.clone(), Cylinder::person_at(Point3::origin()));
    let mut candidates = Vec::new();
    let mut detections = Vec::new();
    let mut maps = Vec::new();
    for t in start..end {
        let images = FrameStore::load_frame(&scene.images, t, scene.calibs.len())?;
        let (cands, map) = rig.detect(&model, t as u64, &images, cfg.detect.score_threshold)?;
        let kept = suppress(&cands, cfg.detect.nms_threshold, cfg.detect.min_cell_distance, &rig.grid);
        candidates.extend(cands.iter().map(|c| DetectionRecord::from_candidate(t as u64, c)));
        detections.extend(kept.iter().map(|c| DetectionRecord::from_candidate(t as u64, c)));
        maps.push(map);
    }
    fs::create_dir_all(&a.out)?;
    write_detections(&a.out.join("candidates.jsonl"), &candidates)?;
    write_detections(&a.out.join("detections.jsonl"), &detections)?;
    write_occupancy_csv(&a.out.join("occupancy.csv"), &maps)?;
    print_json(
        out,
        &json!({"frames": end - start, "candidates": candidates.len(), "detections": detections.len()}),
    )
}

fn suppress(cands: &[DetectionCandidate], tau_o: f64, min_cells: usize, grid: &GroundGrid) -> Vec<DetectionCandidate> {
    let kept = score_weighted_nms(cands, tau_o);
    if min_cells > 0 {
        min_cell_distance_filter(&kept, grid, min_cells)
    } else {
        kept
    }
}

fn by_frame(records: &[DetectionRecord]) -> BTreeMap<u64, Vec<DetectionCandidate>> {
    let mut m: BTreeMap<u64, Vec<DetectionCandidate>> = BTreeMap::new();
    for r in records {
        m.entry(r.frame).or_default().push(r.to_candidate());
    }
    m
}

fn evaluate(
    dets: &BTreeMap<u64, Vec<DetectionCandidate>>,
    gt: &BTreeMap<u64, Vec<usize>>,
    frames: &BTreeSet<u64>,
    grid: &GroundGrid,
    radius: f64,
) -> Result<Vec<FrameEval>, CliError> {
    let mut out = Vec::with_capacity(frames.len());
    for &f in frames {
        let d: Vec<(usize, f64)> = dets.get(&f).map_or_else(Vec::new, |v| v.iter().map(|c| (c.cell, c.score)).collect());
        let g = gt.get(&f).cloned().unwrap_or_default();
        out.push(match_frame(f, &d, &g, grid, radius).map_err(|e| CliError::Validation(format!("frame {f}: {e}")))?);
    }
    Ok(out)
}

pub fn eval(ctx: &Context, a: &EvalArgs, out: Out) -> Result<(), CliError> {
    let mut cfg = with_data(ctx, &a.data.data);
    if let Some(r) = a.match_radius {
        cfg.eval.matching = MatchConfig::GroundDistance { radius: r };
    }
    if let Some(s) = &a.sweep {
        cfg.eval.sweep = s.clone();
    }
    cfg.validate()?;
    let radius = match cfg.eval.matching {
        MatchConfig::GroundDistance { radius } => radius,
        MatchConfig::BboxIou { .. } => {
            return Err(CliError::Validation(
                "eval matches ground-plane cells; bbox_iou matching applies to image boxes only".into(),
            ))
        }
    };
    let grid_path = a.grid.clone().map_or_else(|| cfg.grid_path(), Ok)?;
    require(&grid_path)?;
    let grid = GroundGrid::load(&grid_path).map_err(invalid(&grid_path))?;
    let ann_path = a.annotations.clone().map_or_else(|| cfg.annotations_path(), Ok)?;
    let anns = load_annotations(&ann_path)?;
    require(&a.detections)?;
    let records = read_detections(&a.detections).map_err(invalid(&a.detections))?;
    let maps = match &a.occupancy {
        Some(p) => {
            require(p)?;
            Some(read_occupancy_csv(p).map_err(invalid(p))?)
        }
        None => None,
    };

    let frames: BTreeSet<u64> = match (a.frames, &cfg.detect.frames[..], &maps) {
        (Some((s, e)), _, _) | (None, &[s, e], _) => (s as u64..e as u64).collect(),
        (None, _, Some(m)) => m.iter().map(|m| m.frame_id).collect(),
        _ => records.iter().map(|r| r.frame).chain(anns.iter().map(|a| a.frame)).collect(),
    };
    if let Some(r) = records.iter().find(|r| !frames.contains(&r.frame)) {
        return Err(CliError::Validation(format!(
            "detection for frame {} lies outside the evaluated frames",
            r.frame
        )));
    }
    let mut gt: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for an in anns.iter().filter(|an| frames.contains(&an.frame)) {
        gt.entry(an.frame).or_default().push(an.cell);
    }
    for cells in gt.values_mut() {
        cells.sort_unstable();
        cells.dedup();
    }
    let dets = by_frame(&records);
    let per_frame = evaluate(&dets, &gt, &frames, &grid, radius)?;
    let report = EvalReport::from_frames(per_frame.clone(), cfg.eval.matching)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;

    let scored: Vec<(f64, bool)> = match &maps {
        Some(maps) => maps
            .iter()
            .filter(|m| frames.contains(&m.frame_id))
            .flat_map(|m| {
                let occ: BTreeSet<usize> = gt.get(&m.frame_id).into_iter().flatten().copied().collect();
                m.q.iter().enumerate().map(move |(c, &q)| (q, occ.contains(&c))).collect::<Vec<_>>()
            })
            .collect(),
        None => per_frame
            .iter()
            .flat_map(|f| {
                let matched: BTreeSet<usize> = f.pairs.iter().map(|p| p.0).collect();
                dets.get(&f.frame_id)
                    .into_iter()
                    .flatten()
                    .enumerate()
                    .map(move |(i, c)| (c.score, matched.contains(&i)))
                    .collect::<Vec<_>>()
            })
            .collect(),
    };
    let auc = match roc_auc(&scored) {
        Ok(curve) => {
            curve.write_csv(fs::File::create(a.out.join("roc.csv"))?)?;
            Some(curve.auc)
        }
        Err(_) => None,
    };

    if let Some(cp) = &a.candidates {
        require(cp)?;
        let cands = by_frame(&read_detections(cp).map_err(invalid(cp))?);
        let mut w = csv_writer(&a.out.join("sweep.csv"))?;
        w.write_record(["nms_threshold", "moda", "modp", "precision", "recall", "detections"])
            .map_err(mvocc::Error::from)?;
        for &tau in &cfg.eval.sweep {
            let kept: BTreeMap<u64, Vec<DetectionCandidate>> = cands
                .iter()
                .map(|(&f, c)| (f, suppress(c, tau, cfg.detect.min_cell_distance, &grid)))
                .collect();
            let n: usize = kept.values().map(Vec::len).sum();
            let r = EvalReport::from_frames(evaluate(&kept, &gt, &frames, &grid, radius)?, cfg.eval.matching)?;
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            w.write_record([
                tau.to_string(),
                r.moda.to_string(),
                opt(r.modp),
                opt(r.precision),
                opt(r.recall),
                n.to_string(),
            ])
            .map_err(mvocc::Error::from)?;
        }
        w.flush()?;
    }
    print_json(
        out,
        &json!({
            "moda": report.moda,
            "modp": report.modp,
            "precision": report.precision,
            "recall": report.recall,
            "frames": report.frames.len(),
            "auc": auc,
        }),
    )
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    Ok(csv::Writer::from_writer(fs::File::create(path)?))
}

pub fn nms(ctx: &Context, a: &NmsArgs, out: Out) -> Result<(), CliError> {
    let mut cfg = with_data(ctx, &a.data.data);
    if let Some(t) = a.nms_threshold {
        cfg.detect.nms_threshold = t;
    }
    if let Some(k) = a.min_cell_distance {
        cfg.detect.min_cell_distance = k;
    }
    cfg.validate()?;
    require(&a.input)?;
    let records = read_detections(&a.input).map_err(invalid(&a.input))?;
    let grid = if cfg.detect.min_cell_distance > 0 {
        let p = a.grid.clone().map_or_else(|| cfg.grid_path(), Ok)?;
        require(&p)?;
        Some(GroundGrid::load(&p).map_err(invalid(&p))?)
    } else {
        None
    };
    let mut kept = Vec::new();
    for (f, cands) in by_frame(&records) {
        let mut k = score_weighted_nms(&cands, cfg.detect.nms_threshold);
        if let Some(g) = &grid {
            k = min_cell_distance_filter(&k, g, cfg.detect.min_cell_distance);
        }
        kept.extend(k.iter().map(|c| DetectionRecord::from_candidate(f, c)));
    }
    write_detections(&a.out, &kept)?;
    print_json(out, &json!({"input": records.len(), "kept": kept.len()}))
}

pub fn inspect_forest(_ctx: &Context, a: &InspectForestArgs, out: Out) -> Result<(), CliError> {
    let (forest, q, views) = match (&a.forest, &a.model) {
        (Some(p), _) => {
            require(p)?;
            let f = Forest::load(p).map_err(invalid(p))?;
            let (Some(q), Some(c)) = (a.q, a.views) else {
                return Err(CliError::Validation("--forest needs --q and --views".into()));
            };
            (f, q, c)
        }
        (None, Some(p)) => {
            require(p)?;
            let (m, _) = MultiViewModel::load(p).map_err(invalid(p))?;
            let (q, c) = (a.q.unwrap_or(m.q), a.views.unwrap_or(m.views()));
            let f = m
                .forest
                .ok_or_else(|| CliError::Validation(format!("{} has no forest classifier", p.display())))?;
            (f, q, c)
        }
        (None, None) => return Err(CliError::Validation("pass --forest or --model".into())),
    };
    if q == 0 || q * views != forest.n_features {
        return Err(CliError::Validation(format!(
            "{views} views of {q} features do not cover the forest's {} features",
            forest.n_features
        )));
    }
    let table = forest.view_distribution_csv(&a.top_k, q, views);
    match &a.out {
        Some(p) => fs::write(p, &table)?,
        None => out.write_all(table.as_bytes())?,
    }
    Ok(())
}
