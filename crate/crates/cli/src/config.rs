//! Run configuration: built-in defaults, named profiles, a TOML file and
//! `--set` overrides, merged in that order.

use std::path::{Path, PathBuf};

use mvocc::forest::ForestOptions;
use mvocc::metrics::MatchConfig;
use mvocc::multiview::{HeadSpec, TrainOptions};
use mvocc::nnet::{OptimizerKind, PNorm, DEPTH_PRESETS};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub eval: EvalConfig,
}

/// Dataset layout. Unset file paths fall back to the standard names inside
/// `data`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub mask_table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    Mlp,
    Forest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of leading MiniEmbed layers kept as ψ.
    pub depth: usize,
    pub head: Vec<usize>,
    pub classifier: Classifier,
    pub n_trees: usize,
    pub tree_max_depth: usize,
    pub tree_min_leaf: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 7,
            head: HeadSpec::desk().hidden,
            classifier: Classifier::Mlp,
            n_trees: 100,
            tree_max_depth: 12,
            tree_min_leaf: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardNegatives {
    None,
    Shift,
    Mix,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub r: f64,
    pub optimizer: OptimizerKind,
    /// 0 disables early stopping.
    pub patience: usize,
    pub input_dropout: bool,
    pub hard_negatives: HardNegatives,
    pub freeze_embeddings: bool,
    /// 0 means every batch of the epoch.
    pub max_batches: usize,
    pub val_fraction: f64,
    pub pnorm: Option<PNorm>,
    pub pnorm_weight: f64,
    pub negatives_per_frame: usize,
    pub near_negative_fraction: f64,
    /// Train on the first `frames` frames only; 0 means all.
    pub frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            r: t.r,
            optimizer: t.optimizer,
            patience: t.patience.unwrap_or(0),
            input_dropout: t.input_dropout,
            hard_negatives: HardNegatives::None,
            freeze_embeddings: true,
            max_batches: 0,
            val_fraction: t.val_fraction,
            pnorm: None,
            pnorm_weight: 0.0,
            negatives_per_frame: 6,
            near_negative_fraction: 0.0,
            frames: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Extra Chebyshev-distance suppression after NMS; 0 disables it.
    pub min_cell_distance: usize,
    /// Half-open frame range `[start, end)`; empty means all frames.
    pub frames: Vec<usize>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            nms_threshold: 0.4,
            min_cell_distance: 0,
            frames: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub matching: MatchConfig,
    /// NMS thresholds for the sweep table.
    pub sweep: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            matching: MatchConfig::default(),
            sweep: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            detect: DetectConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Built-in profiles as TOML fragments.
pub const PROFILES: &[(&str, &str)] = &[
    ("desk", ""),
    (
        "paper-mono",
        r#"
[train]
epochs = 60
batch_size = 64
r = 0.33
optimizer = { algo = "sgd", lr = 0.005, momentum = 0.9 }
input_dropout = true
"#,
    ),
    (
        "paper-mv",
        r#"
[model]
depth = 7
head = [1024, 512]
[train]
epochs = 60
batch_size = 64
r = 0.33
optimizer = { algo = "sgd", lr = 0.005, momentum = 0.9 }
input_dropout = false
freeze_embeddings = true
"#,
    ),
    (
        "quick",
        r#"
[train]
epochs = 2
max_batches = 4
patience = 0
[model]
n_trees = 5
"#,
    ),
];

fn builtin_profile(name: &str) -> Option<Table> {
    PROFILES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| text.parse::<Table>().expect("built-in profiles parse"))
}

fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(a)), Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Parses `a.b.c=value`; the value is read as TOML, falling back to a bare
/// string.
fn override_table(assignment: &str) -> Result<Table, CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("--set expects key=value, got `{assignment}`")))?;
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| {
        CliError::Validation(format!("--set has an empty key in `{assignment}`"))
    })?;
    let mut table = Table::new();
    table.insert(last.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(p.to_string(), Value::Table(table));
        table = outer;
    }
    Ok(table)
}

impl RunConfig {
    /// Defaults, then the profile (built-in or `[profiles.<name>]` of the
    /// file), then the file's own settings, then `overrides`.
    pub fn load(file: Option<&Path>, profile: Option<&str>, overrides: &[String]) -> Result<Self, CliError> {
        let mut file_table = match file {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?
                .parse::<Table>()
                .map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))?,
            None => Table::new(),
        };
        let file_profiles = match file_table.remove("profiles") {
            Some(Value::Table(t)) => t,
            Some(_) => return Err(CliError::Validation("`profiles` must be a table of tables".into())),
            None => Table::new(),
        };
        let file_profile = match file_table.remove("profile") {
            Some(Value::String(s)) => Some(s),
            Some(_) => return Err(CliError::Validation("`profile` must be a string".into())),
            None => None,
        };
        let name = profile.map(str::to_string).or(file_profile);

        let mut table = Table::try_from(RunConfig::default()).expect("defaults serialize");
        if let Some(name) = &name {
            let chosen = match file_profiles.get(name) {
                Some(Value::Table(t)) => t.clone(),
                Some(_) => return Err(CliError::Validation(format!("profile `{name}` must be a table"))),
                None => builtin_profile(name).ok_or_else(|| {
                    let known: Vec<&str> = PROFILES.iter().map(|p| p.0).collect();
                    CliError::Validation(format!("unknown profile `{name}`; built-in profiles: {}", known.join(", ")))
                })?,
            };
            merge(&mut table, chosen);
        }
        merge(&mut table, file_table);
        for o in overrides {
            merge(&mut table, override_table(o)?);
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(format!("invalid configuration: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        let m = &self.model;
        let max_depth = DEPTH_PRESETS.iter().map(|p| p.1).max().unwrap_or(7);
        if m.depth == 0 || m.depth > max_depth {
            return bad(format!("model.depth must lie in 1..={max_depth}, got {}", m.depth));
        }
        if m.head.iter().any(|&h| h == 0) {
            return bad("model.head widths must be positive".into());
        }
        if m.n_trees == 0 || m.tree_min_leaf == 0 {
            return bad("model.n_trees and model.tree_min_leaf must be positive".into());
        }
        let t = &self.train;
        self.train_options(0)
            .validate()
            .map_err(|e| CliError::Validation(format!("train: {e}")))?;
        if !(0.0..=1.0).contains(&t.near_negative_fraction) {
            return bad("train.near_negative_fraction must lie in [0, 1]".into());
        }
        match t.optimizer {
            OptimizerKind::Sgd { lr, momentum } if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) => {
                return bad("train.optimizer: sgd needs lr > 0 and momentum in [0, 1)".into());
            }
            OptimizerKind::Adam { lr, .. } | OptimizerKind::RmsProp { lr, .. } if !(lr > 0.0) => {
                return bad("train.optimizer: lr must be positive".into());
            }
            _ => {}
        }
        let d = &self.detect;
        if !(0.0..=1.01).contains(&d.score_threshold) {
            return bad(format!("detect.score_threshold must lie in [0, 1.01], got {}", d.score_threshold));
        }
        if !(0.0..=1.0).contains(&d.nms_threshold) {
            return bad(format!("detect.nms_threshold must lie in [0, 1], got {}", d.nms_threshold));
        }
        if !(d.frames.is_empty() || (d.frames.len() == 2 && d.frames[0] <= d.frames[1])) {
            return bad("detect.frames must be empty or [start, end] with start <= end".into());
        }
        self.eval
            .matching
            .validate()
            .map_err(|e| CliError::Validation(format!("eval.matching: {e}")))?;
        if self.eval.sweep.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("eval.sweep thresholds must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn train_options(&self, seed: u64) -> TrainOptions {
        let t = &self.train;
        TrainOptions {
            epochs: t.epochs,
            batch_size: t.batch_size,
            r: t.r,
            optimizer: t.optimizer,
            patience: (t.patience > 0).then_some(t.patience),
            input_dropout: t.input_dropout,
            pnorm: t.pnorm,
            pnorm_weight: t.pnorm_weight,
            val_fraction: t.val_fraction,
            max_batches: (t.max_batches > 0).then_some(t.max_batches),
            seed,
            ..TrainOptions::default()
        }
    }

    pub fn forest_options(&self) -> ForestOptions {
        let mut f = ForestOptions {
            n_trees: self.model.n_trees,
            ..ForestOptions::default()
        };
        f.tree.max_depth = self.model.tree_max_depth;
        f.tree.min_leaf = self.model.tree_min_leaf;
        f
    }

    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            hidden: self.model.head.clone(),
        }
    }

    fn data_file(&self, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
        match (explicit, &self.paths.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(d)) => Ok(d.join(name)),
            (None, None) => Err(CliError::Validation(format!(
                "no dataset given: pass --data or set paths.data (needed for {name})"
            ))),
        }
    }

    pub fn calibration_path(&self) -> Result<PathBuf, CliError> {
        self.data_file(&self.paths.calibration, "calibrations.json")
    }

    pub fn grid_path(&self) -> Result<PathBuf, CliError> {
        self.data_file(&self.paths.grid, "grid.json")
    }

    pub fn annotations_path(&self) -> Result<PathBuf, CliError> {
        self.data_file(&self.paths.annotations, "annotations.jsonl")
    }

    pub fn images_dir(&self) -> Result<PathBuf, CliError> {
        match (&self.paths.images, &self.paths.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(d)) => Ok(d.clone()),
            (None, None) => Err(CliError::Validation(
                "no dataset given: pass --data or set paths.data (needed for images)".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn every_builtin_profile_loads() {
        for (name, _) in PROFILES {
            RunConfig::load(None, Some(name), &[]).unwrap();
        }
        let mono = RunConfig::load(None, Some("paper-mono"), &[]).unwrap();
        assert_eq!(mono.train.batch_size, 64);
        assert_eq!(mono.train.r, 0.33);
        assert_eq!(mono.train.optimizer, OptimizerKind::Sgd { lr: 0.005, momentum: 0.9 });
        assert_eq!(RunConfig::load(None, Some("paper-mv"), &[]).unwrap().model.head, vec![1024, 512]);
    }

    #[test]
    fn precedence_is_profile_then_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(
            &p,
            "profile = \"mine\"\n[train]\nbatch_size = 32\n[profiles.mine.train]\nbatch_size = 16\nepochs = 3\n",
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&p), None, &[]).unwrap();
        assert_eq!((cfg.train.batch_size, cfg.train.epochs), (32, 3));
        let cfg = RunConfig::load(Some(&p), None, &["train.epochs=9".into(), "detect.frames=[2, 5]".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.detect.frames, vec![2, 5]);
        let cfg = RunConfig::load(Some(&p), Some("quick"), &[]).unwrap();
        assert_eq!((cfg.train.batch_size, cfg.train.epochs), (32, 2));
    }

    #[test]
    fn invalid_settings_are_validation_errors() {
        for o in ["train.r=1.5", "model.depth=0", "detect.nms_threshold=2.0", "train.bogus=1", "nokey"] {
            let e = RunConfig::load(None, None, &[o.into()]).unwrap_err();
            assert!(matches!(e, CliError::Validation(_)), "{o}: {e}");
        }
        assert!(RunConfig::load(None, Some("nope"), &[]).is_err());
        let e = RunConfig::default().grid_path().unwrap_err().to_string();
        assert!(e.contains("--data"), "{e}");
    }
}
