//! Run configuration: one TOML file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use dgfn_core::data::{AugmentConfig, SynthLesionSpec};
use dgfn_core::dgconv::BackwardMode;
use dgfn_core::optim::OptimizerConfig;
use dgfn_core::train::TrainOptions;
use dgfn_core::ModelSpec;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DGFN_OUT";
const DEFAULT_OUT_ROOT: &str = "dgfn-out";
/// Label count of a MIML run when none is given.
pub const MIML_DEFAULT_LABELS: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// One binary label per bag.
    Mil,
    /// Several binary labels per bag.
    Miml,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Label count; 1 for `mil`, 14 for `miml` when absent.
    pub labels: Option<usize>,
    pub mode: BackwardMode,
    /// Output directory; `$DGFN_OUT/<command>` when absent.
    pub output: Option<PathBuf>,
    pub model: ModelSpec,
    pub optim: OptimizerConfig,
    pub train: TrainSection,
    pub data: DataConfig,
    pub gradcheck: GradCheckSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Mil,
            labels: None,
            mode: BackwardMode::Exact,
            output: None,
            model: ModelSpec::default(),
            optim: OptimizerConfig::default(),
            train: TrainSection::default(),
            data: DataConfig::default(),
            gradcheck: GradCheckSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub class_weighted: bool,
    pub augment: bool,
    pub augmentation: AugmentConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            class_weighted: t.class_weighted,
            augment: t.augment,
            augmentation: t.augmentation,
        }
    }
}

/// Where each split comes from. A split path is either a directory with a
/// `labels.csv` or a manifest CSV regenerated with `synthetic`. Without a
/// path the split is generated from `synthetic` at a fixed index range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SynthLesionSpec,
    pub train_bags: usize,
    pub val_bags: usize,
    pub eval_bags: usize,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SynthLesionSpec::default(),
            train_bags: 200,
            val_bags: 50,
            eval_bags: 100,
            train: None,
            val: None,
            eval: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSection {
    /// Side of the random input image.
    pub size: usize,
    pub eps: f64,
    /// Largest accepted relative error per block.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self {
            size: 8,
            eps: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Bags whose patch heatmaps are written.
    pub heatmaps: usize,
    /// Nearest-neighbour upscaling of heatmap images.
    pub upscale: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            heatmaps: 8,
            upscale: 8,
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn cfg_err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `table[a][b]...[z] = value` for the dotted key `a.b....z`.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(cfg_err(format!("bad override key {key:?}")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| cfg_err(format!("{key}: {p} is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| cfg_err(format!("{}: {e}", p.display())))?
                .parse::<toml::Table>()
                .map_err(|e| cfg_err(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        cfg.resolve_labels()?;
        cfg.model.validate().map_err(|e| cfg_err(e.to_string()))?;
        cfg.optim.validate().map_err(|e| cfg_err(e.to_string()))?;
        cfg.data
            .synthetic
            .validate()
            .map_err(|e| cfg_err(e.to_string()))?;
        if cfg.gradcheck.size == 0 || !(cfg.gradcheck.eps > 0.0) || cfg.eval.upscale == 0 {
            return Err(cfg_err(
                "gradcheck.size, gradcheck.eps and eval.upscale must be positive",
            ));
        }
        Ok(cfg)
    }

    /// Propagates the task's label count into the model and data specs.
    fn resolve_labels(&mut self) -> Result<(), ConfigError> {
        let n = self.labels.unwrap_or(match self.task {
            Task::Mil => 1,
            Task::Miml => MIML_DEFAULT_LABELS,
        });
        match self.task {
            Task::Mil if n != 1 => return Err(cfg_err("task mil has exactly one label")),
            Task::Miml if n < 2 => return Err(cfg_err("task miml needs at least two labels")),
            _ => {}
        }
        for (what, v) in [
            ("model.labels", &mut self.model.labels),
            ("data.synthetic.labels", &mut self.data.synthetic.labels),
        ] {
            if *v != 1 && *v != n {
                return Err(cfg_err(format!(
                    "{what} = {v} disagrees with the task's {n} labels"
                )));
            }
            *v = n;
        }
        self.labels = Some(n);
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            mode: self.mode,
            class_weighted: self.train.class_weighted,
            augment: self.train.augment,
            augmentation: self.train.augmentation.clone(),
        }
    }

    /// The configured output directory, else `$DGFN_OUT/<command>`, else
    /// `dgfn-out/<command>`.
    pub fn output_dir(&self, command: &str) -> PathBuf {
        match &self.output {
            Some(p) => p.clone(),
            None => std::env::var_os(OUT_ENV)
                .map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from)
                .join(command),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }
}
