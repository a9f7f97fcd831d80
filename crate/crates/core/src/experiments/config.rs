//! JSON experiment configuration.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::BlobSpec;
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec, DEFAULT_LAMBDA};
use crate::optim::{SgdrSchedule, DEFAULT_LR_GRID};
use crate::stats::Alternative;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub losses: Vec<LossEntry>,
    pub samples_per_class: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Searched for every loss without a fixed `lr_max`.
    #[serde(default = "default_lr_grid")]
    pub lr_grid: Vec<f64>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default)]
    pub momentum: f64,
    /// Training loss above this value marks a run as diverged.
    #[serde(default = "default_divergence_threshold")]
    pub divergence_threshold: f64,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub alternative: Alternative,
    #[serde(default)]
    pub failed_runs: FailedRuns,
    #[serde(default)]
    pub standardize: bool,
    /// Loss-name pairs to test; every pair in listed order when absent.
    #[serde(default)]
    pub comparisons: Option<Vec<(String, String)>>,
}

fn default_lr_grid() -> Vec<f64> {
    DEFAULT_LR_GRID.to_vec()
}
fn default_batch_size() -> usize {
    32
}
fn default_clip_norm() -> f64 {
    10.0
}
fn default_divergence_threshold() -> f64 {
    1e4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Blobs {
        #[serde(flatten)]
        spec: BlobSpec,
        #[serde(default)]
        hierarchy: Option<PathBuf>,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        class_list: Option<PathBuf>,
        #[serde(default)]
        hierarchy: Option<PathBuf>,
    },
}

impl DatasetSource {
    pub fn hierarchy(&self) -> Option<&Path> {
        match self {
            DatasetSource::Blobs { hierarchy, .. } | DatasetSource::Csv { hierarchy, .. } => {
                hierarchy.as_deref()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingChoice {
    #[default]
    Onehot,
    Semantic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossEntry {
    pub name: String,
    pub kind: LossKind,
    #[serde(default)]
    pub embedding: EmbeddingChoice,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub lr_max: Option<f64>,
}

impl LossEntry {
    pub fn spec(&self, num_classes: usize) -> Result<LossSpec> {
        LossSpec::new(self.kind, num_classes)?
            .with_label_smoothing(self.label_smoothing)?
            .with_lambda(self.lambda.unwrap_or(DEFAULT_LAMBDA))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_base")]
    pub base_cycle_epochs: usize,
    #[serde(default = "default_cycles")]
    pub num_cycles: usize,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
}

fn default_base() -> usize {
    12
}
fn default_cycles() -> usize {
    5
}
fn default_lr_min() -> f64 {
    1e-6
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_cycle_epochs: default_base(),
            num_cycles: default_cycles(),
            lr_min: default_lr_min(),
        }
    }
}

impl ScheduleConfig {
    pub fn schedule(&self, lr_max: f64) -> SgdrSchedule {
        SgdrSchedule {
            lr_max,
            lr_min: self.lr_min,
            base_cycle_epochs: self.base_cycle_epochs,
            num_cycles: self.num_cycles,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden_layers: default_hidden(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Maximum test accuracy over all epochs.
    #[default]
    BestEpoch,
    Final,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailedRuns {
    /// Leave diverged runs out of aggregates.
    #[default]
    Exclude,
    /// Count diverged runs as accuracy 0.
    Zero,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config and resolves its relative paths against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetSource::Blobs { hierarchy, .. } => hierarchy.iter_mut().for_each(fix),
            DatasetSource::Csv {
                train,
                test,
                class_list,
                hierarchy,
            } => {
                fix(train);
                fix(test);
                class_list.iter_mut().for_each(fix);
                hierarchy.iter_mut().for_each(fix);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.losses.is_empty() {
            return bad("at least one loss is required".into());
        }
        let mut names = HashSet::new();
        for l in &self.losses {
            if !names.insert(l.name.as_str()) {
                return bad(format!("duplicate loss name `{}`", l.name));
            }
            if l.embedding == EmbeddingChoice::Semantic && self.dataset.hierarchy().is_none() {
                return bad(format!(
                    "loss `{}` needs a hierarchy for semantic embeddings",
                    l.name
                ));
            }
            if let Some(lr) = l.lr_max {
                self.schedule.schedule(lr).validate()?;
            }
            l.spec(2)?;
        }
        if self.samples_per_class.is_empty() || self.samples_per_class.contains(&0) {
            return bad("samples_per_class must be a non-empty list of positive counts".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.losses.iter().any(|l| l.lr_max.is_none()) {
            if self.lr_grid.is_empty() {
                return bad("lr_grid is empty".into());
            }
            for &lr in &self.lr_grid {
                self.schedule.schedule(lr).validate()?;
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)".into());
        }
        if !(self.divergence_threshold > 0.0) {
            return bad("divergence_threshold must be > 0".into());
        }
        for (a, b) in self.comparisons.iter().flatten() {
            for n in [a, b] {
                if !names.contains(n.as_str()) {
                    return bad(format!("comparison names unknown loss `{n}`"));
                }
            }
        }
        Ok(())
    }

    /// Learning rates tried for a loss.
    pub fn lr_candidates(&self, loss: &LossEntry) -> Vec<f64> {
        match loss.lr_max {
            Some(lr) => vec![lr],
            None => self.lr_grid.clone(),
        }
    }

    pub fn comparison_pairs(&self) -> Vec<(String, String)> {
        match &self.comparisons {
            Some(pairs) => pairs.clone(),
            None => {
                let names: Vec<&String> = self.losses.iter().map(|l| &l.name).collect();
                let mut out = Vec::new();
                for i in 0..names.len() {
                    for j in i + 1..names.len() {
                        out.push((names[i].clone(), names[j].clone()));
                    }
                }
                out
            }
        }
    }
}
