//! Dataset-size sweeps: every (loss, k, seed, lr) run, learning-rate
//! selection, per-cell aggregates and Welch comparisons.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_blobs, Dataset, Split, Standardizer};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::hierarchy::{read_class_list, ClassHierarchy};
use crate::losses::LossKind;
use crate::optim::ClipSpec;
use crate::stats::{mean, sample_std, welch_t_test, Alternative, WelchResult};

use super::config::{DatasetSource, EmbeddingChoice, ExperimentConfig, FailedRuns, Metric};
use super::mix_seed;
use super::train::{run_training, EpochLog, RunStatus, TrainSettings};

/// Train/test data plus the embeddings every loss may ask for.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub onehot: EmbeddingMatrix,
    pub semantic: Option<EmbeddingMatrix>,
}

impl PreparedData {
    pub fn load(source: &DatasetSource, standardize: bool) -> Result<Self> {
        let class_list_path = match source {
            DatasetSource::Csv { class_list, .. } => class_list.as_deref(),
            DatasetSource::Blobs { .. } => None,
        };
        let hierarchy = source
            .hierarchy()
            .map(|p| ClassHierarchy::from_files(p, class_list_path))
            .transpose()?;
        let (train, test) = match source {
            DatasetSource::Blobs { spec, .. } => make_blobs(spec, hierarchy.as_ref())?,
            DatasetSource::Csv { train, test, .. } => {
                let list = match (&hierarchy, class_list_path) {
                    (Some(h), _) => Some(h.classes().into_iter().map(String::from).collect()),
                    (None, Some(p)) => Some(read_class_list(p)?),
                    (None, None) => None,
                };
                let tr = Dataset::load_csv(train, list.as_deref(), Split::Train)?;
                let names = tr.class_names().to_vec();
                let te = Dataset::load_csv(test, Some(&names), Split::Test)?;
                (tr, te)
            }
        };
        let names = train.class_names().to_vec();
        if train.class_counts().contains(&0) {
            return Err(Error::Config(
                "every class needs at least one training sample".into(),
            ));
        }
        let semantic = match hierarchy {
            Some(h) => {
                let s = h.semantic_similarity()?;
                if s.names() != names.as_slice() {
                    return Err(Error::Config(
                        "dataset classes do not match the hierarchy's leaf order".into(),
                    ));
                }
                Some(EmbeddingMatrix::semantic(&s)?)
            }
            None => None,
        };
        let (train, test) = if standardize {
            let s = Standardizer::fit(&train);
            (train.standardized(&s)?, test.standardized(&s)?)
        } else {
            (train, test)
        };
        Ok(Self {
            onehot: EmbeddingMatrix::onehot_named(names)?,
            semantic,
            train,
            test,
        })
    }

    pub fn embeddings(&self, choice: EmbeddingChoice) -> Result<&EmbeddingMatrix> {
        match choice {
            EmbeddingChoice::Onehot => Ok(&self.onehot),
            EmbeddingChoice::Semantic => self
                .semantic
                .as_ref()
                .ok_or_else(|| Error::Config("semantic embeddings need a hierarchy".into())),
        }
    }
}

/// Identifies one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub loss: String,
    pub k: usize,
    pub seed: u64,
    pub lr_max: f64,
}

impl RunKey {
    pub fn file_stem(&self) -> String {
        format!("{}_k{}_s{}_lr{}", self.loss, self.k, self.seed, self.lr_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub key: RunKey,
    pub kind: LossKind,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    pub best_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub final_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_accuracy: Option<f64>,
    pub epochs: Vec<EpochLog>,
}

impl RunRecord {
    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::BestEpoch => self.best_accuracy,
            Metric::Final => self.final_accuracy,
        }
    }

    pub fn failed(&self) -> bool {
        self.status == RunStatus::Diverged
    }
}

/// Wall-clock time of one run; kept out of the deterministic result.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTiming {
    pub key: RunKey,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub loss: String,
    pub k: usize,
    pub lr_max: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub n_runs: usize,
    pub n_failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub k: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub alternative: Alternative,
    pub welch: Option<WelchResult>,
    pub p_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub metric: Metric,
    pub failed_runs: FailedRuns,
    pub alternative: Alternative,
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
    pub comparisons: Vec<Comparison>,
}

/// All runs in a fixed order: loss, then k, then learning rate, then seed.
pub fn enumerate_runs(cfg: &ExperimentConfig) -> Vec<RunKey> {
    let mut keys = Vec::new();
    for loss in &cfg.losses {
        for &k in &cfg.samples_per_class {
            for lr_max in cfg.lr_candidates(loss) {
                for &seed in &cfg.seeds {
                    keys.push(RunKey {
                        loss: loss.name.clone(),
                        k,
                        seed,
                        lr_max,
                    });
                }
            }
        }
    }
    keys
}

/// Runs the sweep on `workers` threads. Records come back in
/// [`enumerate_runs`] order regardless of scheduling.
pub fn size_sweep(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    workers: usize,
) -> Result<(ExperimentResult, Vec<RunTiming>)> {
    cfg.validate()?;
    let smallest = data.train.class_counts().into_iter().min().unwrap_or(0);
    if let Some(&k) = cfg.samples_per_class.iter().find(|&&k| k > smallest) {
        return Err(Error::Config(format!(
            "samples_per_class {k} exceeds the smallest training class ({smallest})"
        )));
    }
    for loss in &cfg.losses {
        data.embeddings(loss.embedding)?;
    }
    let keys = enumerate_runs(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Result<(RunRecord, RunTiming)>> =
        pool.install(|| keys.par_iter().map(|key| run_one(cfg, data, key)).collect());
    let mut records = Vec::with_capacity(outcomes.len());
    let mut timings = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let (r, t) = o?;
        if r.failed() {
            log::warn!(
                "run {} diverged: {}",
                r.key.file_stem(),
                r.diagnostic.as_deref().unwrap_or("")
            );
        }
        records.push(r);
        timings.push(t);
    }
    let result = summarize(cfg, records);
    Ok((result, timings))
}

fn run_one(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    key: &RunKey,
) -> Result<(RunRecord, RunTiming)> {
    let start = Instant::now();
    let entry = cfg
        .losses
        .iter()
        .find(|l| l.name == key.loss)
        .ok_or_else(|| Error::Config(format!("unknown loss `{}`", key.loss)))?;
    let n = data.train.num_classes();
    let spec = entry.spec(n)?;
    let embeddings = data.embeddings(entry.embedding)?;
    let train = data
        .train
        .subsample(key.k, mix_seed(&[key.seed, key.k as u64, 0x5eed]))?;
    let settings = TrainSettings {
        schedule: cfg.schedule.schedule(key.lr_max),
        batch_size: cfg.batch_size,
        clip: ClipSpec {
            max_norm: cfg.clip_norm,
        },
        momentum: cfg.momentum,
        divergence_threshold: cfg.divergence_threshold,
        hidden_layers: cfg.model.hidden_layers.clone(),
    };
    let run_seed = mix_seed(&[key.seed, key.k as u64]);
    let out = run_training(&train, &data.test, &spec, embeddings, &settings, run_seed)?;
    let (best_accuracy, best_epoch) = match out.best() {
        Some((a, e)) => (a, Some(e)),
        None => (0.0, None),
    };
    let record = RunRecord {
        key: key.clone(),
        kind: entry.kind,
        status: out.status,
        diagnostic: out.diagnostic.clone(),
        best_accuracy,
        best_epoch,
        final_accuracy: out.final_accuracy().unwrap_or(0.0),
        head_accuracy: out.final_head_accuracy(),
        epochs: out.epochs,
    };
    let timing = RunTiming {
        key: key.clone(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((record, timing))
}

/// Values entering the aggregates for one group of records.
fn metric_values(records: &[&RunRecord], metric: Metric, failed: FailedRuns) -> Vec<f64> {
    records
        .iter()
        .filter_map(|r| match (r.failed(), failed) {
            (true, FailedRuns::Exclude) => None,
            (true, FailedRuns::Zero) => Some(0.0),
            (false, _) => Some(r.metric(metric)),
        })
        .collect()
}

/// Selects the learning rate with the highest mean metric per (loss, k)
/// (the first listed wins ties) and derives aggregates and comparisons.
pub fn summarize(cfg: &ExperimentConfig, records: Vec<RunRecord>) -> ExperimentResult {
    let mut aggregates = Vec::new();
    for loss in &cfg.losses {
        for &k in &cfg.samples_per_class {
            let mut best: Option<Aggregate> = None;
            for lr in cfg.lr_candidates(loss) {
                let group: Vec<&RunRecord> = records
                    .iter()
                    .filter(|r| r.key.loss == loss.name && r.key.k == k && r.key.lr_max == lr)
                    .collect();
                let agg = aggregate(&group, &loss.name, k, lr, cfg.metric, cfg.failed_runs);
                let better = match &best {
                    None => true,
                    Some(b) => rank(&agg) > rank(b),
                };
                if better {
                    best = Some(agg);
                }
            }
            aggregates.extend(best);
        }
    }
    let comparisons = compare(cfg, &records, &aggregates);
    ExperimentResult {
        metric: cfg.metric,
        failed_runs: cfg.failed_runs,
        alternative: cfg.alternative,
        records,
        aggregates,
        comparisons,
    }
}

fn rank(a: &Aggregate) -> f64 {
    if a.n_runs == 0 {
        f64::NEG_INFINITY
    } else {
        a.mean_acc
    }
}

pub fn aggregate(
    group: &[&RunRecord],
    loss: &str,
    k: usize,
    lr_max: f64,
    metric: Metric,
    failed: FailedRuns,
) -> Aggregate {
    let values = metric_values(group, metric, failed);
    Aggregate {
        loss: loss.to_string(),
        k,
        lr_max,
        mean_acc: if values.is_empty() {
            0.0
        } else {
            mean(&values)
        },
        std_acc: sample_std(&values),
        n_runs: values.len(),
        n_failed: group.iter().filter(|r| r.failed()).count(),
    }
}

fn compare(
    cfg: &ExperimentConfig,
    records: &[RunRecord],
    aggregates: &[Aggregate],
) -> Vec<Comparison> {
    let mut out = Vec::new();
    for (a, b) in cfg.comparison_pairs() {
        for &k in &cfg.samples_per_class {
            let cell = |name: &str| -> Option<(f64, Vec<f64>)> {
                let agg = aggregates.iter().find(|g| g.loss == name && g.k == k)?;
                let group: Vec<&RunRecord> = records
                    .iter()
                    .filter(|r| r.key.loss == name && r.key.k == k && r.key.lr_max == agg.lr_max)
                    .collect();
                Some((
                    agg.mean_acc,
                    metric_values(&group, cfg.metric, cfg.failed_runs),
                ))
            };
            let (Some((mean_a, xs)), Some((mean_b, ys))) = (cell(&a), cell(&b)) else {
                continue;
            };
            let welch = welch_t_test(&xs, &ys).ok();
            out.push(Comparison {
                a: a.clone(),
                b: b.clone(),
                k,
                mean_a,
                mean_b,
                alternative: cfg.alternative,
                p_value: welch.map(|w| w.p_value(cfg.alternative)),
                welch,
            });
        }
    }
    out
}

impl ExperimentResult {
    /// Recomputes aggregates and comparisons from the stored records.
    pub fn reaggregate(&self, cfg: &ExperimentConfig) -> ExperimentResult {
        summarize(cfg, self.records.clone())
    }

    pub fn aggregate_for(&self, loss: &str, k: usize) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.loss == loss && a.k == k)
    }

    pub fn comparison_for(&self, a: &str, b: &str, k: usize) -> Option<&Comparison> {
        self.comparisons
            .iter()
            .find(|c| c.a == a && c.b == b && c.k == k)
    }
}
