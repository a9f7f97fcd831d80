//! Single training runs and test-set accuracy.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::losses::{AuxHead, LossKind, LossSpec};
use crate::model::{MlpConfig, ModelState};
use crate::optim::{clip_gradients, ClipSpec, Sgd, SgdrSchedule};
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::mix_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub schedule: SgdrSchedule,
    pub batch_size: usize,
    pub clip: ClipSpec,
    pub momentum: f64,
    pub divergence_threshold: f64,
    pub hidden_layers: Vec<usize>,
}

impl TrainSettings {
    pub fn new(schedule: SgdrSchedule, hidden_layers: Vec<usize>) -> Self {
        Self {
            schedule,
            batch_size: 32,
            clip: ClipSpec::default(),
            momentum: 0.0,
            divergence_threshold: 1e4,
            hidden_layers,
        }
    }
}

/// How features are turned into class predictions.
#[derive(Clone, Copy, Debug)]
pub enum Readout<'a> {
    /// `argmax_c ⟨f, φ_c⟩`, equal to the argmax of cosine similarity.
    Embeddings(&'a EmbeddingMatrix),
    /// `argmax_c f_c`.
    Logits,
}

impl<'a> Readout<'a> {
    pub fn for_loss(kind: LossKind, embeddings: &'a EmbeddingMatrix) -> Self {
        if kind.uses_embeddings() {
            Readout::Embeddings(embeddings)
        } else {
            Readout::Logits
        }
    }
}

pub fn predict(features: &Tensor, readout: Readout<'_>) -> Result<Vec<usize>> {
    match readout {
        Readout::Embeddings(e) => Ok(features.matmul(&e.matrix().transpose()?)?.argmax_rows()),
        Readout::Logits => Ok(features.argmax_rows()),
    }
}

/// Fraction of matching entries.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

pub fn feature_accuracy(features: &Tensor, labels: &[usize], readout: Readout<'_>) -> Result<f64> {
    Ok(accuracy(&predict(features, readout)?, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub status: RunStatus,
    pub diagnostic: Option<String>,
    /// One entry per fully completed epoch.
    pub epochs: Vec<EpochLog>,
    pub model: ModelState,
    pub head: Option<AuxHead>,
}

impl TrainOutcome {
    /// Highest test accuracy and its epoch; the earliest epoch wins ties.
    pub fn best(&self) -> Option<(f64, usize)> {
        self.epochs.iter().fold(None, |best, e| match best {
            Some((a, _)) if a >= e.test_accuracy => best,
            _ => Some((e.test_accuracy, e.epoch)),
        })
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_accuracy)
    }

    pub fn final_head_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.head_accuracy)
    }
}

/// Trains the full schedule and evaluates the test set after every epoch.
///
/// Non-finite values, losses above the divergence threshold and degenerate
/// features end the run with [`RunStatus::Diverged`]; invalid inputs are
/// returned as errors.
pub fn run_training(
    train: &Dataset,
    test: &Dataset,
    loss: &LossSpec,
    embeddings: &EmbeddingMatrix,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    loss.validate()?;
    settings.schedule.validate()?;
    let n = train.num_classes();
    if loss.num_classes != n || test.num_classes() != n {
        return Err(Error::Config(format!(
            "class counts disagree: loss {}, train {n}, test {}",
            loss.num_classes,
            test.num_classes()
        )));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape("datasets", &[train.dim()], &[test.dim()]));
    }
    if embeddings.num_classes() != n {
        return Err(Error::Config(format!(
            "{} embeddings for {n} classes",
            embeddings.num_classes()
        )));
    }
    let output_dim = if loss.kind.uses_embeddings() {
        embeddings.dim()
    } else {
        n
    };
    let cfg = MlpConfig::new(
        train.dim(),
        settings.hidden_layers.clone(),
        output_dim,
        mix_seed(&[seed, 1]),
    );
    let mut model = ModelState::init(cfg)?;
    let mut head = match loss.kind {
        LossKind::CosinePlusXent => Some(AuxHead::init(output_dim, n, mix_seed(&[seed, 2]))?),
        _ => None,
    };
    let readout = Readout::for_loss(loss.kind, embeddings);
    let mut opt = Sgd::new(settings.momentum);
    let mut epochs = Vec::new();

    for epoch in 0..settings.schedule.total_epochs() {
        let batches = train.batches(settings.batch_size, mix_seed(&[seed, 3, epoch as u64]))?;
        let lr0 = settings.schedule.lr_at(epoch, 0, batches.len())?;
        let mut total = 0.0;
        for (step, (x, y)) in batches.iter().enumerate() {
            let lr = settings.schedule.lr_at(epoch, step, batches.len())?;
            let result = train_step(
                &mut model,
                head.as_mut(),
                &mut opt,
                x,
                y,
                loss,
                embeddings,
                settings,
                lr,
            );
            match result {
                Ok(v) => total += v,
                Err(e) if !e.is_validation() => {
                    return Ok(TrainOutcome {
                        status: RunStatus::Diverged,
                        diagnostic: Some(format!("epoch {epoch}, step {step}: {e}")),
                        epochs,
                        model,
                        head,
                    })
                }
                Err(e) => return Err(e),
            }
        }
        let features = model.predict(test.features())?;
        let test_accuracy = feature_accuracy(&features, test.labels(), readout)?;
        let head_accuracy = head.as_ref().and_then(|h| {
            let logits = h.logits(&features.l2_normalize().ok()?).ok()?;
            Some(accuracy(&logits.argmax_rows(), test.labels()))
        });
        epochs.push(EpochLog {
            epoch,
            lr: lr0,
            train_loss: total / batches.len() as f64,
            test_accuracy,
            head_accuracy,
        });
    }
    Ok(TrainOutcome {
        status: RunStatus::Completed,
        diagnostic: None,
        epochs,
        model,
        head,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut ModelState,
    head: Option<&mut AuxHead>,
    opt: &mut Sgd,
    x: &Tensor,
    y: &[usize],
    loss: &LossSpec,
    embeddings: &EmbeddingMatrix,
    settings: &TrainSettings,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let head_vars = head.as_ref().map(|h| h.register(&mut tape));
    let xv = tape.constant(x.clone());
    let features = model.forward(&mut tape, &vars, xv)?;
    let out = loss.build(&mut tape, features, y, embeddings, head_vars)?;
    let value = tape.value(out).data()[0];
    if value > settings.divergence_threshold {
        return Err(Error::Divergence(format!(
            "training loss {value:e} exceeds {:e}",
            settings.divergence_threshold
        )));
    }
    let mut grads = tape.backward(out)?;
    let mut order: Vec<_> = vars.params().collect();
    if let Some(hv) = head_vars {
        order.extend([hv.weight, hv.bias]);
    }
    let mut g: Vec<Tensor> = order
        .iter()
        .map(|&v| grads.take(v).expect("every parameter has a gradient"))
        .collect();
    clip_gradients(&mut g, settings.clip)?;
    match head {
        Some(h) => opt.step(model.tensors_mut().chain(h.tensors_mut()), &g, lr)?,
        None => opt.step(model.tensors_mut(), &g, lr)?,
    }
    if !model.all_finite() {
        return Err(Error::NonFinite { op: "sgd_step" });
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, BlobSpec};

    fn blobs(spread: f64) -> (Dataset, Dataset) {
        make_blobs(
            &BlobSpec {
                n_classes: 3,
                dim: 4,
                samples_per_class: 8,
                spread,
                separation: 1.0,
                seed: 11,
            },
            None,
        )
        .unwrap()
    }

    fn quick(lr: f64) -> TrainSettings {
        TrainSettings::new(SgdrSchedule::new(lr).with_cycles(2, 2), vec![8])
    }

    #[test]
    fn accuracy_examples() {
        let e = EmbeddingMatrix::onehot(2).unwrap();
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(
            feature_accuracy(&f, &[0, 1], Readout::Embeddings(&e)).unwrap(),
            1.0
        );

        let constant = Tensor::from_rows(&vec![vec![0.2, 0.9]; 4]).unwrap();
        assert_eq!(
            feature_accuracy(&constant, &[1, 0, 0, 0], Readout::Logits).unwrap(),
            0.25
        );

        assert_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1]), 0.75);
    }

    #[test]
    fn separable_blobs_are_learned_by_every_loss() {
        let (train, test) = blobs(0.0);
        let e = EmbeddingMatrix::onehot(3).unwrap();
        for kind in [
            LossKind::Cosine,
            LossKind::CrossEntropy,
            LossKind::Mse,
            LossKind::CosinePlusXent,
        ] {
            let spec = LossSpec::new(kind, 3).unwrap();
            let out = run_training(&train, &test, &spec, &e, &quick(0.5), 3).unwrap();
            assert_eq!(out.status, RunStatus::Completed, "{kind}");
            assert_eq!(out.best().unwrap().0, 1.0, "{kind}");
        }
    }

    #[test]
    fn repeated_run_is_identical() {
        let (train, test) = blobs(0.4);
        let e = EmbeddingMatrix::onehot(3).unwrap();
        let spec = LossSpec::new(LossKind::Cosine, 3).unwrap();
        let a = run_training(&train, &test, &spec, &e, &quick(0.1), 7).unwrap();
        let b = run_training(&train, &test, &spec, &e, &quick(0.1), 7).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let (train, test) = blobs(0.4);
        let e = EmbeddingMatrix::onehot(3).unwrap();
        let spec = LossSpec::new(LossKind::CrossEntropy, 3).unwrap();
        let out = run_training(&train, &test, &spec, &e, &quick(1e6), 0).unwrap();
        assert_eq!(out.status, RunStatus::Diverged);
        assert!(out.diagnostic.is_some());
    }

    #[test]
    fn mismatched_classes_are_rejected() {
        let (train, test) = blobs(0.4);
        let e = EmbeddingMatrix::onehot(4).unwrap();
        let spec = LossSpec::new(LossKind::Cosine, 3).unwrap();
        assert!(run_training(&train, &test, &spec, &e, &quick(0.1), 0).is_err());
    }
}
