//! Classification losses as tape compositions, plus loss-surface sampling.
//!
//! All losses average over the batch. Targets for the embedding-space losses
//! are rows of an [`EmbeddingMatrix`]; cross-entropy works on integer labels.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, NORM_EPS};

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Cosine,
    CrossEntropy,
    Mse,
    #[serde(alias = "cosine_xent")]
    CosinePlusXent,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Cosine => "cosine",
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Mse => "mse",
            LossKind::CosinePlusXent => "cosine_plus_xent",
        }
    }

    /// Whether predictions come from comparing features to class embeddings.
    pub fn uses_embeddings(self) -> bool {
        !matches!(self, LossKind::CrossEntropy)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(LossKind::Cosine),
            "cross_entropy" | "xent" => Ok(LossKind::CrossEntropy),
            "mse" => Ok(LossKind::Mse),
            "cosine_plus_xent" | "cosine_xent" => Ok(LossKind::CosinePlusXent),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub label_smoothing: f64,
    pub lambda: f64,
    pub num_classes: usize,
}

impl LossSpec {
    pub fn new(kind: LossKind, num_classes: usize) -> Result<Self> {
        let spec = Self {
            kind,
            label_smoothing: 0.0,
            lambda: DEFAULT_LAMBDA,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_label_smoothing(mut self, eps: f64) -> Result<Self> {
        self.label_smoothing = eps;
        self.validate()?;
        Ok(self)
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        self.lambda = lambda;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Records the loss for one batch. `head` is required for
    /// [`LossKind::CosinePlusXent`] and ignored otherwise.
    pub fn build(
        &self,
        tape: &mut Tape,
        features: Var,
        labels: &[usize],
        embeddings: &EmbeddingMatrix,
        head: Option<HeadVars>,
    ) -> Result<Var> {
        match self.kind {
            LossKind::Cosine => {
                let targets = tape.constant(embeddings.gather(labels)?);
                cosine_loss(tape, features, targets)
            }
            LossKind::Mse => {
                let targets = tape.constant(embeddings.gather(labels)?);
                mse_loss(tape, features, targets)
            }
            LossKind::CrossEntropy => {
                cross_entropy_loss(tape, features, labels, self.label_smoothing)
            }
            LossKind::CosinePlusXent => {
                let head = head.ok_or_else(|| {
                    Error::Config("cosine_plus_xent needs an auxiliary head".into())
                })?;
                let targets = tape.constant(embeddings.gather(labels)?);
                cosine_plus_xent_loss(tape, features, labels, targets, head, self.lambda)
            }
        }
    }

    /// Loss value without keeping the tape.
    pub fn evaluate(
        &self,
        features: &Tensor,
        labels: &[usize],
        embeddings: &EmbeddingMatrix,
        head: Option<&AuxHead>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let hv = head.map(|h| h.constants(&mut tape));
        let loss = self.build(&mut tape, f, labels, embeddings, hv)?;
        Ok(tape.value(loss).data()[0])
    }
}

/// `⟨a,b⟩/(‖a‖‖b‖)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    for norm in [na, nb] {
        if !(norm > NORM_EPS) {
            return Err(Error::DegenerateVector {
                norm,
                eps: NORM_EPS,
            });
        }
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// `mean_b (1 - ⟨φ(y_b), f_b/‖f_b‖⟩)` for unit-norm target rows.
pub fn cosine_loss(tape: &mut Tape, features: Var, targets: Var) -> Result<Var> {
    let psi = tape.l2_normalize(features)?;
    cosine_term(tape, psi, targets)
}

fn cosine_term(tape: &mut Tape, normalized: Var, targets: Var) -> Result<Var> {
    let prod = tape.mul(normalized, targets)?;
    let sims = tape.sum_last(prod)?;
    let mean_sim = tape.mean(sims)?;
    let neg = tape.neg(mean_sim)?;
    tape.add_scalar(neg, 1.0)
}

/// `mean_b ‖f_b - φ(y_b)‖²`.
pub fn mse_loss(tape: &mut Tape, features: Var, targets: Var) -> Result<Var> {
    let diff = tape.sub(features, targets)?;
    let sq = tape.mul(diff, diff)?;
    let per_sample = tape.sum_last(sq)?;
    tape.mean(per_sample)
}

/// Target distributions with `1-ε` on the true class and `ε/(n-1)` elsewhere.
pub fn smoothed_targets(labels: &[usize], num_classes: usize, eps: f64) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::InvalidTensor("empty batch".into()));
    }
    let off = if num_classes > 1 {
        eps / (num_classes - 1) as f64
    } else {
        0.0
    };
    let mut data = vec![off; labels.len() * num_classes];
    for (row, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::Label { label, num_classes });
        }
        data[row * num_classes + label] = 1.0 - eps;
    }
    Tensor::matrix(labels.len(), num_classes, data)
}

/// `-mean_b ⟨q_b, log softmax(z_b)⟩` with label-smoothed targets `q`.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let [batch, n] = shape[..] else {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len(), 0]));
    };
    if batch != labels.len() {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len(), n]));
    }
    let q = tape.constant(smoothed_targets(labels, n, eps)?);
    let logp = tape.log_softmax(logits)?;
    let prod = tape.mul(q, logp)?;
    let per_sample = tape.sum_last(prod)?;
    let mean = tape.mean(per_sample)?;
    tape.neg(mean)
}

/// Cosine term on `ψ(f)` plus `λ` times cross-entropy of the head applied to `ψ(f)`.
pub fn cosine_plus_xent_loss(
    tape: &mut Tape,
    features: Var,
    labels: &[usize],
    targets: Var,
    head: HeadVars,
    lambda: f64,
) -> Result<Var> {
    let psi = tape.l2_normalize(features)?;
    let cos = cosine_term(tape, psi, targets)?;
    let logits = head.apply(tape, psi)?;
    let xent = cross_entropy_loss(tape, logits, labels, 0.0)?;
    let weighted = tape.scale(xent, lambda)?;
    tape.add(cos, weighted)
}

/// Fully-connected classification layer on normalized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl HeadVars {
    pub fn apply(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let z = tape.matmul(input, self.weight)?;
        tape.add_bias(z, self.bias)
    }
}

impl AuxHead {
    /// Weights uniform in `[-1/√d, 1/√d]`, bias zero.
    pub fn init(dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::Config("auxiliary head needs positive sizes".into()));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = (0..dim * num_classes)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Ok(Self {
            weight: Tensor::matrix(dim, num_classes, weight)?,
            bias: Tensor::zeros(&[num_classes]),
        })
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn register(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }

    fn constants(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            weight: tape.constant(self.weight.clone()),
            bias: tape.constant(self.bias.clone()),
        }
    }

    /// Logits for already-normalized features.
    pub fn logits(&self, normalized: &Tensor) -> Result<Tensor> {
        normalized.matmul(&self.weight)?.add_row_vector(&self.bias)
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Loss values on a square grid of 2-D feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `values[i * ys.len() + j]` is the loss at `(xs[i], ys[j])`; `None` where undefined.
    pub values: Vec<Option<f64>>,
}

impl SurfaceGrid {
    pub fn at(&self, x: f64, y: f64) -> Option<Option<f64>> {
        let i = self.xs.iter().position(|&v| v == x)?;
        let j = self.ys.iter().position(|&v| v == y)?;
        Some(self.values[i * self.ys.len() + j])
    }

    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "x,y,loss")?;
        for (i, x) in self.xs.iter().enumerate() {
            for (j, y) in self.ys.iter().enumerate() {
                match self.values[i * self.ys.len() + j] {
                    Some(v) => writeln!(w, "{x},{y},{v}")?,
                    None => writeln!(w, "{x},{y},nan")?,
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// `resolution` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, resolution: usize) -> Vec<f64> {
    match resolution {
        0 => Vec::new(),
        1 => vec![lo],
        r => (0..r)
            .map(|i| lo + (hi - lo) * i as f64 / (r - 1) as f64)
            .collect(),
    }
}

/// Evaluates a 2-class loss at every point of `[lo, hi]²` with class `target`
/// (0 means the one-hot target `[1, 0]`).
pub fn loss_surface_grid(
    spec: &LossSpec,
    target: usize,
    bounds: (f64, f64),
    resolution: usize,
) -> Result<SurfaceGrid> {
    if spec.num_classes != 2 {
        return Err(Error::Config(
            "loss surfaces are 2-D: num_classes must be 2".into(),
        ));
    }
    if spec.kind == LossKind::CosinePlusXent {
        return Err(Error::Config(
            "loss surfaces support cosine, cross_entropy and mse".into(),
        ));
    }
    if resolution < 2 {
        return Err(Error::Config(
            "surface resolution must be at least 2".into(),
        ));
    }
    let embeddings = EmbeddingMatrix::onehot(2)?;
    let xs = linspace(bounds.0, bounds.1, resolution);
    let ys = xs.clone();
    let mut values = Vec::with_capacity(xs.len() * ys.len());
    for &x in &xs {
        for &y in &ys {
            let f = Tensor::matrix(1, 2, vec![x, y])?;
            match spec.evaluate(&f, &[target], &embeddings, None) {
                Ok(v) => values.push(Some(v)),
                Err(Error::DegenerateVector { .. }) => values.push(None),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(SurfaceGrid { xs, ys, values })
}
