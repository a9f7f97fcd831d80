//! Central finite-difference checks for every tape operation and loss.
//!
//! Non-scalar outputs are reduced with a fixed random weighting, so every
//! output element contributes to the checked scalar. The error of a check
//! is `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all inputs;
//! checks where both norms fall below `1e-8` count as exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embeddings::{EmbeddingKind, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::losses::{AuxHead, LossKind, LossSpec};
use crate::model::{MlpConfig, ModelState, ModelVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_TRIALS: usize = 100;
const NEGLIGIBLE: f64 = 1e-8;

pub const OP_CASES: [&str; 20] = [
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "neg",
    "add_scalar",
    "matmul",
    "relu",
    "exp",
    "log",
    "sum",
    "mean",
    "sum_last",
    "dot",
    "l2_normalize",
    "softmax",
    "log_softmax",
    "slice_rows",
    "concat_rows",
];

pub const LOSS_CASES: [&str; 6] = [
    "loss_cosine",
    "loss_cross_entropy",
    "loss_cross_entropy_smoothed",
    "loss_mse",
    "loss_cosine_plus_xent",
    "mlp_cosine",
];

pub fn all_cases() -> Vec<&'static str> {
    OP_CASES.iter().chain(LOSS_CASES.iter()).copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: DEFAULT_TRIALS,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Relative error between the tape gradient and central differences of
/// `build` with respect to every tensor in `inputs`.
pub fn check_gradient<F>(build: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::NotScalar(tape.shape(out).to_vec()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut diff2 = 0.0;
    let mut an2 = 0.0;
    let mut nu2 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            probe[k].data_mut()[i] = x + step;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x - step;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            diff2 += (a - numeric).powi(2);
            an2 += a * a;
            nu2 += numeric * numeric;
        }
    }
    let (an, nu) = (an2.sqrt(), nu2.sqrt());
    if an < NEGLIGIBLE && nu < NEGLIGIBLE {
        return Ok(0.0);
    }
    Ok(diff2.sqrt() / an.max(nu))
}

pub fn run_case(name: &str, cfg: &GradcheckConfig) -> Result<CaseReport> {
    if !all_cases().contains(&name) {
        return Err(Error::Config(format!("unknown gradcheck case `{name}`")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv(name));
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.trials {
        let err = trial(name, &mut rng, cfg.step)?;
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok(CaseReport {
        name: name.to_string(),
        trials: cfg.trials,
        max_rel_error: worst,
        passed: worst <= cfg.tolerance,
    })
}

pub fn run_suite(names: &[&str], cfg: &GradcheckConfig) -> Result<Vec<CaseReport>> {
    names.iter().map(|n| run_case(n, cfg)).collect()
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Values with `0.1 ≤ |v| < 2`, away from the ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 2.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Scalar `Σ w ⊙ out` for a fixed random `w`.
fn weighted_sum(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    tape.sum(prod)
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<EmbeddingMatrix> {
    let raw = uniform(rng, &[n, d], -1.0, 1.0).l2_normalize()?;
    let names = (0..n).map(|i| format!("c{i}")).collect();
    EmbeddingMatrix::from_rows(names, raw, EmbeddingKind::Semantic)
}

fn trial(name: &str, rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let r = rng.random_range(1..=4);
    let c = rng.random_range(2..=5);
    let shape = [r, c];
    let x = uniform(rng, &shape, -2.0, 2.0);
    let y = uniform(rng, &shape, -2.0, 2.0);
    let w = uniform(rng, &shape, -1.0, 1.0);
    match name {
        "add" | "sub" | "mul" => check_gradient(
            |t, v| {
                let out = match name {
                    "add" => t.add(v[0], v[1])?,
                    "sub" => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                weighted_sum(t, out, &w)
            },
            &[x, y],
            h,
        ),
        "add_bias" => {
            let b = uniform(rng, &[c], -1.0, 1.0);
            check_gradient(
                |t, v| {
                    let out = t.add_bias(v[0], v[1])?;
                    weighted_sum(t, out, &w)
                },
                &[x, b],
                h,
            )
        }
        "scale" | "neg" | "add_scalar" | "exp" => {
            let k = rng.random_range(-3.0..3.0);
            check_gradient(
                |t, v| {
                    let out = match name {
                        "scale" => t.scale(v[0], k)?,
                        "neg" => t.neg(v[0])?,
                        "add_scalar" => t.add_scalar(v[0], k)?,
                        _ => t.exp(v[0])?,
                    };
                    weighted_sum(t, out, &w)
                },
                &[x],
                h,
            )
        }
        "matmul" => {
            let k = rng.random_range(1..=4);
            let b = uniform(rng, &[c, k], -2.0, 2.0);
            let wk = uniform(rng, &[r, k], -1.0, 1.0);
            check_gradient(
                |t, v| {
                    let out = t.matmul(v[0], v[1])?;
                    weighted_sum(t, out, &wk)
                },
                &[x, b],
                h,
            )
        }
        "relu" => check_gradient(
            |t, v| {
                let out = t.relu(v[0])?;
                weighted_sum(t, out, &w)
            },
            &[off_kink(rng, &shape)],
            h,
        ),
        "log" => check_gradient(
            |t, v| {
                let out = t.log(v[0])?;
                weighted_sum(t, out, &w)
            },
            &[uniform(rng, &shape, 0.2, 3.0)],
            h,
        ),
        "sum" | "mean" => check_gradient(
            |t, v| {
                let wx = weighted_sum(t, v[0], &w)?;
                let sq = t.mul(v[0], v[0])?;
                let reduced = if name == "sum" {
                    t.sum(sq)?
                } else {
                    t.mean(sq)?
                };
                t.add(reduced, wx)
            },
            &[x],
            h,
        ),
        "sum_last" | "l2_normalize" | "softmax" | "log_softmax" => {
            let wr = uniform(rng, &[r], -1.0, 1.0);
            check_gradient(
                |t, v| match name {
                    "sum_last" => {
                        let sq = t.mul(v[0], v[0])?;
                        let out = t.sum_last(sq)?;
                        weighted_sum(t, out, &wr)
                    }
                    "l2_normalize" => {
                        let out = t.l2_normalize(v[0])?;
                        weighted_sum(t, out, &w)
                    }
                    "softmax" => {
                        let out = t.softmax(v[0])?;
                        weighted_sum(t, out, &w)
                    }
                    _ => {
                        let out = t.log_softmax(v[0])?;
                        weighted_sum(t, out, &w)
                    }
                },
                &[x],
                h,
            )
        }
        "dot" => check_gradient(
            |t, v| t.dot(v[0], v[1]),
            &[uniform(rng, &[c], -2.0, 2.0), uniform(rng, &[c], -2.0, 2.0)],
            h,
        ),
        "slice_rows" => {
            let big = uniform(rng, &[r + 2, c], -2.0, 2.0);
            let start = rng.random_range(0..=2);
            check_gradient(
                |t, v| {
                    let out = t.slice_rows(v[0], start, start + r)?;
                    weighted_sum(t, out, &w)
                },
                &[big],
                h,
            )
        }
        "concat_rows" => {
            let w2 = uniform(rng, &[2 * r, c], -1.0, 1.0);
            check_gradient(
                |t, v| {
                    let out = t.concat_rows(&[v[0], v[1]])?;
                    weighted_sum(t, out, &w2)
                },
                &[x, y],
                h,
            )
        }
        "loss_cosine" | "loss_mse" | "loss_cross_entropy" | "loss_cross_entropy_smoothed" => {
            let n = c;
            let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..n)).collect();
            let e = unit_rows(rng, n, c)?;
            let spec = match name {
                "loss_cosine" => LossSpec::new(LossKind::Cosine, n)?,
                "loss_mse" => LossSpec::new(LossKind::Mse, n)?,
                "loss_cross_entropy" => LossSpec::new(LossKind::CrossEntropy, n)?,
                _ => LossSpec::new(LossKind::CrossEntropy, n)?.with_label_smoothing(0.1)?,
            };
            check_gradient(|t, v| spec.build(t, v[0], &labels, &e, None), &[x], h)
        }
        "loss_cosine_plus_xent" => {
            let n = rng.random_range(2..=5);
            let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..n)).collect();
            let e = unit_rows(rng, n, c)?;
            let head = AuxHead::init(c, n, rng.random())?;
            let spec = LossSpec::new(LossKind::CosinePlusXent, n)?.with_lambda(0.1)?;
            check_gradient(
                |t, v| {
                    let hv = crate::losses::HeadVars {
                        weight: v[1],
                        bias: v[2],
                    };
                    spec.build(t, v[0], &labels, &e, Some(hv))
                },
                &[x, head.weight, uniform(rng, &[n], -0.5, 0.5)],
                h,
            )
        }
        "mlp_cosine" => {
            let n = 3;
            let cfg = MlpConfig::new(c, vec![4], n, rng.random());
            let mut model = ModelState::init(cfg)?;
            // Nonzero biases keep the hidden layer alive and the output away from 0.
            for t in model.tensors_mut().skip(1).step_by(2) {
                *t = uniform(rng, t.shape(), 0.2, 1.0);
            }
            let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..n)).collect();
            let e = EmbeddingMatrix::onehot(n)?;
            let spec = LossSpec::new(LossKind::Cosine, n)?;
            let params: Vec<Tensor> = model.tensors().cloned().collect();
            check_gradient(
                |t, v| {
                    let mv = ModelVars::from_vars(v)?;
                    let xv = t.constant(x.clone());
                    let f = model.forward(t, &mv, xv)?;
                    spec.build(t, f, &labels, &e, None)
                },
                &params,
                h,
            )
        }
        other => Err(Error::Config(format!("unknown gradcheck case `{other}`"))),
    }
}
