//! SGD with the warm-restart cosine schedule and global-norm gradient clipping.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The learning-rate grid searched per loss when no fixed `lr_max` is given.
pub const DEFAULT_LR_GRID: [f64; 8] = [2.5, 1.0, 0.5, 0.1, 0.05, 0.01, 0.005, 0.001];

/// Cosine annealing from `lr_max` to `lr_min` within each cycle; cycle
/// lengths start at `base_cycle_epochs` and double after every cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdrSchedule {
    pub lr_max: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_base_cycle")]
    pub base_cycle_epochs: usize,
    #[serde(default = "default_num_cycles")]
    pub num_cycles: usize,
}

fn default_lr_min() -> f64 {
    1e-6
}
fn default_base_cycle() -> usize {
    12
}
fn default_num_cycles() -> usize {
    5
}

impl SgdrSchedule {
    /// 5 cycles of 12, 24, 48, 96 and 192 epochs annealed down to 1e-6.
    pub fn new(lr_max: f64) -> Self {
        Self {
            lr_max,
            lr_min: default_lr_min(),
            base_cycle_epochs: default_base_cycle(),
            num_cycles: default_num_cycles(),
        }
    }

    pub fn with_cycles(mut self, base_cycle_epochs: usize, num_cycles: usize) -> Self {
        self.base_cycle_epochs = base_cycle_epochs;
        self.num_cycles = num_cycles;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max.is_finite() && self.lr_max > 0.0) {
            return Err(Error::Config(format!(
                "lr_max must be positive, got {}",
                self.lr_max
            )));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "lr_min must be in [0, lr_max], got {}",
                self.lr_min
            )));
        }
        if self.base_cycle_epochs == 0 || self.num_cycles == 0 || self.num_cycles > 20 {
            return Err(Error::Config(
                "schedule needs base_cycle_epochs >= 1 and 1..=20 cycles".into(),
            ));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.base_cycle_epochs * ((1 << self.num_cycles) - 1)
    }

    pub fn cycle_lengths(&self) -> Vec<usize> {
        (0..self.num_cycles)
            .map(|c| self.base_cycle_epochs << c)
            .collect()
    }

    /// Epoch index at which each cycle ends (exclusive), e.g. `[12, 36, 84, 180, 372]`.
    pub fn cycle_boundaries(&self) -> Vec<usize> {
        self.cycle_lengths()
            .into_iter()
            .scan(0, |end, len| {
                *end += len;
                Some(*end)
            })
            .collect()
    }

    /// `(start epoch, length)` of the cycle containing `epoch`.
    pub fn cycle_of(&self, epoch: usize) -> Result<(usize, usize)> {
        let mut start = 0;
        for len in self.cycle_lengths() {
            if epoch < start + len {
                return Ok((start, len));
            }
            start += len;
        }
        Err(Error::ScheduleEnd {
            epoch,
            total: self.total_epochs(),
        })
    }

    /// Closed form at continuous position `t ∈ [0, cycle_len]` inside a cycle.
    pub fn annealed(&self, t: f64, cycle_len: f64) -> f64 {
        self.lr_min
            + 0.5
                * (self.lr_max - self.lr_min)
                * (1.0 + (std::f64::consts::PI * t / cycle_len).cos())
    }

    /// Learning rate for a given step, annealed within the epoch as well.
    pub fn lr_at(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> Result<f64> {
        let (start, len) = self.cycle_of(epoch)?;
        let frac = if steps_per_epoch == 0 {
            0.0
        } else {
            step as f64 / steps_per_epoch as f64
        };
        let t = (epoch - start) as f64 + frac;
        Ok(self.annealed(t, len as f64))
    }
}

/// Named cycle layouts for command-line use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleProfile {
    /// 12-epoch base cycle, 5 cycles: 372 epochs.
    Paper,
    /// 2-epoch base cycle, 3 cycles: 14 epochs.
    Quick,
    Custom {
        base_cycle_epochs: usize,
        num_cycles: usize,
    },
}

impl ScheduleProfile {
    pub fn cycles(self) -> (usize, usize) {
        match self {
            ScheduleProfile::Paper => (12, 5),
            ScheduleProfile::Quick => (2, 3),
            ScheduleProfile::Custom {
                base_cycle_epochs,
                num_cycles,
            } => (base_cycle_epochs, num_cycles),
        }
    }

    pub fn schedule(self, lr_max: f64) -> SgdrSchedule {
        let (base, cycles) = self.cycles();
        SgdrSchedule::new(lr_max).with_cycles(base, cycles)
    }
}

impl FromStr for ScheduleProfile {
    type Err = Error;

    /// `paper`, `quick`, or `BASE:CYCLES`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ScheduleProfile::Paper),
            "quick" => Ok(ScheduleProfile::Quick),
            other => {
                let parsed = other
                    .split_once(':')
                    .and_then(|(b, c)| Some((b.trim().parse().ok()?, c.trim().parse().ok()?)));
                match parsed {
                    Some((base_cycle_epochs, num_cycles)) => Ok(ScheduleProfile::Custom {
                        base_cycle_epochs,
                        num_cycles,
                    }),
                    None => Err(Error::Config(format!(
                        "unknown schedule profile `{other}` (expected paper, quick or BASE:CYCLES)"
                    ))),
                }
            }
        }
    }
}

impl fmt::Display for ScheduleProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleProfile::Paper => f.write_str("paper"),
            ScheduleProfile::Quick => f.write_str("quick"),
            ScheduleProfile::Custom {
                base_cycle_epochs,
                num_cycles,
            } => write!(f, "{base_cycle_epochs}:{num_cycles}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub max_norm: f64,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self { max_norm: 10.0 }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients together so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], spec: ClipSpec) -> Result<f64> {
    if !(spec.max_norm > 0.0) {
        return Err(Error::Config(format!(
            "max_norm must be > 0, got {}",
            spec.max_norm
        )));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::Divergence(format!("gradient norm is {norm}")));
    }
    if norm > spec.max_norm {
        let scale = spec.max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

/// `θ ← θ - lr·v` with `v ← momentum·v + grad` (plain SGD at momentum 0).
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::shape("sgd_step", &[params.len()], &[grads.len()]));
        }
        if self.momentum == 0.0 {
            return sgd_step(params, grads, lr);
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::full_like(g, 0.0)).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if !p.same_shape(g) || !v.same_shape(g) {
                return Err(Error::shape("sgd_step", p.shape(), g.shape()));
            }
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// One plain SGD update; errors before touching anything if shapes disagree.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    lr: f64,
) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() {
        return Err(Error::shape("sgd_step", &[params.len()], &[grads.len()]));
    }
    if let Some((p, g)) = params.iter().zip(grads).find(|(p, g)| !p.same_shape(g)) {
        return Err(Error::shape("sgd_step", p.shape(), g.shape()));
    }
    for (p, g) in params.into_iter().zip(grads) {
        for (pi, gi) in p.data_mut().iter_mut().zip(g.data()) {
            *pi -= lr * gi;
        }
    }
    Ok(())
}
