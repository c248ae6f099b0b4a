//! Threshold-based exit decisions and the layer-saving speed-up ratio.
//!
//! Layers are 1-based throughout this module. The final layer never tests
//! its signal: a sample that reaches it always exits there.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{InferenceCost, MultiExitModel};
use crate::signals::{Direction, SignalKind, SignalMatrix};
use crate::tensor::{argmax, softmax};

/// Exit threshold. Infinite values are allowed as "never exit early" /
/// "always exit" sentinels; NaN is not.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_nan() {
            return Err(invalid("threshold is NaN"));
        }
        Ok(Self(tau))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Whether `signal` satisfies the exit condition (strict comparison).
    pub fn fires(self, signal: f64, direction: Direction) -> bool {
        match direction {
            Direction::DifficultyPositive => signal < self.0,
            Direction::DifficultyNegative => signal > self.0,
        }
    }
}

/// Smallest internal layer whose signal fires, else the final layer.
pub fn exit_layer(signal_row: &[f64], tau: Threshold, direction: Direction) -> usize {
    let m = signal_row.len();
    signal_row[..m.saturating_sub(1)]
        .iter()
        .position(|&s| tau.fires(s, direction))
        .map_or(m, |i| i + 1)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitAssignment {
    /// Exit layer per sample, in `[1, M]`.
    pub exit_layers: Vec<usize>,
    /// `counts[m - 1]` samples exit at layer `m`.
    pub counts: Vec<usize>,
}

impl ExitAssignment {
    pub fn from_layers(exit_layers: Vec<usize>, num_layers: usize) -> Result<Self> {
        let mut counts = vec![0; num_layers];
        for &l in &exit_layers {
            if l == 0 || l > num_layers {
                return Err(invalid(format!("exit layer {l} outside [1, {num_layers}]")));
            }
            counts[l - 1] += 1;
        }
        Ok(Self {
            exit_layers,
            counts,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.exit_layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exit_layers.is_empty()
    }

    pub fn speedup(&self) -> Result<f64> {
        speedup_ratio(&self.counts, self.num_layers())
    }
}

pub fn simulate_batch(signals: &SignalMatrix, tau: Threshold) -> ExitAssignment {
    let dir = signals.direction();
    let layers = (0..signals.samples)
        .map(|n| exit_layer(signals.row(n), tau, dir))
        .collect();
    ExitAssignment::from_layers(layers, signals.layers).expect("exit_layer stays in range")
}

/// `Σ M·N_m / Σ m·N_m` where `counts[m - 1] = N_m`.
pub fn speedup_ratio(counts: &[usize], num_layers: usize) -> Result<f64> {
    if counts.len() != num_layers {
        return Err(Error::Shape(format!(
            "{} counts for {num_layers} layers",
            counts.len()
        )));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let executed: usize = counts.iter().enumerate().map(|(i, &c)| (i + 1) * c).sum();
    Ok((num_layers * total) as f64 / executed as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyExit {
    pub label: usize,
    pub exit_layer: usize,
    pub probs: Vec<f64>,
    pub cost: InferenceCost,
}

/// Batch-size-1 inference: runs layers one at a time and stops at the first
/// layer whose signal fires.
pub fn infer_early_exit(
    model: &MultiExitModel,
    x: &[f64],
    kind: SignalKind,
    tau: Threshold,
) -> Result<EarlyExit> {
    let m = model.num_layers();
    let mut runner = model.runner(x)?;
    while let Some(step) = runner.step()? {
        let last = step.layer == m;
        if last || tau.fires(kind.eval(&step.logits)?, kind.direction()) {
            let probs = softmax(&step.logits);
            return Ok(EarlyExit {
                label: argmax(&probs),
                exit_layer: step.layer,
                probs,
                cost: runner.cost(),
            });
        }
    }
    unreachable!("final layer always exits")
}
