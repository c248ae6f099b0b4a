//! Per-sample, per-layer exit signals.
//!
//! Entropy and normalized energy rise with sample difficulty, so a sample
//! exits once they drop below the threshold. The softmax score falls with
//! difficulty and exits once it rises above the threshold.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::LayerOutputs;
use crate::tensor::logsumexp;

const DISTRIBUTION_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Larger signal means harder sample; exit when signal < threshold.
    DifficultyPositive,
    /// Larger signal means easier sample; exit when signal > threshold.
    DifficultyNegative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Entropy,
    SoftmaxScore,
    EnergyNormalized,
}

impl SignalKind {
    pub const ALL: [SignalKind; 3] = [
        SignalKind::Entropy,
        SignalKind::SoftmaxScore,
        SignalKind::EnergyNormalized,
    ];

    pub fn direction(self) -> Direction {
        match self {
            SignalKind::Entropy | SignalKind::EnergyNormalized => Direction::DifficultyPositive,
            SignalKind::SoftmaxScore => Direction::DifficultyNegative,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SignalKind::Entropy => "entropy",
            SignalKind::SoftmaxScore => "softmax_score",
            SignalKind::EnergyNormalized => "energy_normalized",
        }
    }

    /// Signal value from a logit row.
    pub fn eval(self, logits: &[f64]) -> Result<f64> {
        match self {
            SignalKind::EnergyNormalized => normalized_energy(logits),
            SignalKind::Entropy => entropy_signal(&crate::tensor::softmax(logits)),
            SignalKind::SoftmaxScore => softmax_signal(&crate::tensor::softmax(logits)),
        }
    }
}

impl std::str::FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(SignalKind::Entropy),
            "softmax_score" | "softmax" => Ok(SignalKind::SoftmaxScore),
            "energy_normalized" | "energy" => Ok(SignalKind::EnergyNormalized),
            other => Err(Error::InvalidArgument(format!("unknown signal kind {other:?}"))),
        }
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty".into()));
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidDistribution("negative or non-finite entry".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::InvalidDistribution(format!("sums to {s}")));
    }
    Ok(())
}

/// `-Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn entropy_signal(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(-p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>())
}

/// Largest class probability.
pub fn softmax_signal(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Raw energy `-logsumexp(logits)`. Lower means easier.
pub fn energy_signal(logits: &[f64]) -> Result<f64> {
    Ok(-logsumexp(logits)?)
}

/// Energy squashed into `(0, 1)` by `1 / (1 + exp(-E))`.
pub fn normalized_energy(logits: &[f64]) -> Result<f64> {
    let e = energy_signal(logits)?;
    Ok(1.0 / (1.0 + (-e).exp()))
}

/// `samples x layers` signal values of one kind, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalMatrix {
    pub kind: SignalKind,
    pub samples: usize,
    pub layers: usize,
    pub values: Vec<f64>,
}

impl SignalMatrix {
    pub fn new(kind: SignalKind, samples: usize, layers: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != samples * layers {
            return Err(Error::Shape(format!(
                "{} values for {samples}x{layers}",
                values.len()
            )));
        }
        Ok(Self {
            kind,
            samples,
            layers,
            values,
        })
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.layers..(n + 1) * self.layers]
    }

    pub fn get(&self, n: usize, m: usize) -> f64 {
        self.values[n * self.layers + m]
    }

    pub fn direction(&self) -> Direction {
        self.kind.direction()
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        self.values.iter().fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }
}

pub fn signals_for_batch(outputs: &LayerOutputs, kind: SignalKind) -> Result<SignalMatrix> {
    let mut values = Vec::with_capacity(outputs.samples * outputs.layers);
    for n in 0..outputs.samples {
        for m in 0..outputs.layers {
            values.push(kind.eval(outputs.logits_at(n, m))?);
        }
    }
    SignalMatrix::new(kind, outputs.samples, outputs.layers, values)
}

/// Differentiable per-row signal of `logits` (`[N, C]`), shape `[N]`.
///
/// The softmax score gathers the probability of the (detached) argmax class.
/// Normalized energy is built as `0.5 + 0.5·tanh(E/2)`, which equals the
/// logistic form.
pub fn signal_graph(g: &mut Graph, logits: Var, kind: SignalKind) -> Result<Var> {
    match kind {
        SignalKind::EnergyNormalized => {
            let lse = g.logsumexp_rows(logits)?;
            let half_e = g.scale(lse, -0.5);
            let t = g.tanh(half_e);
            let s = g.scale(t, 0.5);
            Ok(g.add_scalar(s, 0.5))
        }
        SignalKind::Entropy => {
            let lse = g.logsumexp_rows(logits)?;
            let p = g.softmax_rows(logits);
            let pf = g.mul(p, logits)?;
            let expected = g.sum_rows(pf);
            g.sub(lse, expected)
        }
        SignalKind::SoftmaxScore => {
            let idx = g.value(logits).argmax_rows();
            let p = g.softmax_rows(logits);
            g.gather(p, &idx)
        }
    }
}
