//! Graph-building loss terms: weighted multi-exit cross-entropy, the
//! threshold-averaged exit-aware classification loss, the signal calibration
//! hinge, and the plain per-layer baseline.

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::exit::{simulate_batch, Threshold};
use crate::signals::{signal_graph, Direction, SignalKind, SignalMatrix};
use crate::tensor::Tensor;

use super::swm::WeightMatrix;

/// Per-layer `[N]` cross-entropy nodes for `logits` (one `[N, C]` per layer).
pub fn per_layer_ce(g: &mut Graph, logits: &[Var], labels: &[usize]) -> Result<Vec<Var>> {
    logits
        .iter()
        .map(|&l| g.cross_entropy_rows(l, labels))
        .collect()
}

/// `(1/N) Σ_n Σ_m W[n, m] · CE[m][n]`. Weights are constants.
pub fn weighted_ce(g: &mut Graph, ce: &[Var], weights: &WeightMatrix) -> Result<Var> {
    if ce.len() != weights.layers {
        return Err(Error::Shape(format!(
            "{} layers of CE, {} weight columns",
            ce.len(),
            weights.layers
        )));
    }
    let n = weights.samples;
    let mut acc: Option<Var> = None;
    for (m, &layer_ce) in ce.iter().enumerate() {
        if g.value(layer_ce).numel() != n {
            return Err(Error::Shape("CE length differs from weight rows".into()));
        }
        let w = g.constant(Tensor::vector(weights.column(m)));
        let wl = g.mul(layer_ce, w)?;
        let s = g.sum(wl);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    let total = acc.ok_or_else(|| invalid("no layers"))?;
    Ok(g.scale(total, 1.0 / n as f64))
}

fn exit_weights(signals: &SignalMatrix, tau: Threshold, beta: f64) -> Result<WeightMatrix> {
    WeightMatrix::from_assignment(&simulate_batch(signals, tau), beta)
}

/// Classification loss at one threshold: each sample's CE is weighted
/// towards the layer where it would exit under `tau`.
///
/// `signals` must be detached values; exit layers act as constants.
pub fn classification_loss_at_threshold(
    g: &mut Graph,
    ce: &[Var],
    signals: &SignalMatrix,
    tau: Threshold,
    beta: f64,
) -> Result<Var> {
    let w = exit_weights(signals, tau, beta)?;
    weighted_ce(g, ce, &w)
}

/// Mean of [`classification_loss_at_threshold`] over `thresholds`.
///
/// The loss is linear in the weights, so the mean is taken over the weight
/// matrices and a single weighted CE is built.
pub fn classification_loss(
    g: &mut Graph,
    ce: &[Var],
    signals: &SignalMatrix,
    thresholds: &[Threshold],
    beta: f64,
) -> Result<Var> {
    if thresholds.is_empty() {
        return Err(invalid("need at least one threshold"));
    }
    let per_tau = thresholds
        .iter()
        .map(|&t| exit_weights(signals, t, beta))
        .collect::<Result<Vec<_>>>()?;
    let w = WeightMatrix::mean(&per_tau)?;
    weighted_ce(g, ce, &w)
}

/// Hinge on the gap between mean signals of correctly (easy) and incorrectly
/// (hard) predicted samples at one layer. `None` if either group is empty.
pub fn osc_layer_loss(
    g: &mut Graph,
    signal: Var,
    correct: &[bool],
    epsilon: f64,
    direction: Direction,
) -> Result<Option<Var>> {
    if g.value(signal).numel() != correct.len() {
        return Err(Error::Shape("signal and mask lengths differ".into()));
    }
    let n_easy = correct.iter().filter(|&&c| c).count();
    let n_hard = correct.len() - n_easy;
    if n_easy == 0 || n_hard == 0 {
        return Ok(None);
    }
    let group_mean = |g: &mut Graph, want: bool, count: usize| -> Result<Var> {
        let mask = correct
            .iter()
            .map(|&c| if c == want { 1.0 } else { 0.0 })
            .collect();
        let mask = g.constant(Tensor::vector(mask));
        let masked = g.mul(signal, mask)?;
        let s = g.sum(masked);
        Ok(g.scale(s, 1.0 / count as f64))
    };
    let easy = group_mean(g, true, n_easy)?;
    let hard = group_mean(g, false, n_hard)?;
    let gap = match direction {
        Direction::DifficultyPositive => g.sub(easy, hard)?,
        Direction::DifficultyNegative => g.sub(hard, easy)?,
    };
    let shifted = g.add_scalar(gap, epsilon);
    Ok(Some(g.relu(shifted)))
}

/// Mean calibration hinge over internal layers `1..M-1`. Layers with an empty
/// easy or hard group contribute zero but still count in the divisor.
pub fn osc_loss(
    g: &mut Graph,
    logits: &[Var],
    labels: &[usize],
    kind: SignalKind,
    epsilon: f64,
) -> Result<Var> {
    let m = logits.len();
    if m < 2 {
        return Err(invalid("need at least two layers"));
    }
    let mut acc: Option<Var> = None;
    for &layer in &logits[..m - 1] {
        let preds = g.value(layer).argmax_rows();
        if preds.len() != labels.len() {
            return Err(Error::Shape("labels and logits rows differ".into()));
        }
        let correct: Vec<bool> = preds.iter().zip(labels).map(|(p, y)| p == y).collect();
        let signal = signal_graph(g, layer, kind)?;
        if let Some(term) = osc_layer_loss(g, signal, &correct, epsilon, kind.direction())? {
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
    }
    Ok(match acc {
        Some(a) => g.scale(a, 1.0 / (m - 1) as f64),
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// `L_CE + α·L_OSC`. With `α = 0` the calibration term is left out entirely.
pub fn total_loss(g: &mut Graph, ce_loss: Var, osc: Option<Var>, alpha: f64) -> Result<Var> {
    match osc {
        Some(o) if alpha != 0.0 => {
            let scaled = g.scale(o, alpha);
            g.add(ce_loss, scaled)
        }
        _ => Ok(ce_loss),
    }
}

/// `Σ_m w_m · mean_n CE[m][n]`.
pub fn baseline_loss(g: &mut Graph, ce: &[Var], layer_weights: &[f64]) -> Result<Var> {
    if layer_weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(invalid("layer weights must be non-negative"));
    }
    let n = ce.first().map(|&v| g.value(v).numel()).unwrap_or(0);
    weighted_ce(g, ce, &WeightMatrix::broadcast(layer_weights, n))
}

pub fn uniform_layer_weights(num_layers: usize) -> Vec<f64> {
    vec![1.0 / num_layers as f64; num_layers]
}
