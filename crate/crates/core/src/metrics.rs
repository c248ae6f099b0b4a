//! Task metrics, exit failure statistics, threshold sweeps and exit-layer
//! histograms.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::exit::{simulate_batch, ExitAssignment, Threshold};
use crate::model::{LayerOutputs, MultiExitModel};
use crate::signals::{signals_for_batch, SignalKind, SignalMatrix};

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions, {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Binary F1 with class 1 as positive; 0 when precision + recall is 0.
pub fn f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p == 1, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fnn == 0 { 0.0 } else { tp as f64 / (tp + fnn) as f64 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mean of F1 and accuracy, as reported for tasks scored with both.
pub fn mean_f1_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    Ok((f1(preds, labels)? + accuracy(preds, labels)?) / 2.0)
}

/// Exit-decision failure rates over reached internal layers.
///
/// A decision point is a `(sample, layer)` pair with `layer < M` that the
/// sample actually reaches. Premature: exits taken where the layer's
/// prediction is wrong. Delayed: continues taken where it is right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRates {
    pub premature: f64,
    pub delayed: f64,
    pub incorrect_points: usize,
    pub correct_points: usize,
    /// No incorrect decision points; `premature` is 0 by convention.
    pub premature_undefined: bool,
    /// No correct decision points; `delayed` is 0 by convention.
    pub delayed_undefined: bool,
}

pub fn failure_rates(
    outputs: &LayerOutputs,
    labels: &[usize],
    assignment: &ExitAssignment,
) -> Result<FailureRates> {
    if labels.len() != outputs.samples || assignment.len() != outputs.samples {
        return Err(Error::Shape("labels, outputs and exits differ in length".into()));
    }
    let m_total = outputs.layers;
    let (mut wrong, mut wrong_exit, mut right, mut right_continue) = (0, 0, 0, 0);
    for (n, (&y, &m_star)) in labels.iter().zip(&assignment.exit_layers).enumerate() {
        for m in 1..=m_star.min(m_total - 1) {
            let exits = m == m_star;
            if outputs.prediction(n, m - 1) == y {
                right += 1;
                right_continue += usize::from(!exits);
            } else {
                wrong += 1;
                wrong_exit += usize::from(exits);
            }
        }
    }
    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(FailureRates {
        premature: rate(wrong_exit, wrong),
        delayed: rate(right_continue, right),
        incorrect_points: wrong,
        correct_points: right,
        premature_undefined: wrong == 0,
        delayed_undefined: right == 0,
    })
}

/// Metrics of early-exit inference at one threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub speedup: f64,
    pub premature_rate: f64,
    pub delayed_rate: f64,
    /// `histogram[m - 1]` samples exit at layer `m`.
    pub histogram: Vec<usize>,
}

/// Predictions taken from each sample's exiting classifier.
pub fn exit_predictions(outputs: &LayerOutputs, assignment: &ExitAssignment) -> Vec<usize> {
    assignment
        .exit_layers
        .iter()
        .enumerate()
        .map(|(n, &m)| outputs.prediction(n, m - 1))
        .collect()
}

pub fn evaluate_at(
    outputs: &LayerOutputs,
    labels: &[usize],
    signals: &SignalMatrix,
    tau: Threshold,
) -> Result<EvalReport> {
    let assignment = simulate_batch(signals, tau);
    let preds = exit_predictions(outputs, &assignment);
    let rates = failure_rates(outputs, labels, &assignment)?;
    Ok(EvalReport {
        threshold: tau.value(),
        accuracy: accuracy(&preds, labels)?,
        f1: f1(&preds, labels)?,
        speedup: assignment.speedup()?,
        premature_rate: rates.premature,
        delayed_rate: rates.delayed,
        histogram: assignment.counts,
    })
}

/// Accuracy of the classifier at 1-based layer `m` on every sample.
pub fn layer_accuracy(outputs: &LayerOutputs, labels: &[usize], m: usize) -> Result<f64> {
    if m == 0 || m > outputs.layers {
        return Err(invalid(format!("layer {m} outside [1, {}]", outputs.layers)));
    }
    let preds: Vec<usize> = (0..outputs.samples).map(|n| outputs.prediction(n, m - 1)).collect();
    accuracy(&preds, labels)
}

/// Metric values read off a curve at a given speed-up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub speedup: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub premature_rate: f64,
    pub delayed_rate: f64,
}

impl From<&EvalReport> for CurvePoint {
    fn from(r: &EvalReport) -> Self {
        Self {
            speedup: r.speedup,
            accuracy: r.accuracy,
            f1: r.f1,
            premature_rate: r.premature_rate,
            delayed_rate: r.delayed_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub kind: SignalKind,
    pub points: Vec<EvalReport>,
}

pub const CURVE_CSV_HEADER: &str = "threshold,speedup,accuracy,f1,premature_rate,delayed_rate";

impl TradeoffCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CURVE_CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                p.threshold, p.speedup, p.accuracy, p.f1, p.premature_rate, p.delayed_rate
            );
        }
        out
    }

    /// Linear interpolation between the two curve points whose speed-ups
    /// bracket `target`. `None` if the curve never reaches `target`.
    pub fn at_speedup(&self, target: f64) -> Option<CurvePoint> {
        let mut pts: Vec<CurvePoint> = self.points.iter().map(CurvePoint::from).collect();
        pts.sort_by(|a, b| a.speedup.total_cmp(&b.speedup));
        if let Some(p) = pts.iter().find(|p| p.speedup == target) {
            return Some(*p);
        }
        pts.windows(2).find_map(|w| {
            let (a, b) = (w[0], w[1]);
            if !(a.speedup < target && target < b.speedup) {
                return None;
            }
            let t = (target - a.speedup) / (b.speedup - a.speedup);
            let lerp = |x: f64, y: f64| x + t * (y - x);
            Some(CurvePoint {
                speedup: target,
                accuracy: lerp(a.accuracy, b.accuracy),
                f1: lerp(a.f1, b.f1),
                premature_rate: lerp(a.premature_rate, b.premature_rate),
                delayed_rate: lerp(a.delayed_rate, b.delayed_rate),
            })
        })
    }
}

/// One full-batch forward pass, then an [`EvalReport`] per grid threshold.
pub fn sweep_tradeoff(
    model: &MultiExitModel,
    data: &Dataset,
    kind: SignalKind,
    grid: &[f64],
) -> Result<TradeoffCurve> {
    if grid.is_empty() {
        return Err(invalid("empty threshold grid"));
    }
    if data.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let outputs = model.forward_all(&data.features)?;
    let signals = signals_for_batch(&outputs, kind)?;
    let points = grid
        .iter()
        .map(|&t| evaluate_at(&outputs, &data.labels, &signals, Threshold::new(t)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(TradeoffCurve { kind, points })
}

/// `½ Σ |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape("distributions differ in length".into()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitHistograms {
    pub counts_a: Vec<usize>,
    pub counts_b: Vec<usize>,
    pub dist_a: Vec<f64>,
    pub dist_b: Vec<f64>,
    pub tv_distance: f64,
}

impl ExitHistograms {
    pub fn from_counts(counts_a: Vec<usize>, counts_b: Vec<usize>) -> Result<Self> {
        let norm = |c: &[usize]| -> Result<Vec<f64>> {
            let total: usize = c.iter().sum();
            if total == 0 {
                return Err(Error::EmptyEvaluation);
            }
            Ok(c.iter().map(|&x| x as f64 / total as f64).collect())
        };
        let dist_a = norm(&counts_a)?;
        let dist_b = norm(&counts_b)?;
        let tv_distance = total_variation(&dist_a, &dist_b)?;
        Ok(Self {
            counts_a,
            counts_b,
            dist_a,
            dist_b,
            tv_distance,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,count_a,count_b\n");
        for (m, (a, b)) in self.counts_a.iter().zip(&self.counts_b).enumerate() {
            let _ = writeln!(out, "{},{a},{b}", m + 1);
        }
        out
    }
}

pub fn exit_counts(
    model: &MultiExitModel,
    data: &Dataset,
    kind: SignalKind,
    tau: Threshold,
) -> Result<Vec<usize>> {
    let outputs = model.forward_all(&data.features)?;
    let signals = signals_for_batch(&outputs, kind)?;
    Ok(simulate_batch(&signals, tau).counts)
}

pub fn exit_histograms(
    model: &MultiExitModel,
    a: &Dataset,
    b: &Dataset,
    kind: SignalKind,
    tau: Threshold,
) -> Result<ExitHistograms> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    ExitHistograms::from_counts(
        exit_counts(model, a, kind, tau)?,
        exit_counts(model, b, kind, tau)?,
    )
}
