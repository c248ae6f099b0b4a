#![allow(dead_code)]

use early_exit::autodiff::Graph;
use early_exit::data::{Generator, SyntheticSpec};
use early_exit::exit::Threshold;
use early_exit::metrics::{exit_histograms, sweep_tradeoff, TradeoffCurve};
use early_exit::signals::signals_for_batch;
use early_exit::training::loss::{classification_loss, osc_loss, per_layer_ce, total_loss};
use early_exit::{Activation, Dataset, ModelConfig, MultiExitModel, SignalKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn toy_model(layers: usize, width: usize, dim: usize, seed: u64) -> MultiExitModel {
    MultiExitModel::init(ModelConfig {
        num_layers: layers,
        hidden: width,
        input_dim: dim,
        num_classes: 2,
        activation: Activation::Relu,
        seed,
    })
    .unwrap()
}

pub fn toy_batch(n: usize, dim: usize, classes: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (Tensor::matrix(n, dim, x).unwrap(), y)
}

/// Fixed ingredients of the exit-aware loss for gradient checks.
pub struct LossSetup {
    pub kind: SignalKind,
    pub taus: Vec<Threshold>,
    pub beta: f64,
    pub alpha: f64,
    pub epsilon: f64,
}

/// Total loss and, if asked, its gradient per parameter tensor. Exit layers
/// come from the detached signals of the same forward pass.
pub fn total_loss_eval(
    model: &MultiExitModel,
    x: &Tensor,
    y: &[usize],
    s: &LossSetup,
    with_grad: bool,
) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let fwd = model.forward_graph(&mut g, xv).unwrap();
    let outputs = model.forward_all(x).unwrap();
    let signals = signals_for_batch(&outputs, s.kind).unwrap();
    let ce = per_layer_ce(&mut g, &fwd.logits, y).unwrap();
    let cls = classification_loss(&mut g, &ce, &signals, &s.taus, s.beta).unwrap();
    let osc = osc_loss(&mut g, &fwd.logits, y, s.kind, s.epsilon).unwrap();
    let root = total_loss(&mut g, cls, Some(osc), s.alpha).unwrap();
    let value = g.value(root).item();
    if !with_grad {
        return (value, vec![]);
    }
    g.backward(root).unwrap();
    (value, fwd.params.iter().map(|&p| g.grad_or_zeros(p)).collect())
}

/// Smallest distance between any signal and any threshold.
pub fn crossing_margin(model: &MultiExitModel, x: &Tensor, s: &LossSetup) -> f64 {
    let outputs = model.forward_all(x).unwrap();
    let signals = signals_for_batch(&outputs, s.kind).unwrap();
    signals
        .values
        .iter()
        .flat_map(|v| s.taus.iter().map(move |t| (v - t.value()).abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Largest relative error between the analytic gradient and central
/// differences over every parameter entry.
pub fn max_fd_error(model: &MultiExitModel, x: &Tensor, y: &[usize], s: &LossSetup, h: f64) -> f64 {
    let (_, grads) = total_loss_eval(model, x, y, s, true);
    let mut worst: f64 = 0.0;
    for (i, grad) in grads.iter().enumerate() {
        for j in 0..grad.numel() {
            let mut plus = model.clone();
            plus.params_mut()[i].data_mut()[j] += h;
            let mut minus = model.clone();
            minus.params_mut()[i].data_mut()[j] -= h;
            let fd = (total_loss_eval(&plus, x, y, s, false).0
                - total_loss_eval(&minus, x, y, s, false).0)
                / (2.0 * h);
            worst = worst.max(rel_err(grad.data()[j], fd));
        }
    }
    worst
}

/// The desk-scale mixture task used for the directional comparisons.
pub fn mixture_task(data_seed: u64, split_seed: u64) -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        generator: Generator::GaussianMixture,
        samples: 5000,
        dim: 16,
        classes: 2,
        noise: 1.0,
        boundary_fraction: 0.3,
        margin: 0.25,
        modes_per_class: 6,
        separation: 3.0,
    };
    early_exit::gen_synthetic(&spec, data_seed)
        .unwrap()
        .split(0.2, split_seed)
        .unwrap()
}

/// Dense threshold grid: quantiles of internal-layer signals on `data`,
/// plus both infinite sentinels.
pub fn quantile_grid(model: &MultiExitModel, data: &Dataset, kind: SignalKind, q: usize) -> Vec<f64> {
    let out = model.forward_all(&data.features).unwrap();
    let s = signals_for_batch(&out, kind).unwrap();
    let mut v: Vec<f64> = (0..s.samples)
        .flat_map(|n| s.row(n)[..s.layers - 1].to_vec())
        .collect();
    v.sort_by(f64::total_cmp);
    let mut grid: Vec<f64> = (0..=q).map(|i| v[i * (v.len() - 1) / q]).collect();
    grid.push(f64::NEG_INFINITY);
    grid.push(f64::INFINITY);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

pub fn dev_curve(model: &MultiExitModel, dev: &Dataset, kind: SignalKind) -> TradeoffCurve {
    let grid = quantile_grid(model, dev, kind, 400);
    sweep_tradeoff(model, dev, kind, &grid).unwrap()
}

/// Threshold on `curve` whose speed-up is closest to `target`.
pub fn threshold_near(curve: &TradeoffCurve, target: f64) -> Threshold {
    let p = curve
        .points
        .iter()
        .min_by(|a, b| (a.speedup - target).abs().total_cmp(&(b.speedup - target).abs()))
        .unwrap();
    Threshold::new(p.threshold).unwrap()
}

pub fn tv_at(model: &MultiExitModel, a: &Dataset, b: &Dataset, kind: SignalKind, tau: Threshold) -> f64 {
    exit_histograms(model, a, b, kind, tau).unwrap().tv_distance
}
