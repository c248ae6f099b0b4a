//! Residual feed-forward stack with an unshared linear classifier after every
//! layer.
//!
//! Layer `m` (1-based) applies `h <- h + W2·act(W1·h + b1) + b2` and then its
//! own head. The last head is the final classifier; the others are internal
//! exits. An input projection maps raw features to the hidden width first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{softmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(invalid(format!("unknown activation {other:?}"))),
        }
    }
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            hidden: 32,
            input_dim: 16,
            num_classes: 2,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(invalid(
                "need at least one internal and one final classifier",
            ));
        }
        if self.hidden == 0 || self.input_dim == 0 {
            return Err(invalid("hidden width and input dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("shape matches"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add(&self.bias)
    }

    fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub inner: Linear,
    pub outer: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiExitModel {
    config: ModelConfig,
    input: Linear,
    blocks: Vec<Block>,
    heads: Vec<Linear>,
}

/// Values of every layer for a batch, laid out `[sample][layer][...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutputs {
    pub samples: usize,
    pub layers: usize,
    pub width: usize,
    pub classes: usize,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl LayerOutputs {
    /// Assembles outputs from per-layer `[N, width]` hidden states and
    /// `[N, C]` logits.
    pub fn from_layers(hidden: &[Tensor], logits: &[Tensor]) -> Result<Self> {
        let layers = logits.len();
        if layers == 0 || hidden.len() != layers {
            return Err(Error::Shape("need one hidden and one logit tensor per layer".into()));
        }
        let samples = logits[0].outer();
        let classes = logits[0].last_dim();
        let width = hidden[0].last_dim();
        let mut out = Self {
            samples,
            layers,
            width,
            classes,
            hidden: vec![0.0; samples * layers * width],
            logits: vec![0.0; samples * layers * classes],
            probs: vec![0.0; samples * layers * classes],
        };
        for (m, (h, f)) in hidden.iter().zip(logits).enumerate() {
            let p = f.softmax_rows();
            for n in 0..samples {
                let hi = (n * layers + m) * width;
                out.hidden[hi..hi + width].copy_from_slice(h.row(n));
                let li = (n * layers + m) * classes;
                out.logits[li..li + classes].copy_from_slice(f.row(n));
                out.probs[li..li + classes].copy_from_slice(p.row(n));
            }
        }
        Ok(out)
    }

    /// Logits of sample `n` at 0-based layer index `m`.
    pub fn logits_at(&self, n: usize, m: usize) -> &[f64] {
        let i = (n * self.layers + m) * self.classes;
        &self.logits[i..i + self.classes]
    }

    pub fn probs_at(&self, n: usize, m: usize) -> &[f64] {
        let i = (n * self.layers + m) * self.classes;
        &self.probs[i..i + self.classes]
    }

    pub fn hidden_at(&self, n: usize, m: usize) -> &[f64] {
        let i = (n * self.layers + m) * self.width;
        &self.hidden[i..i + self.width]
    }

    /// Argmax label of sample `n` at 0-based layer `m`.
    pub fn prediction(&self, n: usize, m: usize) -> usize {
        crate::tensor::argmax(self.probs_at(n, m))
    }
}

/// Graph handles produced by [`MultiExitModel::forward_graph`].
#[derive(Clone, Debug)]
pub struct GraphForward {
    /// Parameter leaves, in [`MultiExitModel::params_mut`] order.
    pub params: Vec<Var>,
    pub hidden: Vec<Var>,
    pub logits: Vec<Var>,
}

impl MultiExitModel {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = config.hidden;
        let input = Linear::glorot(config.input_dim, w, &mut rng);
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                inner: Linear::glorot(w, w, &mut rng),
                outer: Linear::glorot(w, w, &mut rng),
            })
            .collect();
        let heads = (0..config.num_layers)
            .map(|_| Linear::glorot(w, config.num_classes, &mut rng))
            .collect();
        Ok(Self {
            config,
            input,
            blocks,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn heads(&self) -> &[Linear] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [Linear] {
        &mut self.heads
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    /// `(name, tensor)` pairs in a fixed order shared with [`Self::params_mut`].
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("input.weight".to_string(), &self.input.weight),
            ("input.bias".to_string(), &self.input.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.inner.weight"), &b.inner.weight));
            out.push((format!("block{i}.inner.bias"), &b.inner.bias));
            out.push((format!("block{i}.outer.weight"), &b.outer.weight));
            out.push((format!("block{i}.outer.bias"), &b.outer.bias));
        }
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("head{i}.weight"), &h.weight));
            out.push((format!("head{i}.bias"), &h.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input.weight, &mut self.input.bias];
        for b in &mut self.blocks {
            out.push(&mut b.inner.weight);
            out.push(&mut b.inner.bias);
            out.push(&mut b.outer.weight);
            out.push(&mut b.outer.bias);
        }
        for h in &mut self.heads {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    /// Rebuilds a model from tensors in [`Self::named_params`] order.
    pub fn from_params(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut model = Self::init(config)?;
        let slots = model.params_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (i, (slot, t)) in slots.into_iter().zip(tensors).enumerate() {
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: expected {:?}, got {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.shape()[1] != self.config.input_dim {
            return Err(Error::Shape(format!(
                "batch {:?} for input dim {}",
                batch.shape(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    fn block_forward(&self, block: &Block, h: &Tensor) -> Result<Tensor> {
        let act = self.config.activation;
        let z = block.inner.apply(h)?.map(|x| act.apply(x));
        h.add(&block.outer.apply(&z)?)
    }

    /// Runs all layers and all heads on `batch` (`[N, input_dim]`).
    pub fn forward_all(&self, batch: &Tensor) -> Result<LayerOutputs> {
        self.check_batch(batch)?;
        let mut h = self.input.apply(batch)?;
        let mut hidden = Vec::with_capacity(self.blocks.len());
        let mut logits = Vec::with_capacity(self.blocks.len());
        for (block, head) in self.blocks.iter().zip(&self.heads) {
            h = self.block_forward(block, &h)?;
            logits.push(head.apply(&h)?);
            hidden.push(h.clone());
        }
        LayerOutputs::from_layers(&hidden, &logits)
    }

    /// Builds the forward pass on `g`, registering every parameter as a leaf.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<GraphForward> {
        self.check_batch(g.value(x))?;
        let mut params = Vec::new();
        let mut leaf = |g: &mut Graph, t: &Tensor| {
            let v = g.param(t.clone());
            params.push(v);
            v
        };
        let lin = |g: &mut Graph, x: Var, w: Var, b: Var| -> Result<Var> {
            let xw = g.matmul(x, w)?;
            g.add(xw, b)
        };

        let iw = leaf(g, &self.input.weight);
        let ib = leaf(g, &self.input.bias);
        let mut block_vars = Vec::new();
        for b in &self.blocks {
            block_vars.push([
                leaf(g, &b.inner.weight),
                leaf(g, &b.inner.bias),
                leaf(g, &b.outer.weight),
                leaf(g, &b.outer.bias),
            ]);
        }
        let head_vars: Vec<[Var; 2]> = self
            .heads
            .iter()
            .map(|h| [leaf(g, &h.weight), leaf(g, &h.bias)])
            .collect();

        let mut h = lin(g, x, iw, ib)?;
        let mut hidden = Vec::new();
        let mut logits = Vec::new();
        for (bv, hv) in block_vars.iter().zip(&head_vars) {
            let pre = lin(g, h, bv[0], bv[1])?;
            let z = match self.config.activation {
                Activation::Relu => g.relu(pre),
                Activation::Tanh => g.tanh(pre),
            };
            let delta = lin(g, z, bv[2], bv[3])?;
            h = g.add(h, delta)?;
            hidden.push(h);
            logits.push(lin(g, h, hv[0], hv[1])?);
        }
        Ok(GraphForward {
            params,
            hidden,
            logits,
        })
    }

    /// Evaluates one sample layer by layer.
    pub fn runner(&self, x: &[f64]) -> Result<LayerRunner<'_>> {
        let batch = Tensor::matrix(1, x.len(), x.to_vec())?;
        self.check_batch(&batch)?;
        let h = self.input.apply(&batch)?;
        let cost = InferenceCost {
            flops: (self.config.input_dim * self.config.hidden) as u64,
            ..Default::default()
        };
        Ok(LayerRunner {
            model: self,
            h,
            next: 0,
            cost,
        })
    }

    /// Class distribution of the classifier at 1-based layer `m`, computing
    /// only layers `1..=m`.
    pub fn predict_at(&self, x: &[f64], m: usize) -> Result<Vec<f64>> {
        if m == 0 || m > self.num_layers() {
            return Err(invalid(format!(
                "layer {m} outside [1, {}]",
                self.num_layers()
            )));
        }
        let mut runner = self.runner(x)?;
        let mut last = Vec::new();
        for _ in 0..m {
            last = runner.step()?.expect("m within range").logits;
        }
        Ok(softmax(&last))
    }
}

/// Multiply-add and component counts for the incremental path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InferenceCost {
    pub blocks: usize,
    pub heads: usize,
    pub flops: u64,
}

/// Incremental single-sample evaluation; never touches layers beyond the
/// last one requested.
pub struct LayerRunner<'a> {
    model: &'a MultiExitModel,
    h: Tensor,
    next: usize,
    cost: InferenceCost,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStep {
    /// 1-based layer index.
    pub layer: usize,
    pub logits: Vec<f64>,
}

impl LayerRunner<'_> {
    /// Runs the next block and its classifier; `None` after the last layer.
    pub fn step(&mut self) -> Result<Option<LayerStep>> {
        let Some(block) = self.model.blocks.get(self.next) else {
            return Ok(None);
        };
        let head = &self.model.heads[self.next];
        self.h = self.model.block_forward(block, &self.h)?;
        let logits = head.apply(&self.h)?.into_data();
        let w = self.model.config.hidden as u64;
        self.cost.blocks += 1;
        self.cost.heads += 1;
        self.cost.flops += 2 * w * w + w * head.out_dim() as u64;
        self.next += 1;
        Ok(Some(LayerStep {
            layer: self.next,
            logits,
        }))
    }

    pub fn cost(&self) -> InferenceCost {
        self.cost
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(m: usize) -> ModelConfig {
        ModelConfig {
            num_layers: m,
            hidden: 16,
            input_dim: 5,
            num_classes: 2,
            activation: Activation::Tanh,
            seed: 11,
        }
    }

    fn batch(n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|i| ((i * 7 % 13) as f64 - 6.0) / 4.0).collect())
            .unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = MultiExitModel::init(cfg(4)).unwrap();
        let b = MultiExitModel::init(cfg(4)).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.named_params() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert_eq!(a.heads().len(), 4);
        assert!(a.heads().iter().all(|h| h.weight.shape() == [16, 2]));
    }

    #[test]
    fn glorot_bound_respected() {
        let m = MultiExitModel::init(cfg(3)).unwrap();
        let a = (6.0f64 / 32.0).sqrt();
        for b in m.blocks() {
            assert!(b.inner.weight.data().iter().all(|v| v.abs() < a));
        }
    }

    #[test]
    fn rejects_single_layer() {
        let err = MultiExitModel::init(cfg(1)).unwrap_err();
        assert!(err.to_string().contains("need at least one internal and one final classifier"));
    }

    #[test]
    fn forward_shapes_and_normalization() {
        let m = MultiExitModel::init(cfg(4)).unwrap();
        let out = m.forward_all(&batch(3, 5)).unwrap();
        assert_eq!(out.logits.len(), 3 * 4 * 2);
        for n in 0..3 {
            for l in 0..4 {
                assert!((out.probs_at(n, l).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert!(m.forward_all(&batch(3, 4)).is_err());
    }

    #[test]
    fn zero_heads_give_uniform() {
        let mut m = MultiExitModel::init(cfg(3)).unwrap();
        for h in m.heads_mut() {
            h.weight = Tensor::zeros(h.weight.shape());
        }
        let out = m.forward_all(&batch(2, 5)).unwrap();
        assert!(out.probs.iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn block_perturbation_is_causal() {
        let m = MultiExitModel::init(cfg(5)).unwrap();
        let x = batch(4, 5);
        let base = m.forward_all(&x).unwrap();
        for k in 0..5 {
            let mut p = m.clone();
            p.blocks_mut()[k].outer.weight.data_mut()[3] += 0.25;
            let out = p.forward_all(&x).unwrap();
            for n in 0..4 {
                for l in 0..5 {
                    let same = base.logits_at(n, l) == out.logits_at(n, l);
                    assert_eq!(same, l < k, "block {k} layer {l}");
                }
            }
        }
    }

    #[test]
    fn heads_are_unshared() {
        let m = MultiExitModel::init(cfg(4)).unwrap();
        let x = batch(3, 5);
        let base = m.forward_all(&x).unwrap();
        let mut p = m.clone();
        p.heads_mut()[1].weight.data_mut()[0] += 1.0;
        let out = p.forward_all(&x).unwrap();
        for n in 0..3 {
            for l in 0..4 {
                assert_eq!(base.logits_at(n, l) == out.logits_at(n, l), l != 1);
            }
        }
    }

    #[test]
    fn incremental_path_matches_batch() {
        let m = MultiExitModel::init(cfg(4)).unwrap();
        let x = batch(3, 5);
        let out = m.forward_all(&x).unwrap();
        for n in 0..3 {
            for l in 1..=4 {
                let p = m.predict_at(x.row(n), l).unwrap();
                for (a, b) in p.iter().zip(out.probs_at(n, l - 1)) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
        assert!(m.predict_at(x.row(0), 0).is_err());
        assert!(m.predict_at(x.row(0), 5).is_err());
    }

    #[test]
    fn flops_grow_linearly() {
        let m = MultiExitModel::init(cfg(6)).unwrap();
        let mut r = m.runner(&[0.1; 5]).unwrap();
        let mut flops = vec![r.cost().flops];
        while r.step().unwrap().is_some() {
            flops.push(r.cost().flops);
        }
        assert_eq!(flops.len(), 7);
        let per_layer = flops[1] - flops[0];
        for w in flops.windows(2) {
            assert_eq!(w[1] - w[0], per_layer);
        }
        assert_eq!(per_layer, 2 * 16 * 16 + 16 * 2);
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let m = MultiExitModel::init(cfg(3)).unwrap();
        let x = batch(4, 5);
        let plain = m.forward_all(&x).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let fw = m.forward_graph(&mut g, xv).unwrap();
        assert_eq!(fw.params.len(), m.named_params().len());
        for (l, &lv) in fw.logits.iter().enumerate() {
            for n in 0..4 {
                assert_eq!(g.value(lv).row(n), plain.logits_at(n, l));
            }
        }
    }
}
