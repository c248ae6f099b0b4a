//! Training objectives and the training loop.
//!
//! Each optimizer step runs the forward pass once, reads per-layer signals
//! off the detached logits, and builds either the exit-aware objective
//! (threshold-averaged weighted CE plus the calibration hinge) or the plain
//! uniform multi-exit CE.

pub mod loss;
pub mod swm;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::model::MultiExitModel;
use crate::optim::{adamw_step, lr_at, OptimizerHyper, OptimizerState};
use crate::signals::{SignalKind, SignalMatrix};

use loss::{
    baseline_loss, classification_loss, osc_loss, per_layer_ce, total_loss,
    uniform_layer_weights,
};
use swm::{decay_factor, sample_thresholds, ThresholdRange, ThresholdTracker};

const SHUFFLE_STREAM: u64 = 1;
const THRESHOLD_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Cosee,
    ConventionalUniform,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosee" => Ok(Objective::Cosee),
            "conventional_uniform" | "conventional" => Ok(Objective::ConventionalUniform),
            other => Err(invalid(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub signal: SignalKind,
    /// Weight of the calibration hinge.
    pub alpha: f64,
    /// Final decay factor of the sample weights.
    pub beta0: f64,
    /// Calibration margin.
    pub epsilon: f64,
    /// Thresholds sampled per step.
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Cosee,
            signal: SignalKind::EnergyNormalized,
            alpha: 0.1,
            beta0: 1.0,
            epsilon: 0.3,
            k: 5,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(invalid("alpha must be a finite non-negative number"));
        }
        if !(self.beta0 >= 0.0) || !self.beta0.is_finite() {
            return Err(invalid("beta0 must be a finite non-negative number"));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(invalid("epsilon must be a finite non-negative number"));
        }
        if self.k == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("k, epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid("lr must be positive and weight_decay non-negative"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> u64 {
        samples.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, samples: usize) -> u64 {
        self.steps_per_epoch(samples) * self.epochs as u64
    }

    fn hyper(&self, total_steps: u64) -> OptimizerHyper {
        OptimizerHyper {
            weight_decay: self.weight_decay,
            ..OptimizerHyper::new(self.lr, total_steps)
        }
    }
}

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| invalid(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything besides the parameters needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub global_step: u64,
    pub epoch: usize,
    pub tracker: ThresholdTracker,
    pub shuffle_rng: RngState,
    pub threshold_rng: RngState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub progress: TrainProgress,
    pub optimizer: OptimizerState,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_t: Option<f64>,
    pub loss_total: f64,
    pub loss_ce: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_osc: Option<f64>,
    pub range_lo: f64,
    pub range_hi: f64,
}

pub struct Trainer<'a> {
    model: MultiExitModel,
    data: &'a Dataset,
    config: TrainConfig,
    hyper: OptimizerHyper,
    optimizer: OptimizerState,
    global_step: u64,
    epoch: usize,
    tracker: ThresholdTracker,
    shuffle_rng: ChaCha8Rng,
    threshold_rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(model: MultiExitModel, data: &'a Dataset, config: TrainConfig) -> Result<Self> {
        let stream = |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(s);
            rng
        };
        let progress = TrainProgress {
            global_step: 0,
            epoch: 0,
            tracker: ThresholdTracker::new(ThresholdRange::initial(
                config.signal,
                model.config().num_classes,
            )),
            shuffle_rng: RngState::capture(&stream(SHUFFLE_STREAM)),
            threshold_rng: RngState::capture(&stream(THRESHOLD_STREAM)),
        };
        let optimizer = OptimizerState::new(model.named_params().into_iter().map(|(_, t)| t));
        Self::resume(
            model,
            data,
            config,
            TrainState {
                progress,
                optimizer,
            },
        )
    }

    pub fn resume(
        model: MultiExitModel,
        data: &'a Dataset,
        config: TrainConfig,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mc = model.config();
        if data.dim() != mc.input_dim || data.num_classes != mc.num_classes {
            return Err(Error::Shape(format!(
                "dataset D={} C={} for model D={} C={}",
                data.dim(),
                data.num_classes,
                mc.input_dim,
                mc.num_classes
            )));
        }
        if config.objective == Objective::Cosee && mc.num_layers < 2 {
            return Err(invalid("exit-aware training needs at least two layers"));
        }
        let total = config.total_steps(data.len());
        if state.progress.global_step > total {
            return Err(invalid("saved step beyond the configured schedule"));
        }
        let hyper = config.hyper(total);
        hyper.validate()?;
        Ok(Self {
            model,
            data,
            hyper,
            optimizer: state.optimizer,
            global_step: state.progress.global_step,
            epoch: state.progress.epoch,
            tracker: state.progress.tracker,
            shuffle_rng: state.progress.shuffle_rng.restore()?,
            threshold_rng: state.progress.threshold_rng.restore()?,
            config,
        })
    }

    pub fn model(&self) -> &MultiExitModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            progress: TrainProgress {
                global_step: self.global_step,
                epoch: self.epoch,
                tracker: self.tracker.clone(),
                shuffle_rng: RngState::capture(&self.shuffle_rng),
                threshold_rng: RngState::capture(&self.threshold_rng),
            },
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn into_parts(self) -> (MultiExitModel, TrainState) {
        let state = self.state();
        (self.model, state)
    }

    /// One pass over a fresh shuffle of the data, then the range roll.
    pub fn run_epoch(&mut self) -> Result<Vec<StepRecord>> {
        if self.is_finished() {
            return Err(invalid("training already finished"));
        }
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let records = order
            .chunks(self.config.batch_size)
            .map(|batch| self.step(batch))
            .collect::<Result<Vec<_>>>()?;
        self.tracker.roll_epoch();
        self.epoch += 1;
        Ok(records)
    }

    pub fn run(&mut self) -> Result<Vec<StepRecord>> {
        let mut log = Vec::new();
        while !self.is_finished() {
            log.extend(self.run_epoch()?);
        }
        Ok(log)
    }

    fn step(&mut self, batch: &[usize]) -> Result<StepRecord> {
        let (x, labels) = self.data.batch(batch);
        let kind = self.config.signal;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let fwd = self.model.forward_graph(&mut g, xv)?;

        let n = labels.len();
        let m = fwd.logits.len();
        let mut values = vec![0.0; n * m];
        for (j, &layer) in fwd.logits.iter().enumerate() {
            let t = g.value(layer);
            for i in 0..n {
                values[i * m + j] = kind.eval(t.row(i))?;
            }
        }
        let signals = SignalMatrix::new(kind, n, m, values)?;
        let range = *self.tracker.current();
        self.tracker.observe(&signals);

        let total_steps = self.hyper.total_steps;
        let t = self.global_step;
        let ce = per_layer_ce(&mut g, &fwd.logits, &labels)?;
        let (root, ce_loss, osc, beta_t) = match self.config.objective {
            Objective::Cosee => {
                let beta = decay_factor(t, total_steps, self.config.beta0)?;
                let taus = sample_thresholds(&range, self.config.k, &mut self.threshold_rng)?;
                let cls = classification_loss(&mut g, &ce, &signals, &taus, beta)?;
                let osc = osc_loss(&mut g, &fwd.logits, &labels, kind, self.config.epsilon)?;
                let root = total_loss(&mut g, cls, Some(osc), self.config.alpha)?;
                (root, cls, Some(osc), Some(beta))
            }
            Objective::ConventionalUniform => {
                let root = baseline_loss(&mut g, &ce, &uniform_layer_weights(m))?;
                (root, root, None, None)
            }
        };

        g.backward(root)?;
        let grads: Vec<_> = fwd.params.iter().map(|&p| g.grad_or_zeros(p)).collect();
        let lr = lr_at(t, total_steps, self.hyper.base_lr)?;
        adamw_step(
            &mut self.model.params_mut(),
            &grads,
            &mut self.optimizer,
            &self.hyper,
            lr,
        )?;
        self.global_step += 1;

        Ok(StepRecord {
            step: t,
            epoch: self.epoch,
            lr,
            beta_t,
            loss_total: g.value(root).item(),
            loss_ce: g.value(ce_loss).item(),
            loss_osc: osc.map(|o| g.value(o).item()),
            range_lo: range.lo,
            range_hi: range.hi,
        })
    }
}

pub struct TrainOutput {
    pub model: MultiExitModel,
    pub log: Vec<StepRecord>,
    pub state: TrainState,
}

/// Trains `model` on `data` for the configured number of epochs.
pub fn train(model: MultiExitModel, data: &Dataset, config: &TrainConfig) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(model, data, config.clone())?;
    let log = trainer.run()?;
    let (model, state) = trainer.into_parts();
    Ok(TrainOutput { model, log, state })
}
