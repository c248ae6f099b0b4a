//! Multi-exit classifiers trained for consistent early exiting.
//!
//! A residual feed-forward backbone carries an internal classifier after
//! every block. At inference a per-layer exit signal (entropy, softmax score
//! or normalized energy) is compared against a threshold and the first layer
//! that fires answers. Training simulates that exit decision at randomly
//! sampled thresholds and weights each sample's loss towards the layers
//! around its exit, with an auxiliary hinge keeping easy samples' signals
//! below hard samples' ones.
//!
//! ```
//! use early_exit::{gen_synthetic, train, MultiExitModel, ModelConfig, SyntheticSpec, TrainConfig};
//!
//! let data = gen_synthetic(&SyntheticSpec { samples: 64, dim: 4, ..Default::default() }, 0)?;
//! let model = MultiExitModel::init(ModelConfig { input_dim: 4, num_layers: 3, hidden: 8, ..Default::default() })?;
//! let out = train(model, &data, &TrainConfig { epochs: 1, ..Default::default() })?;
//! assert_eq!(out.log.len(), 2);
//! # Ok::<(), early_exit::Error>(())
//! ```

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exit;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod signals;
pub mod tensor;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointExtras};
pub use data::{gen_synthetic, load_dataset, DataFormat, Dataset, Generator, SyntheticSpec};
pub use error::{Error, Result};
pub use exit::{infer_early_exit, simulate_batch, speedup_ratio, Threshold};
pub use metrics::{sweep_tradeoff, EvalReport, TradeoffCurve};
pub use model::{Activation, ModelConfig, MultiExitModel};
pub use signals::{signals_for_batch, Direction, SignalKind, SignalMatrix};
pub use tensor::Tensor;
pub use training::{train, Objective, StepRecord, TrainConfig, Trainer};
