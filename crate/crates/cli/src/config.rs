use std::path::{Path, PathBuf};

use clap::Args;
use early_exit::data::LoadOptions;
use early_exit::{
    Activation, DataFormat, Generator, ModelConfig, Objective, SignalKind, SyntheticSpec,
    TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const RESOLVED_CONFIG: &str = "config.toml";
pub const OUT_DIR_ENV: &str = "EEXIT_OUT_DIR";

/// Every knob of every command. A config file supplies a flat set of these
/// keys, flags override it, and defaults fill the rest.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory that receives every output file. Falls back to
    /// `$EEXIT_OUT_DIR`, then `eexit-out`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,

    /// Dataset file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// csv_numeric or jsonl_text.
    #[arg(long)]
    pub format: Option<String>,
    /// Separate dev file; otherwise `data` is split.
    #[arg(long)]
    pub dev_data: Option<PathBuf>,
    #[arg(long)]
    pub dev_fraction: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Hash buckets for jsonl_text features.
    #[arg(long)]
    pub hash_dim: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Which part of the data eval, sweep and stats score: dev, train or all.
    #[arg(long)]
    pub eval_split: Option<String>,

    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, value_parser = parse::<Activation>)]
    pub activation: Option<Activation>,

    #[arg(long, value_parser = parse::<Objective>)]
    pub objective: Option<Objective>,
    #[arg(long, value_parser = parse::<SignalKind>)]
    pub signal: Option<SignalKind>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta0: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Seeds model initialisation, training and synthetic data.
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Exit threshold for eval and stats.
    #[arg(long, allow_hyphen_values = true)]
    pub tau: Option<f64>,
    /// Explicit threshold grid for sweep, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub thresholds: Option<Vec<f64>>,
    /// Quantile grid size used when no explicit thresholds are given.
    #[arg(long)]
    pub grid_points: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub grid_alpha: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_beta0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_epsilon: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_k: Option<Vec<usize>>,
    /// Also draw the sweep as an SVG line plot.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub svg: Option<bool>,

    #[arg(long, value_parser = parse::<Generator>)]
    pub generator: Option<Generator>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub boundary_fraction: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub modes_per_class: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
}

fn parse<T: std::str::FromStr<Err = early_exit::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: early_exit::Error| e.to_string())
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

macro_rules! fill {
    ($dst:ident, $($f:ident = $v:expr),* $(,)?) => {
        $( if $dst.$f.is_none() { $dst.$f = Some($v); } )*
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("--config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("--config {}: {e}", path.display())))
    }

    /// Values set in `other` win.
    pub fn overlay(mut self, other: &RunConfig) -> Self {
        overlay!(
            self, other, out_dir, data, format, dev_data, dev_fraction, split_seed, hash_dim,
            num_classes, eval_split, layers, hidden, activation, objective, signal, alpha, beta0,
            epsilon, k, epochs, batch_size, lr, weight_decay, seed, checkpoint, tau, thresholds,
            grid_points, grid_alpha, grid_beta0, grid_epsilon, grid_k, svg, generator, samples,
            dim, classes, noise, boundary_fraction, margin, modes_per_class, separation,
        );
        self
    }

    /// Fills every key that has a default, so the written file pins the run.
    pub fn resolved(mut self) -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let s = SyntheticSpec::default();
        let l = LoadOptions::default();
        fill!(
            self,
            out_dir = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("eexit-out"), PathBuf::from),
            format = "csv_numeric".to_string(),
            dev_fraction = 0.2,
            split_seed = 0,
            hash_dim = l.hash_dim,
            eval_split = "dev".to_string(),
            layers = m.num_layers,
            hidden = m.hidden,
            activation = m.activation,
            objective = t.objective,
            signal = t.signal,
            alpha = t.alpha,
            beta0 = t.beta0,
            epsilon = t.epsilon,
            k = t.k,
            epochs = t.epochs,
            batch_size = t.batch_size,
            lr = t.lr,
            weight_decay = t.weight_decay,
            seed = t.seed,
            grid_points = 50,
            svg = false,
            generator = s.generator,
            samples = s.samples,
            dim = s.dim,
            classes = s.classes,
            noise = s.noise,
            boundary_fraction = s.boundary_fraction,
            margin = s.margin,
            modes_per_class = s.modes_per_class,
            separation = s.separation,
        );
        self
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn out_dir(&self) -> &Path {
        self.out_dir.as_deref().expect("resolved config")
    }

    pub fn data_format(&self) -> Result<DataFormat, UsageError> {
        parse(self.format.as_deref().unwrap_or("csv_numeric")).map_err(|e| UsageError(format!("--format: {e}")))
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            hash_dim: self.hash_dim.unwrap_or(256),
            hash_seed: 0,
            num_classes: self.num_classes,
        }
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_layers: self.layers.unwrap(),
            hidden: self.hidden.unwrap(),
            input_dim,
            num_classes,
            activation: self.activation.unwrap(),
            seed: self.seed.unwrap(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            objective: self.objective.unwrap(),
            signal: self.signal.unwrap(),
            alpha: self.alpha.unwrap(),
            beta0: self.beta0.unwrap(),
            epsilon: self.epsilon.unwrap(),
            k: self.k.unwrap(),
            epochs: self.epochs.unwrap(),
            batch_size: self.batch_size.unwrap(),
            lr: self.lr.unwrap(),
            weight_decay: self.weight_decay.unwrap(),
            seed: self.seed.unwrap(),
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            generator: self.generator.unwrap(),
            samples: self.samples.unwrap(),
            dim: self.dim.unwrap(),
            classes: self.classes.unwrap(),
            noise: self.noise.unwrap(),
            boundary_fraction: self.boundary_fraction.unwrap(),
            margin: self.margin.unwrap(),
            modes_per_class: self.modes_per_class.unwrap(),
            separation: self.separation.unwrap(),
        }
    }

    pub fn has_hyper_grid(&self) -> bool {
        self.grid_alpha.is_some() || self.grid_beta0.is_some() || self.grid_epsilon.is_some() || self.grid_k.is_some()
    }

    /// Cartesian product of the hyper-grid, in alpha, beta0, epsilon, k
    /// order. A single point when no grid is set.
    pub fn hyper_settings(&self) -> Result<Vec<TrainConfig>, UsageError> {
        let base = self.train_config();
        let axis_f = |name: &str, v: &Option<Vec<f64>>, d: f64| match v {
            Some(v) if v.is_empty() => Err(UsageError(format!("--{name}: empty grid"))),
            Some(v) => Ok(v.clone()),
            None => Ok(vec![d]),
        };
        let alphas = axis_f("grid-alpha", &self.grid_alpha, base.alpha)?;
        let betas = axis_f("grid-beta0", &self.grid_beta0, base.beta0)?;
        let epsilons = axis_f("grid-epsilon", &self.grid_epsilon, base.epsilon)?;
        let ks = match &self.grid_k {
            Some(v) if v.is_empty() => return Err(UsageError("--grid-k: empty grid".into())),
            Some(v) => v.clone(),
            None => vec![base.k],
        };
        let mut out = Vec::new();
        for &alpha in &alphas {
            for &beta0 in &betas {
                for &epsilon in &epsilons {
                    for &k in &ks {
                        let c = TrainConfig {
                            alpha,
                            beta0,
                            epsilon,
                            k,
                            ..base.clone()
                        };
                        c.validate().map_err(|e| UsageError(format!("hyper-grid: {e}")))?;
                        out.push(c);
                    }
                }
            }
        }
        Ok(out)
    }
}
