use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use early_exit::checkpoint::{load_checkpoint, save_checkpoint, CheckpointExtras};
use early_exit::exit::simulate_batch;
use early_exit::metrics::{
    accuracy, evaluate_at, exit_histograms, exit_predictions, f1, failure_rates, sweep_tradeoff,
    FailureRates, TradeoffCurve,
};
use early_exit::training::Trainer;
use early_exit::{
    gen_synthetic, load_dataset, signals_for_batch, Dataset, MultiExitModel, SignalKind, Threshold,
    TrainConfig,
};
use serde::{Serialize, Serializer};

use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::svg;
use crate::UsageError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.jsonl";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require_file(flag: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
    let Some(path) = path else {
        return Err(usage(format!("--{flag} is required")));
    };
    if !path.is_file() {
        return Err(usage(format!("--{flag}: no such file: {}", path.display())));
    }
    Ok(path.clone())
}

fn require_tau(cfg: &RunConfig) -> Result<Threshold> {
    let tau = cfg.tau.ok_or_else(|| usage("--tau is required"))?;
    Threshold::new(tau).map_err(|e| usage(format!("--tau: {e}")))
}

fn check_common(cfg: &RunConfig) -> Result<()> {
    require_file("data", &cfg.data)?;
    if cfg.dev_data.is_some() {
        require_file("dev-data", &cfg.dev_data)?;
    }
    cfg.data_format()?;
    match cfg.eval_split.as_deref() {
        Some("dev" | "train" | "all") => {}
        other => return Err(usage(format!("--eval-split: expected dev, train or all, got {other:?}"))),
    }
    let frac = cfg.dev_fraction.unwrap();
    if cfg.dev_data.is_none() && !(frac > 0.0 && frac < 1.0) {
        return Err(usage(format!("--dev-fraction: {frac} outside (0, 1)")));
    }
    Ok(())
}

fn check_training(cfg: &RunConfig) -> Result<()> {
    cfg.train_config().validate().map_err(|e| usage(e.to_string()))?;
    cfg.model_config(1, 2).validate().map_err(|e| usage(e.to_string()))?;
    Ok(())
}

/// Creates the output directory and pins the resolved configuration there.
fn start(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg.out_dir();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    Ok(out)
}

struct Splits {
    all: Dataset,
    train: Dataset,
    dev: Dataset,
}

impl Splits {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let format = cfg.data_format()?;
        let opts = cfg.load_options();
        let path = cfg.data.as_ref().unwrap();
        let all = load_dataset(path, format, &opts).with_context(|| format!("loading {}", path.display()))?;
        let (mut train, mut dev) = match &cfg.dev_data {
            Some(dev_path) => {
                let dev = load_dataset(dev_path, format, &opts)
                    .with_context(|| format!("loading {}", dev_path.display()))?;
                if dev.dim() != all.dim() {
                    bail!("--dev-data has {} features, --data has {}", dev.dim(), all.dim());
                }
                (all.clone().with_split("train"), dev.with_split("dev"))
            }
            None => all.split(cfg.dev_fraction.unwrap(), cfg.split_seed.unwrap())?,
        };
        let classes = all.num_classes.max(train.num_classes).max(dev.num_classes);
        let mut all = all;
        for d in [&mut all, &mut train, &mut dev] {
            d.num_classes = classes;
        }
        Ok(Self { all, train, dev })
    }

    fn eval_set(&self, cfg: &RunConfig) -> &Dataset {
        match cfg.eval_split.as_deref() {
            Some("train") => &self.train,
            Some("all") => &self.all,
            _ => &self.dev,
        }
    }
}

fn load_model(cfg: &RunConfig, data: &Dataset) -> Result<(MultiExitModel, CheckpointExtras)> {
    let path = cfg.checkpoint.as_ref().unwrap();
    let (model, extras) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let mc = model.config();
    if mc.input_dim != data.dim() || mc.num_classes < data.num_classes {
        bail!(
            "checkpoint expects {} features and {} classes, data has {} and {}",
            mc.input_dim,
            mc.num_classes,
            data.dim(),
            data.num_classes
        );
    }
    Ok((model, extras))
}

fn train_model(cfg: &RunConfig, tc: &TrainConfig, data: &Dataset) -> Result<(MultiExitModel, CheckpointExtras, String)> {
    let model = MultiExitModel::init(cfg.model_config(data.dim(), data.num_classes))?;
    let mut trainer = Trainer::new(model, data, tc.clone())?;
    let log = trainer.run()?;
    let mut lines = String::new();
    for record in &log {
        lines.push_str(&serde_json::to_string(record)?);
        lines.push('\n');
    }
    let (model, state) = trainer.into_parts();
    let extras = CheckpointExtras {
        train_config: Some(tc.clone()),
        state: Some(state),
    };
    Ok((model, extras, lines))
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    check_common(cfg)?;
    check_training(cfg)?;
    let out = start(cfg)?;
    let splits = Splits::load(cfg)?;
    let tc = cfg.train_config();
    let (model, extras, log) = train_model(cfg, &tc, &splits.train)?;
    fs::write(out.join(LOG_FILE), &log)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &model, &extras)?;

    let outputs = model.forward_all(&splits.dev.features)?;
    let m = model.num_layers();
    let preds: Vec<usize> = (0..outputs.samples).map(|n| outputs.prediction(n, m - 1)).collect();
    println!(
        "trained {} steps; final-layer dev accuracy {:.4}; wrote {}",
        log.lines().count(),
        accuracy(&preds, &splits.dev.labels)?,
        out.display()
    );
    Ok(())
}

fn ser_threshold<S: Serializer>(t: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    // JSON has no infinities; the fallback-only and exit-always thresholds
    // are spelled out.
    if t.is_finite() {
        s.serialize_f64(*t)
    } else if *t > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    signal: SignalKind,
    #[serde(serialize_with = "ser_threshold")]
    threshold: f64,
    eval_split: &'a str,
    samples: usize,
    accuracy: f64,
    f1: f64,
    speedup: f64,
    premature_rate: f64,
    delayed_rate: f64,
    exit_counts: Vec<usize>,
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    check_common(cfg)?;
    require_file("checkpoint", &cfg.checkpoint)?;
    let tau = require_tau(cfg)?;
    let out = start(cfg)?;
    let splits = Splits::load(cfg)?;
    let data = splits.eval_set(cfg);
    let (model, _) = load_model(cfg, data)?;
    let kind = cfg.signal.unwrap();
    let outputs = model.forward_all(&data.features)?;
    let signals = signals_for_batch(&outputs, kind)?;
    let r = evaluate_at(&outputs, &data.labels, &signals, tau)?;
    let report = EvalOutput {
        signal: kind,
        threshold: r.threshold,
        eval_split: cfg.eval_split.as_deref().unwrap(),
        samples: data.len(),
        accuracy: r.accuracy,
        f1: r.f1,
        speedup: r.speedup,
        premature_rate: r.premature_rate,
        delayed_rate: r.delayed_rate,
        exit_counts: r.histogram,
    };
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    println!("accuracy {:.4}, f1 {:.4}, speed-up {:.3}x", r.accuracy, r.f1, r.speedup);
    Ok(())
}

/// Quantiles of the internal-layer signals plus both infinite thresholds,
/// ascending.
fn quantile_grid(model: &MultiExitModel, data: &Dataset, kind: SignalKind, q: usize) -> Result<Vec<f64>> {
    let outputs = model.forward_all(&data.features)?;
    let s = signals_for_batch(&outputs, kind)?;
    let mut v: Vec<f64> = (0..s.samples).flat_map(|n| s.row(n)[..s.layers - 1].to_vec()).collect();
    let mut grid = vec![f64::NEG_INFINITY, f64::INFINITY];
    if !v.is_empty() {
        v.sort_by(f64::total_cmp);
        grid.extend((0..=q).map(|i| v[i * (v.len() - 1) / q]));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid)
}

fn curve_grid(cfg: &RunConfig, model: &MultiExitModel, data: &Dataset, kind: SignalKind) -> Result<Vec<f64>> {
    match &cfg.thresholds {
        Some(t) => {
            let mut t = t.clone();
            t.sort_by(f64::total_cmp);
            Ok(t)
        }
        None => quantile_grid(model, data, kind, cfg.grid_points.unwrap()),
    }
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    check_common(cfg)?;
    if cfg.checkpoint.is_some() {
        require_file("checkpoint", &cfg.checkpoint)?;
        if cfg.has_hyper_grid() {
            return Err(usage("a hyper-grid trains its own models; drop --checkpoint"));
        }
    } else {
        check_training(cfg)?;
    }
    if cfg.thresholds.as_ref().is_some_and(|t| t.is_empty()) {
        return Err(usage("--thresholds: empty grid"));
    }
    if cfg.thresholds.as_ref().is_some_and(|t| t.iter().any(|v| v.is_nan())) {
        return Err(usage("--thresholds: NaN in grid"));
    }
    if cfg.grid_points == Some(0) {
        return Err(usage("--grid-points must be positive"));
    }
    let settings = cfg.hyper_settings()?;
    let out = start(cfg)?;
    let splits = Splits::load(cfg)?;
    let data = splits.eval_set(cfg);
    let kind = cfg.signal.unwrap();

    let mut curves: Vec<(String, TradeoffCurve)> = Vec::new();
    let mut index = String::from("curve,alpha,beta0,epsilon,k,file\n");
    let mut add = |i: usize, tc: Option<&TrainConfig>, model: &MultiExitModel| -> Result<()> {
        let grid = curve_grid(cfg, model, data, kind)?;
        let curve = sweep_tradeoff(model, data, kind, &grid)?;
        let file = format!("curve_{i}.csv");
        fs::write(out.join(&file), curve.to_csv())?;
        let (cols, label) = match tc {
            Some(c) => (
                format!("{},{},{},{}", c.alpha, c.beta0, c.epsilon, c.k),
                format!("α={} β0={} ε={} K={}", c.alpha, c.beta0, c.epsilon, c.k),
            ),
            None => (",,,".to_string(), format!("curve {i}")),
        };
        index.push_str(&format!("{i},{cols},{file}\n"));
        curves.push((label, curve));
        Ok(())
    };
    if cfg.checkpoint.is_some() {
        let (model, extras) = load_model(cfg, data)?;
        add(0, extras.train_config.as_ref(), &model)?;
    } else {
        for (i, tc) in settings.iter().enumerate() {
            let (model, _, _) = train_model(cfg, tc, &splits.train)?;
            add(i, Some(tc), &model)?;
        }
    }
    fs::write(out.join("sweep_index.csv"), &index)?;
    if cfg.svg == Some(true) {
        fs::write(out.join("sweep.svg"), svg::tradeoff_plot(&curves))?;
    }
    println!("{} curve(s) written to {}", curves.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct Histograms {
    train: Vec<usize>,
    dev: Vec<usize>,
    train_distribution: Vec<f64>,
    dev_distribution: Vec<f64>,
    tv_distance: f64,
}

#[derive(Serialize)]
struct StatsReport<'a> {
    signal: SignalKind,
    #[serde(serialize_with = "ser_threshold")]
    threshold: f64,
    num_layers: usize,
    eval_split: &'a str,
    samples: usize,
    accuracy: f64,
    f1: f64,
    speedup: f64,
    failure_rates: FailureRates,
    exit_histograms: Histograms,
}

pub fn stats(cfg: &RunConfig) -> Result<()> {
    check_common(cfg)?;
    require_file("checkpoint", &cfg.checkpoint)?;
    let tau = require_tau(cfg)?;
    let out = start(cfg)?;
    let splits = Splits::load(cfg)?;
    let data = splits.eval_set(cfg);
    let (model, _) = load_model(cfg, data)?;
    let kind = cfg.signal.unwrap();

    let h = exit_histograms(&model, &splits.train, &splits.dev, kind, tau)?;
    let outputs = model.forward_all(&data.features)?;
    let signals = signals_for_batch(&outputs, kind)?;
    let assignment = simulate_batch(&signals, tau);
    let preds = exit_predictions(&outputs, &assignment);
    let report = StatsReport {
        signal: kind,
        threshold: tau.value(),
        num_layers: model.num_layers(),
        eval_split: cfg.eval_split.as_deref().unwrap(),
        samples: data.len(),
        accuracy: accuracy(&preds, &data.labels)?,
        f1: f1(&preds, &data.labels)?,
        speedup: assignment.speedup()?,
        failure_rates: failure_rates(&outputs, &data.labels, &assignment)?,
        exit_histograms: Histograms {
            train: h.counts_a,
            dev: h.counts_b,
            train_distribution: h.dist_a,
            dev_distribution: h.dist_b,
            tv_distance: h.tv_distance,
        },
    };
    let mut f = fs::File::create(out.join("stats.json"))?;
    serde_json::to_writer_pretty(&mut f, &report)?;
    f.write_all(b"\n")?;
    println!(
        "speed-up {:.3}x, accuracy {:.4}, train/dev TV {:.4}",
        report.speedup, report.accuracy, report.exit_histograms.tv_distance
    );
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.synthetic_spec();
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let out = start(cfg)?;
    let data = gen_synthetic(&spec, cfg.seed.unwrap())?;
    let path = out.join("data.csv");
    data.write_csv(&path)?;
    println!("{} samples written to {}", data.len(), path.display());
    Ok(())
}
