//! Seeded synthetic classification tasks with a controlled share of samples
//! near the class boundary.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

const MAX_ATTEMPTS_PER_SAMPLE: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    GaussianMixture,
    TwoSpirals,
}

impl std::str::FromStr for Generator {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_mixture" => Ok(Generator::GaussianMixture),
            "two_spirals" => Ok(Generator::TwoSpirals),
            other => Err(invalid(format!("unknown generator {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    /// Cluster standard deviation (mixture) or distractor-dimension
    /// standard deviation (spirals).
    pub noise: f64,
    /// Share of samples placed within `margin` of the true boundary.
    pub boundary_fraction: f64,
    pub margin: f64,
    /// Mixture only: Gaussian modes per class.
    pub modes_per_class: usize,
    /// Mixture only: typical distance of a mode centre from the origin.
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            generator: Generator::GaussianMixture,
            samples: 1000,
            dim: 16,
            classes: 2,
            noise: 1.0,
            boundary_fraction: 0.3,
            margin: 0.25,
            modes_per_class: 3,
            separation: 3.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.dim == 0 {
            return Err(invalid("samples and dim must be positive"));
        }
        if self.classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        if !(self.noise >= 0.0) || !(self.margin > 0.0) {
            return Err(invalid("noise must be >= 0 and margin > 0"));
        }
        if !(0.0..=1.0).contains(&self.boundary_fraction) {
            return Err(invalid("boundary fraction must be in [0, 1]"));
        }
        match self.generator {
            Generator::GaussianMixture => {
                if self.modes_per_class == 0 || !(self.separation > 0.0) {
                    return Err(invalid("need modes_per_class >= 1 and separation > 0"));
                }
            }
            Generator::TwoSpirals => {
                if self.dim < 2 {
                    return Err(invalid("spirals need dim >= 2"));
                }
                if self.margin >= spiral_half_gap(self.classes) {
                    return Err(invalid("margin must be below half the spiral arm gap"));
                }
            }
        }
        Ok(())
    }
}

/// A generated dataset with each sample's distance-to-boundary proxy.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub margins: Vec<f64>,
}

pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    Ok(generate(spec, seed)?.dataset)
}

pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_near = (spec.samples as f64 * spec.boundary_fraction).round() as usize;
    let n_far = spec.samples - n_near;
    let mut rows: Vec<(Vec<f64>, usize, f64)> = match spec.generator {
        Generator::GaussianMixture => mixture(spec, n_near, n_far, &mut rng)?,
        Generator::TwoSpirals => spirals(spec, n_near, n_far, &mut rng),
    };
    rows.shuffle(&mut rng);

    let mut data = Vec::with_capacity(spec.samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    let mut margins = Vec::with_capacity(spec.samples);
    for (x, y, m) in rows {
        data.extend(x);
        labels.push(y);
        margins.push(m);
    }
    let features = Tensor::new(vec![spec.samples, spec.dim], data)?;
    Ok(Synthetic {
        dataset: Dataset::new(features, labels, spec.classes)?,
        margins,
    })
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Modes {
    centres: Vec<Vec<f64>>,
    class_of: Vec<usize>,
}

impl Modes {
    /// Label of the nearest centre and the distance from `x` to the bisector
    /// between that centre and the nearest centre of any other class.
    fn label_and_margin(&self, x: &[f64]) -> (usize, f64) {
        let d: Vec<f64> = self.centres.iter().map(|c| sq_dist(x, c)).collect();
        let own = (0..d.len())
            .min_by(|&a, &b| d[a].total_cmp(&d[b]))
            .expect("at least one centre");
        let label = self.class_of[own];
        let other = (0..d.len())
            .filter(|&k| self.class_of[k] != label)
            .min_by(|&a, &b| d[a].total_cmp(&d[b]))
            .expect("at least two classes");
        let gap = sq_dist(&self.centres[own], &self.centres[other]).sqrt();
        (label, (d[other] - d[own]) / (2.0 * gap))
    }
}

fn mixture(
    spec: &SyntheticSpec,
    n_near: usize,
    n_far: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Vec<f64>, usize, f64)>> {
    let k = spec.classes * spec.modes_per_class;
    let scale = spec.separation / (spec.dim as f64).sqrt();
    let modes = Modes {
        centres: (0..k).map(|_| normal_vec(rng, spec.dim, scale)).collect(),
        class_of: (0..k).map(|i| i % spec.classes).collect(),
    };

    let mut out = Vec::with_capacity(n_near + n_far);
    let budget = MAX_ATTEMPTS_PER_SAMPLE * (n_near + n_far).max(1);
    let mut attempts = 0;

    // Near-boundary proposals: points between two centres of different
    // classes, jittered by the cluster noise.
    let mut placed = 0;
    while placed < n_near {
        attempts += 1;
        if attempts > budget {
            return Err(invalid("could not place enough near-boundary samples"));
        }
        let a = rng.random_range(0..k);
        let b = loop {
            let b = rng.random_range(0..k);
            if modes.class_of[b] != modes.class_of[a] {
                break b;
            }
        };
        let s: f64 = rng.random();
        let jitter = normal_vec(rng, spec.dim, spec.noise);
        let x: Vec<f64> = (0..spec.dim)
            .map(|j| {
                let (ca, cb) = (modes.centres[a][j], modes.centres[b][j]);
                ca + s * (cb - ca) + jitter[j]
            })
            .collect();
        let (y, m) = modes.label_and_margin(&x);
        if m < spec.margin {
            out.push((x, y, m));
            placed += 1;
        }
    }

    placed = 0;
    while placed < n_far {
        attempts += 1;
        if attempts > budget {
            return Err(invalid("could not place enough far-from-boundary samples"));
        }
        let c = rng.random_range(0..k);
        let jitter = normal_vec(rng, spec.dim, spec.noise);
        let x: Vec<f64> = modes.centres[c].iter().zip(&jitter).map(|(a, b)| a + b).collect();
        let (y, m) = modes.label_and_margin(&x);
        if m >= spec.margin {
            out.push((x, y, m));
            placed += 1;
        }
    }
    Ok(out)
}

const SPIRAL_RATE: f64 = 1.0 / std::f64::consts::PI;
const SPIRAL_TURNS: (f64, f64) = (0.5 * std::f64::consts::PI, 3.5 * std::f64::consts::PI);

/// Half the radial distance between neighbouring arms.
fn spiral_half_gap(classes: usize) -> f64 {
    SPIRAL_RATE * std::f64::consts::PI / classes as f64
}

fn spirals(
    spec: &SyntheticSpec,
    n_near: usize,
    n_far: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(Vec<f64>, usize, f64)> {
    let half_gap = spiral_half_gap(spec.classes);
    let inner = half_gap - spec.margin;
    (0..n_near + n_far)
        .map(|i| {
            let y = rng.random_range(0..spec.classes);
            let theta = rng.random_range(SPIRAL_TURNS.0..SPIRAL_TURNS.1);
            let offset = if i < n_near {
                let mag = rng.random_range(inner..half_gap);
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            } else if inner > 0.0 {
                rng.random_range(-inner..=inner)
            } else {
                0.0
            };
            let phase = theta + 2.0 * std::f64::consts::PI * y as f64 / spec.classes as f64;
            let r = SPIRAL_RATE * theta + offset;
            let mut x = normal_vec(rng, spec.dim, spec.noise);
            x[0] = r * phase.cos();
            x[1] = r * phase.sin();
            (x, y, half_gap - offset.abs())
        })
        .collect()
}
