//! Exit-aware sample weights and the threshold sampling that drives them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::exit::{ExitAssignment, Threshold};
use crate::signals::{SignalKind, SignalMatrix};

/// `β_t = (t / total) · β0`.
pub fn decay_factor(t: u64, total: u64, beta0: f64) -> Result<f64> {
    if total == 0 {
        return Err(invalid("total steps must be positive"));
    }
    if t > total {
        return Err(invalid(format!("step {t} beyond total {total}")));
    }
    Ok(t as f64 / total as f64 * beta0)
}

/// Softmax over `-β·|m - m*|` for `m = 1..=M`.
pub fn swm_weights(m_star: usize, num_layers: usize, beta: f64) -> Result<Vec<f64>> {
    if m_star == 0 || m_star > num_layers {
        return Err(invalid(format!(
            "exit layer {m_star} outside [1, {num_layers}]"
        )));
    }
    if !(beta >= 0.0) {
        return Err(invalid("decay factor must be non-negative"));
    }
    let raw: Vec<f64> = (1..=num_layers)
        .map(|m| (-beta * m.abs_diff(m_star) as f64).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / z).collect())
}

/// Per-sample loss weights over classifiers, `samples x layers` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    pub samples: usize,
    pub layers: usize,
    pub values: Vec<f64>,
}

impl WeightMatrix {
    pub fn from_assignment(assignment: &ExitAssignment, beta: f64) -> Result<Self> {
        let layers = assignment.num_layers();
        let mut values = Vec::with_capacity(assignment.len() * layers);
        for &m_star in &assignment.exit_layers {
            values.extend(swm_weights(m_star, layers, beta)?);
        }
        Ok(Self {
            samples: assignment.len(),
            layers,
            values,
        })
    }

    /// Every sample gets the same per-layer weights.
    pub fn broadcast(layer_weights: &[f64], samples: usize) -> Self {
        Self {
            samples,
            layers: layer_weights.len(),
            values: layer_weights.repeat(samples),
        }
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.layers..(n + 1) * self.layers]
    }

    pub fn column(&self, m: usize) -> Vec<f64> {
        (0..self.samples)
            .map(|n| self.values[n * self.layers + m])
            .collect()
    }

    /// Elementwise mean of equally shaped matrices, accumulated as offsets
    /// from the first one so identical inputs reproduce it exactly.
    pub fn mean(matrices: &[WeightMatrix]) -> Result<WeightMatrix> {
        let first = matrices.first().ok_or_else(|| invalid("no weight matrices"))?;
        if matrices
            .iter()
            .any(|w| w.samples != first.samples || w.layers != first.layers)
        {
            return Err(invalid("weight matrices differ in shape"));
        }
        let k = matrices.len() as f64;
        let values = (0..first.values.len())
            .map(|i| {
                let base = first.values[i];
                let offset: f64 = matrices.iter().map(|w| w.values[i] - base).sum();
                base + offset / k
            })
            .collect();
        Ok(WeightMatrix {
            values,
            ..first.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRange {
    pub lo: f64,
    pub hi: f64,
    pub epoch: usize,
}

impl ThresholdRange {
    /// First-epoch range: `(0, 1)`, widened to `(0, ln C)` for entropy when
    /// `ln C > 1`.
    pub fn initial(kind: SignalKind, num_classes: usize) -> Self {
        let ln_c = (num_classes as f64).ln();
        let hi = if kind == SignalKind::Entropy && ln_c > 1.0 {
            ln_c
        } else {
            1.0
        };
        Self { lo: 0.0, hi, epoch: 0 }
    }
}

/// `k` independent uniform draws from `[lo, hi]`.
pub fn sample_thresholds<R: Rng + ?Sized>(
    range: &ThresholdRange,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Threshold>> {
    if range.lo > range.hi {
        return Err(invalid(format!("range lo {} > hi {}", range.lo, range.hi)));
    }
    if k == 0 {
        return Err(invalid("need at least one threshold"));
    }
    let width = range.hi - range.lo;
    (0..k)
        .map(|_| Threshold::new(range.lo + width * rng.random::<f64>()))
        .collect()
}

/// Running extrema of observed signals; each epoch's extrema become the next
/// epoch's sampling range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTracker {
    current: ThresholdRange,
    running: Option<(f64, f64)>,
}

impl ThresholdTracker {
    pub fn new(initial: ThresholdRange) -> Self {
        Self {
            current: initial,
            running: None,
        }
    }

    pub fn current(&self) -> &ThresholdRange {
        &self.current
    }

    pub fn observe(&mut self, signals: &SignalMatrix) {
        if let Some((lo, hi)) = signals.min_max() {
            self.running = Some(match self.running {
                None => (lo, hi),
                Some((a, b)) => (a.min(lo), b.max(hi)),
            });
        }
    }

    /// Closes the epoch. With nothing observed the range carries over.
    pub fn roll_epoch(&mut self) -> ThresholdRange {
        let (lo, hi) = self
            .running
            .take()
            .unwrap_or((self.current.lo, self.current.hi));
        self.current = ThresholdRange {
            lo,
            hi,
            epoch: self.current.epoch + 1,
        };
        self.current
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn decay_examples() {
        assert_eq!(decay_factor(0, 100, 1.0).unwrap(), 0.0);
        assert_eq!(decay_factor(100, 100, 1.0).unwrap(), 1.0);
        assert!((decay_factor(50, 100, 0.2).unwrap() - 0.1).abs() < 1e-15);
        assert!(decay_factor(101, 100, 1.0).is_err());
    }

    #[test]
    fn weight_examples() {
        assert!(close(&swm_weights(2, 3, 0.0).unwrap(), &[1.0 / 3.0; 3]));
        let ln2 = 2f64.ln();
        assert!(close(&swm_weights(2, 3, ln2).unwrap(), &[0.25, 0.5, 0.25]));
        assert!(close(&swm_weights(1, 3, ln2).unwrap(), &[4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]));
        assert!(swm_weights(0, 3, 1.0).is_err());
        assert!(swm_weights(4, 3, 1.0).is_err());
    }

    #[test]
    fn mean_of_identical_is_exact() {
        let w = WeightMatrix {
            samples: 1,
            layers: 3,
            values: vec![1.0 / 3.0; 3],
        };
        let m = WeightMatrix::mean(&[w.clone(), w.clone(), w.clone(), w.clone(), w.clone()]).unwrap();
        assert_eq!(m, w);
    }

    #[test]
    fn thresholds_in_range_and_deterministic() {
        let r = ThresholdRange { lo: 0.0, hi: 1.0, epoch: 0 };
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let ta = sample_thresholds(&r, 50, &mut a).unwrap();
        let tb = sample_thresholds(&r, 50, &mut b).unwrap();
        assert_eq!(ta, tb);
        assert!(ta.iter().all(|t| (0.0..=1.0).contains(&t.value())));

        let flat = ThresholdRange { lo: 0.3, hi: 0.3, epoch: 1 };
        let t = sample_thresholds(&flat, 4, &mut a).unwrap();
        assert!(t.iter().all(|t| t.value() == 0.3));

        let bad = ThresholdRange { lo: 0.5, hi: 0.4, epoch: 1 };
        assert!(sample_thresholds(&bad, 1, &mut a).is_err());
    }

    #[test]
    fn entropy_initial_range_widens_for_many_classes() {
        assert_eq!(ThresholdRange::initial(SignalKind::Entropy, 2).hi, 1.0);
        let r = ThresholdRange::initial(SignalKind::Entropy, 3);
        assert!((r.hi - 3f64.ln()).abs() < 1e-15);
        assert_eq!(ThresholdRange::initial(SignalKind::EnergyNormalized, 5).hi, 1.0);
    }

    #[test]
    fn tracker_rolls_extrema() {
        let mut t = ThresholdTracker::new(ThresholdRange::initial(SignalKind::EnergyNormalized, 2));
        let a = SignalMatrix::new(SignalKind::EnergyNormalized, 1, 2, vec![0.30, 0.74]).unwrap();
        let b = SignalMatrix::new(SignalKind::EnergyNormalized, 1, 2, vec![0.12, 0.5]).unwrap();
        t.observe(&a);
        t.observe(&b);
        let r = t.roll_epoch();
        assert_eq!((r.lo, r.hi, r.epoch), (0.12, 0.74, 1));
        let r2 = t.roll_epoch();
        assert_eq!((r2.lo, r2.hi, r2.epoch), (0.12, 0.74, 2));
    }
}
