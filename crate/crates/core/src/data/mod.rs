//! Datasets, synthetic generators, file loaders and train/dev splits.

mod load;
mod synth;

pub use load::{featurize_text, load_dataset, DataFormat, LoadOptions};
pub use synth::{gen_synthetic, generate, Generator, Synthetic, SyntheticSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, D]` features.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Option<String>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Shape(format!("features {:?}", features.shape())));
        }
        if features.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows, {} labels",
                features.shape()[0],
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptyInput);
        }
        if !features.all_finite() {
            return Err(invalid("non-finite feature value"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            split: None,
        })
    }

    pub fn with_split(mut self, tag: impl Into<String>) -> Self {
        self.split = Some(tag.into());
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Features and labels for `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new(vec![indices.len(), d], data).expect("rows have dim entries"),
            labels,
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (features, labels) = self.batch(indices);
        let mut out = Dataset::new(features, labels, self.num_classes)?;
        out.split = self.split.clone();
        Ok(out)
    }

    /// Random partition into `(train, dev)` with `round(N · dev_fraction)`
    /// dev samples.
    pub fn split(&self, dev_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&dev_fraction) {
            return Err(invalid("dev fraction must be in [0, 1)"));
        }
        let n = self.len();
        let n_dev = (n as f64 * dev_fraction).round() as usize;
        if n_dev == 0 || n_dev >= n {
            return Err(invalid(format!("split of {n} samples leaves an empty side")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (dev, train) = idx.split_at(n_dev);
        Ok((
            self.subset(train)?.with_split("train"),
            self.subset(dev)?.with_split("dev"),
        ))
    }

    /// Writes the `csv_numeric` layout: `f0,..,f{D-1},label`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (0..self.dim())
            .map(|j| format!("f{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            for v in self.row(i) {
                write!(out, "{v:?},")?;
            }
            writeln!(out, "{}", self.labels[i])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn toy(n: usize) -> Dataset {
        let f = Tensor::matrix(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        Dataset::new(f, (0..n).map(|i| i % 2).collect(), 2).unwrap()
    }

    #[test]
    fn split_is_partition() {
        let d = toy(101);
        let (tr, dv) = d.split(0.2, 5).unwrap();
        assert_eq!(tr.len() + dv.len(), 101);
        assert!((dv.len() as f64 - 20.2).abs() <= 1.0);
        let a: HashSet<u64> = tr.features.data().iter().map(|v| v.to_bits()).collect();
        let b: HashSet<u64> = dv.features.data().iter().map(|v| v.to_bits()).collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 101);
        assert_eq!(tr.split.as_deref(), Some("train"));
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = Tensor::matrix(2, 1, vec![0.0, f64::NAN]).unwrap();
        assert!(Dataset::new(f, vec![0, 1], 2).is_err());
        let f = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(Dataset::new(f.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new(f, vec![0], 2).is_err());
        assert!(toy(4).split(0.0, 1).is_err());
    }
}
