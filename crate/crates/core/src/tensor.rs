//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! autodiff graph and the plain inference path.
//!
//! Both paths call the same kernels, so a value computed through the graph is
//! bit-identical to the value computed without it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Size of the trailing axis (1 for rank-0 tensors).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as `[outer, last_dim]`.
    pub fn outer(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    /// Row `i` of the `[outer, last_dim]` view.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// 2-D matrix product `[n, k] x [k, m] -> [n, m]`.
    ///
    /// Each output entry accumulates over `k` in ascending order, so a row's
    /// result does not depend on how many other rows are in the batch.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let (n, k, m) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[kk * m..(kk + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!("transpose of {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Elementwise binary op with broadcasting of `rhs` over `self`.
    pub fn broadcast_with(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let data = match broadcast_kind(&self.shape, &rhs.shape)? {
            Broadcast::Same => self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            Broadcast::Row => {
                let c = rhs.data.len();
                self.data
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| f(a, rhs.data[i % c]))
                    .collect()
            }
            Broadcast::Scalar => {
                let b = rhs.data[0];
                self.data.iter().map(|&a| f(a, b)).collect()
            }
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.broadcast_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.broadcast_with(rhs, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.broadcast_with(rhs, |a, b| a * b)
    }

    /// Row-wise softmax over the trailing axis.
    pub fn softmax_rows(&self) -> Tensor {
        let c = self.last_dim();
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.outer() {
            data.extend(softmax(&self.data[i * c..(i + 1) * c]));
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Row-wise log-sum-exp over the trailing axis; drops that axis.
    pub fn logsumexp_rows(&self) -> Result<Tensor> {
        let out = (0..self.outer())
            .map(|i| logsumexp(self.row(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor {
            shape: leading_shape(&self.shape),
            data: out,
        })
    }

    /// Row-wise sum over the trailing axis; drops that axis.
    pub fn sum_rows(&self) -> Tensor {
        let data = (0..self.outer()).map(|i| self.row(i).iter().sum()).collect();
        Tensor {
            shape: leading_shape(&self.shape),
            data,
        }
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.outer()).map(|i| argmax(self.row(i))).collect()
    }
}

pub(crate) enum Broadcast {
    Same,
    /// `rhs` is a vector matching the trailing axis of `lhs`.
    Row,
    /// `rhs` holds one element.
    Scalar,
}

pub(crate) fn broadcast_kind(lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        Ok(Broadcast::Same)
    } else if rhs.iter().product::<usize>() == 1 {
        Ok(Broadcast::Scalar)
    } else if rhs.len() == 1 && lhs.len() >= 2 && lhs.last() == rhs.last() {
        Ok(Broadcast::Row)
    } else {
        Err(Error::Shape(format!("cannot broadcast {rhs:?} onto {lhs:?}")))
    }
}

fn leading_shape(shape: &[usize]) -> Vec<usize> {
    if shape.is_empty() {
        Vec::new()
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

/// `log Σ exp(v_i)`, shifted by the maximum so large inputs do not overflow.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Ok(max);
    }
    let s: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_examples() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(logsumexp(&[3.25]).unwrap(), 3.25);
        let big = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert!(matches!(logsumexp(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn logsumexp_extreme_magnitudes() {
        let v = logsumexp(&[1e6, -1e6, 1e6]).unwrap();
        assert!((v - (1e6 + 2f64.ln())).abs() < 1e-6);
        let v = logsumexp(&[-1e6, -1e6]).unwrap();
        assert!((v - (-1e6 + 2f64.ln())).abs() < 1e-6);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn matmul_row_independent_of_batch() {
        let a = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = Tensor::matrix(4, 5, (0..20).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
        let full = a.matmul(&b).unwrap();
        let one = Tensor::matrix(1, 4, a.row(1).to_vec()).unwrap().matmul(&b).unwrap();
        assert_eq!(full.row(1), one.data());
    }

    #[test]
    fn broadcasting_rules() {
        let a = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let row = Tensor::vector(vec![10., 20.]);
        assert_eq!(a.add(&row).unwrap().data(), &[11., 22., 13., 24.]);
        assert_eq!(a.mul(&Tensor::scalar(2.0)).unwrap().data(), &[2., 4., 6., 8.]);
        assert!(a.add(&Tensor::vector(vec![1., 2., 3.])).is_err());
    }

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::scalar(1.5).numel(), 1);
    }

    #[test]
    fn softmax_rows_normalized() {
        let t = Tensor::matrix(2, 3, vec![1., 2., 3., -500., 0., 500.]).unwrap();
        let p = t.softmax_rows();
        for i in 0..2 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
