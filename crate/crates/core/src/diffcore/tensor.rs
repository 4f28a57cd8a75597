use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Dimension { expected: vec![n], got: vec![values.len()] });
        }
        Ok(Tensor { shape, values, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: vec![0.0; n], grad: None, requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], values: vec![v], grad: None, requires_grad: false }
    }

    /// Builds a `[rows.len(), d]` matrix. All rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::dim(&[d], &[r.len()]));
            }
            values.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), d], values)
    }

    /// Standard normal entries scaled by `scale`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor { shape: shape.to_vec(), values, grad: None, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.values.len() {
            return Err(Error::dim(&[self.values.len()], &[g.len()]));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Number of rows of a 2-D tensor (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Width of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.cols();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.cols();
        &mut self.values[i * d..(i + 1) * d]
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.values.iter().map(|&v| f(v)).collect())
            .expect("same length")
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(&self.shape, &other.shape));
        }
        let v = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Tensor::new(self.shape.clone(), v)
    }

    /// Selects rows by index from a 2-D tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let d = self.cols();
        let mut values = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Tensor { shape: vec![idx.len(), d], values, grad: None, requires_grad: false }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Per-column mean of a 2-D tensor.
    pub fn column_means(&self) -> Vec<f64> {
        let (b, d) = (self.rows(), self.cols());
        let mut m = vec![0.0; d];
        for i in 0..b {
            for (acc, v) in m.iter_mut().zip(self.row(i)) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= b as f64);
        m
    }

    /// Per-column population standard deviation of a 2-D tensor.
    pub fn column_stds(&self) -> Vec<f64> {
        let (b, d) = (self.rows(), self.cols());
        let mean = self.column_means();
        let mut s = vec![0.0; d];
        for i in 0..b {
            for ((acc, v), m) in s.iter_mut().zip(self.row(i)).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        s.iter_mut().map(|v| (*v / b as f64).sqrt()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn accumulation_is_additive() {
        let mut t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn column_stats() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(t.column_means(), vec![2.0, 0.0]);
        assert_eq!(t.column_stds(), vec![1.0, 0.0]);
    }
}
