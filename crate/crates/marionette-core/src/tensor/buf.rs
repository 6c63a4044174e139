//! Dense row-major f64 arrays.
//!
//! `Buf` is the storage type under every tensor. Data lives behind an `Arc`
//! so reshapes and graph bookkeeping are cheap; all math producing a new
//! value allocates a fresh buffer. Everything is f64: the gradient checks in
//! the test suite compare against central finite differences at tolerances
//! that single precision cannot reach.

use std::sync::Arc;

#[derive(Clone, Debug)]
pub struct Buf {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Buf {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Buf { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Buf { shape: shape.to_vec(), data: Arc::new(vec![0.0; n]) }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Buf { shape: shape.to_vec(), data: Arc::new(vec![v; n]) }
    }

    pub fn scalar(v: f64) -> Self {
        Buf::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sole scalar value of a one-element buffer.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar buf");
        self.data[0]
    }

    /// Same data viewed under a different shape.
    pub fn reshaped(&self, shape: Vec<usize>) -> Buf {
        assert_eq!(shape.iter().product::<usize>(), self.numel());
        Buf { shape, data: Arc::clone(&self.data) }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Buf {
        Buf::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip(&self, other: &Buf, f: impl Fn(f64, f64) -> f64) -> Buf {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Buf::new(self.shape.clone(), data)
    }

    pub fn add_into(&mut self, other: &Buf) {
        assert_eq!(self.shape, other.shape, "add_into shape mismatch");
        let dst = Arc::make_mut(&mut self.data);
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += *s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Buf) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl PartialEq for Buf {
    /// Bit-level equality; several invariants in this crate are exact.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
