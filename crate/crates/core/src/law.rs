//! Finite weighted representations of one-dimensional laws and of samples.

use crate::real::Real;

/// Discrete law: `values[k]` carries probability `weights[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLaw<T> {
    pub values: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> WeightedLaw<T> {
    pub fn new(values: Vec<T>, weights: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), weights.len());
        Self { values, weights }
    }

    pub fn point_mass(v: T) -> Self {
        Self { values: vec![v], weights: vec![T::one()] }
    }

    /// Equal weights on every value.
    pub fn uniform(values: Vec<T>) -> Self {
        let w = T::one() / T::from_usize_lossy(values.len());
        let weights = vec![w; values.len()];
        Self { values, weights }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total(&self) -> T {
        self.weights.iter().copied().sum()
    }

    pub fn expect(&self, mut f: impl FnMut(T) -> T) -> T {
        self.values.iter().zip(&self.weights).map(|(&v, &w)| w * f(v)).sum()
    }

    pub fn mean(&self) -> T {
        self.expect(|v| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (T, T)> + '_ {
        self.values.iter().copied().zip(self.weights.iter().copied())
    }
}

/// Weighted collection of `(x, y, z)` points; `z` row-major with `dz` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample<T> {
    pub x: Vec<T>,
    pub y: Vec<T>,
    pub z: Vec<T>,
    pub dz: usize,
    pub w: Vec<T>,
}

impl<T: Real> WeightedSample<T> {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn z_row(&self, i: usize) -> &[T] {
        &self.z[i * self.dz..(i + 1) * self.dz]
    }

    /// Rows of `data` at `idx` with equal weights.
    pub fn empirical(data: &crate::data::Dataset<T>, idx: &[usize]) -> Self {
        let w = T::one() / T::from_usize_lossy(idx.len().max(1));
        let mut z = Vec::with_capacity(idx.len() * data.dz());
        for &i in idx {
            z.extend_from_slice(data.z_row(i));
        }
        Self {
            x: idx.iter().map(|&i| data.x()[i]).collect(),
            y: idx.iter().map(|&i| data.y()[i]).collect(),
            z,
            dz: data.dz(),
            w: vec![w; idx.len()],
        }
    }
}
