//! Named parameter collections.
//!
//! `ModelParams` keeps an ordered list of (name, tensor) pairs. The order is
//! the registration order and is part of the contract: checkpoints, gradient
//! buffers and optimizer state all iterate in this order, which is what makes
//! deterministic reductions possible.

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a named tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidConfig(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor_at(&self, idx: usize) -> (&str, &Tensor) {
        let (n, t) = &self.entries[idx];
        (n.as_str(), t)
    }

    pub fn tensor_at_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    /// Same names and shapes, all zeros. Used for gradients and velocities.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.zeros_like()))
                .collect(),
        }
    }

    /// In-place `self += scale * other`, entry by entry.
    pub fn axpy(&mut self, scale: f64, other: &ModelParams) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter collections of {} vs {} entries",
                self.len(),
                other.len()
            )));
        }
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.axpy(scale, b)?;
        }
        Ok(())
    }

    /// Largest absolute difference across all entries; shapes must agree.
    pub fn max_abs_diff(&self, other: &ModelParams) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter collections of {} vs {} entries",
                self.len(),
                other.len()
            )));
        }
        let mut worst = 0.0f64;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "entry shapes {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok(worst)
    }

    /// Name of the first entry holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_rejects_duplicates() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(p.insert("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn zeros_like_mirrors_shapes() {
        let mut p = ModelParams::new();
        p.insert("a", Tensor::filled(vec![2, 3], 1.5)).unwrap();
        p.insert("b", Tensor::filled(vec![4], -2.0)).unwrap();
        let z = p.zeros_like();
        assert_eq!(z.get("a").unwrap().shape(), &[2, 3]);
        assert!(z.get("b").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
