use super::Tensor;
use crate::error::{Error, Result};

/// Ordered, named model tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, t)) => *t = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Looks up a tensor that the caller requires to exist.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// True when both sets have the same names and shapes in the same order.
    pub fn congruent(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.congruent(other)
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((_, a), (_, b))| a.bit_eq(b))
    }

    /// Plain gradient-descent update `θ ← θ − lr·g`.
    pub fn sgd_step(&mut self, grads: &GradMap, lr: f64) -> Result<()> {
        if !grads.0.congruent(self) {
            return Err(Error::shape("sgd_step", "gradient map does not match parameters"));
        }
        for ((_, p), (_, g)) in self.entries.iter_mut().zip(&grads.0.entries) {
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
        Ok(())
    }
}

/// Gradients keyed like the [`ParamSet`] they were computed for.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap(ParamSet);

impl GradMap {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradMap(ParamSet::from_pairs(
            params
                .iter()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
                .collect(),
        ))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|(_, t)| t.is_finite())
    }

    /// Adds `other` into `self` entry by entry.
    pub fn accumulate(&mut self, other: &GradMap) -> Result<()> {
        if !self.0.congruent(&other.0) {
            return Err(Error::shape("accumulate", "gradient maps differ"));
        }
        for ((_, a), (_, b)) in self.0.iter_mut().zip(other.0.iter()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}
