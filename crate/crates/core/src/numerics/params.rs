use crate::error::{Error, Result};

use super::Tensor;

/// Ordered collection of named tensors (model weights, EMA shadows, moments).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::invalid(format!(
                "parameter sets differ in length: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((n, a), b) in self.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::ParamShape {
                    name: n.to_string(),
                    expected: a.shape().to_vec(),
                    found: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// `self <- decay * self + (1 - decay) * params`.
    pub fn ema_update(&mut self, params: &ParamSet, decay: f64) -> Result<()> {
        self.check_same_layout(params)?;
        for (s, p) in self.tensors.iter_mut().zip(&params.tensors) {
            for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = decay * *sv + (1.0 - decay) * pv;
            }
        }
        Ok(())
    }
}
