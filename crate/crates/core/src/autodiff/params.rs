use std::collections::HashMap;

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub momentum: Vec<f64>,
}

/// Named trainable tensors in insertion order, each with a momentum buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

/// Graph variables for every parameter of a set, bound for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        let momentum = vec![0.0; value.len()];
        self.params.push(Parameter { name, value, momentum });
        Ok(())
    }

    /// Uniform init in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
    pub fn insert_uniform<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> Result<()> {
        let bound = (6.0 / rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on the graph; as gradient leaves if `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { g.param(p.value.clone()) } else { g.input(p.value.clone()) })
            .collect();
        BoundParams { vars, index: self.index.clone() }
    }

    /// Collects the gradient of each parameter (zeros where none flowed).
    pub fn gradients(&self, g: &Graph, bound: &BoundParams) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| g.grad(v).map_or_else(|| vec![0.0; p.value.len()], <[f64]>::to_vec))
            .collect()
    }

    /// SGD with heavy-ball momentum: `v = mu v + grad; p -= lr v`.
    pub fn sgd_step(&mut self, grads: &[Vec<f64>], lr: f64, mu: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Dimension("gradient count differs from parameter count".into()));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if g.len() != p.value.len() {
                return Err(Error::Dimension(format!("gradient shape mismatch for {}", p.name)));
            }
            for ((v, m), gv) in p.value.data_mut().iter_mut().zip(&mut p.momentum).zip(g) {
                *m = mu * *m + gv;
                *v -= lr * *m;
            }
        }
        Ok(())
    }
}
