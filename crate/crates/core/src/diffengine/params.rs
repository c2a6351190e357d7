use std::collections::HashMap;

use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

/// Adam-style optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Named learnable tensors plus their Adam moments. Insertion order is stable and
/// defines checkpoint and gradient ordering.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    steps: u64,
}

/// Parameters registered as leaves on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter '{name}'")));
        }
        let n = value.len();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        });
        Ok(())
    }

    /// Weight matrix `[fan_in, fan_out]` drawn uniformly from ±1/√fan_in.
    pub fn init_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        if self.params[i].value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                self.params[i].value.shape(),
                value.shape()
            )));
        }
        self.params[i].value = value;
        Ok(())
    }

    pub fn get_mut_data(&mut self, name: &str) -> Result<&mut [f64]> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        Ok(self.params[i].value.data_mut())
    }

    /// Registers every parameter as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), true))
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Gradients in parameter order; parameters unused by the loss get zeros.
    pub fn collect_grads(&self, grads: &mut Gradients, bound: &Bound) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(bound.vars())
            .map(|(p, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (p, g) in self.params.iter_mut().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!("gradient shape for '{}'", p.name)));
            }
            let values = p.value.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let m = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * gi;
                let v = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * gi * gi;
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                values[i] -= cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}
