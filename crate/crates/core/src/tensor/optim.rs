use std::f64::consts::PI;

use super::backward::Gradients;
use super::graph::Graph;
use super::value::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named learnable tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients of every parameter bound on `graph`. Parameters the
    /// loss did not reach receive an explicit zero gradient.
    pub fn accumulate_grads(&mut self, graph: &Graph, grads: &Gradients) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
        for &(id, var) in &graph.params {
            if let Some(g) = grads.raw(var) {
                let dst = self.params[id.0]
                    .grad
                    .as_mut()
                    .expect("initialized above")
                    .data_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<f32>>) {
        self.velocity = velocity;
    }

    /// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`, then clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if self.velocity.len() != store.params.len() {
            self.velocity = store
                .params
                .iter()
                .map(|p| vec![0.0; p.value.numel()])
                .collect();
        }
        for (p, v) in store.params.iter_mut().zip(&mut self.velocity) {
            let grad = p.grad.take().expect("checked above");
            let (theta, g) = (p.value.data_mut(), grad.data());
            for i in 0..theta.len() {
                v[i] = self.momentum * v[i] + g[i] + self.weight_decay * theta[i];
                theta[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

/// Half-cosine decay from `base_lr` at step 0 to zero at `total_steps`.
/// Steps past the end stay at the final value.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f32) -> f32 {
    if total_steps == 0 {
        return 0.0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    (base_lr as f64 * 0.5 * (1.0 + (PI * t).cos())) as f32
}
