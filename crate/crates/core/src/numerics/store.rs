use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Parameter {
    name: String,
    value: Tensor,
    grad: Vec<f32>,
    first_moment: Vec<f32>,
    second_moment: Vec<f32>,
}

/// Named trainable tensors with gradient slots and Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId, NumericsError> {
        if self.by_name.contains_key(name) {
            return Err(NumericsError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let n = value.len();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].grad
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Copies values (not optimizer state) from `other`, matching by name.
    pub fn copy_values_from(&mut self, other: &ParameterStore) {
        for p in &mut self.params {
            if let Some(id) = other.id(&p.name) {
                p.value.data_mut().copy_from_slice(other.value(id).data());
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algo", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd {
        lr: f32,
    },
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f32) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f32 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

/// Applies one update from the accumulated gradients, then zeroes them.
/// Aborts without touching any parameter if a gradient is not finite.
pub fn optimizer_step(store: &mut ParameterStore, cfg: &OptimizerConfig) -> Result<(), NumericsError> {
    for p in &store.params {
        if let Some(index) = p.grad.iter().position(|g| !g.is_finite()) {
            return Err(NumericsError::NonFiniteGrad {
                name: p.name.clone(),
                index,
            });
        }
    }
    store.step += 1;
    match *cfg {
        OptimizerConfig::Sgd { lr } => {
            for p in &mut store.params {
                for (w, g) in p.value.data_mut().iter_mut().zip(&p.grad) {
                    *w -= lr * g;
                }
            }
        }
        OptimizerConfig::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } => {
            let t = store.step as i32;
            let bias1 = 1.0 - beta1.powi(t);
            let bias2_sqrt = (1.0 - beta2.powi(t)).sqrt();
            let step_size = lr / bias1;
            for p in &mut store.params {
                let Parameter {
                    value,
                    grad,
                    first_moment,
                    second_moment,
                    ..
                } = p;
                for (((w, &g), m), v) in value
                    .data_mut()
                    .iter_mut()
                    .zip(grad.iter())
                    .zip(first_moment.iter_mut())
                    .zip(second_moment.iter_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= step_size * *m / ((*v).sqrt() / bias2_sqrt + eps);
                }
            }
        }
    }
    store.zero_grads();
    Ok(())
}
