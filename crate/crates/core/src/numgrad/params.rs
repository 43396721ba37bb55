use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NumError, Real, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named learnable tensor with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Parameter<F = f32> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub trainable: bool,
}

/// Owns every parameter of a model. Modules hold [`ParamId`]s into it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F = f32> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId, NumError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumError::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
            trainable: true,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    /// Uniform(-bound, bound) init with `bound = gain·sqrt(6/(fan_in+fan_out))`.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId, NumError> {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| {
            F::of(rng.gen_range(-bound..=bound.max(f64::MIN_POSITIVE)))
        });
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    /// Sets `trainable` on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Copies a gradient map into the `grad` buffers (absent entries become zero).
    pub fn set_grads(&mut self, grads: &super::Gradients<F>) {
        self.zero_grads();
        for (id, g) in grads.iter() {
            if let Some(p) = self.params.get_mut(id.0) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Little-endian f32 blob of all parameters under `prefix`, in insertion order.
    pub fn blob(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            out.extend_from_slice(&p.value.to_le_f32_bytes());
        }
        out
    }

    /// Overwrites values from another store by name. Shapes must match.
    pub fn copy_from(&mut self, other: &ParamStore<F>, prefix: &str) -> Result<(), NumError> {
        for (_, src) in other.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
            let id = self
                .id(&src.name)
                .ok_or_else(|| NumError::Contract(format!("unknown parameter {}", src.name)))?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != src.value.shape() {
                return Err(NumError::Dimension(format!(
                    "{}: {:?} vs {:?}",
                    src.name,
                    dst.value.shape(),
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
