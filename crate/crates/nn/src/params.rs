//! Named parameter sets with per-parameter Adam state.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{NnError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor owned by a [`ParamStore`].
///
/// Non-trainable entries hold buffers such as batch-norm running statistics:
/// they are checkpointed with the weights but never touched by the optimizer.
#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Option<Vec<F>>,
    pub adam_m: Vec<F>,
    pub adam_v: Vec<F>,
    pub step_count: u64,
    pub trainable: bool,
}

impl<F: Scalar> Parameter<F> {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: Vec<F>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if value.len() != expected {
            return Err(NnError::Shape {
                op: "param",
                detail: format!("{name}: {} values for shape {shape:?}", value.len()),
            });
        }
        if self.index.contains_key(&name) {
            return Err(NnError::State(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let n = value.len();
        self.params.push(Parameter {
            name: name.clone(),
            shape: shape.to_vec(),
            value,
            grad: None,
            adam_m: vec![F::zero(); n],
            adam_v: vec![F::zero(); n],
            step_count: 0,
            trainable,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    /// Adds a trainable parameter drawn from `uniform(-bound, bound)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| F::lit(rng.gen_range(-bound..=bound)))
            .collect();
        self.add(name, shape, value, true)
    }

    pub fn add_constant(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fill: f64,
        trainable: bool,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, shape, vec![F::lit(fill); n], trainable)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.len())
            .sum()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Sets every value (weights and buffers) to zero.
    pub fn zero_values(&mut self) {
        for p in &mut self.params {
            p.value.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Converts the store into another precision, including optimizer state.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let conv = |xs: &[F]| -> Vec<G> {
            xs.iter()
                .map(|x| G::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect()
        };
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: conv(&p.value),
                    grad: p.grad.as_deref().map(conv),
                    adam_m: conv(&p.adam_m),
                    adam_v: conv(&p.adam_v),
                    step_count: p.step_count,
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Global L2 norm over all present gradients.
    pub fn grad_norm(&self) -> F {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|&g| g * g)
            .sum::<F>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: F) -> F {
        let norm = self.grad_norm();
        if norm > max_norm {
            let scale = max_norm / norm;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.iter_mut().for_each(|x| *x = *x * scale);
            }
        }
        norm
    }
}
