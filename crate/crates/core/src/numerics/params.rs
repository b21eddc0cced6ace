use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors. Entries flagged in a frozen mask never change
/// under [`Adam::step`] and always report a zero gradient.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    frozen: Vec<Option<Vec<bool>>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.frozen.push(None);
        ParamId(self.values.len() - 1)
    }

    pub fn set_frozen_mask(&mut self, id: ParamId, mask: Vec<bool>) {
        assert_eq!(mask.len(), self.values[id.0].len(), "mask size");
        self.frozen[id.0] = Some(mask);
    }

    pub fn frozen_mask(&self, id: ParamId) -> Option<&[bool]> {
        self.frozen[id.0].as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(value.shape(), self.values[id.0].shape(), "parameter shape is fixed");
        self.values[id.0] = Arc::new(value);
    }

    /// Snapshot of every value, in id order.
    pub fn values(&self) -> Vec<Tensor> {
        self.values.iter().map(|t| (**t).clone()).collect()
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.param(Arc::clone(v))).collect(),
        }
    }

    /// Gradients for every parameter, with frozen entries zeroed.
    pub fn collect_grads(&self, bound: &Bound<'_>, grads: &mut Gradients) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(&self.frozen)
            .map(|(v, mask)| {
                let mut g = grads.take_id(v.id());
                if let Some(mask) = mask {
                    for (x, &f) in g.data_mut().iter_mut().zip(mask) {
                        if f {
                            *x = 0.0;
                        }
                    }
                }
                g
            })
            .collect()
    }

    fn value_mut(&mut self, id: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id])
    }
}

/// Parameters bound to one tape.
#[derive(Debug, Clone)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps externally created leaves, in [`ParamStore`] id order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            first: store.values.iter().map(|t| vec![0.0; t.len()]).collect(),
            second: store.values.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let frozen = store.frozen[i].clone();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let value = store.value_mut(i);
            for (j, (p, &gj)) in value.data_mut().iter_mut().zip(g.data()).enumerate() {
                if frozen.as_ref().is_some_and(|f| f[j]) {
                    continue;
                }
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
