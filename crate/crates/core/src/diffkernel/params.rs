use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Position of a UNet layer group on the down/mid/up path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerPath {
    Down,
    Mid,
    Up,
}

impl fmt::Display for LayerPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerPath::Down => "down",
            LayerPath::Mid => "mid",
            LayerPath::Up => "up",
        })
    }
}

/// Grouping tag read by the gradient probe.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayerTag {
    pub layer: String,
    pub path: LayerPath,
    pub block: usize,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    /// Multiplier on the optimizer learning rate.
    pub lr_scale: f64,
    pub tag: Option<LayerTag>,
}

/// Named parameter registry with stable (insertion) order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, tag: Option<LayerTag>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.clone(), value, grad, trainable: true, lr_scale: 1.0, tag });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        self.params[id.0].grad.add_assign(grad);
    }

    /// Marks every parameter whose name starts with `prefix`; returns how many matched.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    pub fn set_lr_scale(&mut self, prefix: &str, scale: f64) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.lr_scale = scale;
            n += 1;
        }
        n
    }

    /// Flat copy of every parameter value, in registry order.
    pub fn snapshot(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    /// Flat copy of the parameters under `prefix`.
    pub fn snapshot_prefix(&self, prefix: &str) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Appends every parameter of `other`, failing on name collisions.
    pub fn merge(&mut self, other: ParamStore) -> Result<Vec<ParamId>> {
        let mut ids = Vec::with_capacity(other.params.len());
        for p in other.params {
            let tag = p.tag.clone();
            let id = self.add(p.name, p.value, tag)?;
            self.params[id.0].trainable = p.trainable;
            self.params[id.0].lr_scale = p.lr_scale;
            ids.push(id);
        }
        Ok(ids)
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    prefix: String,
    tag: Option<LayerTag>,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        ParamBuilder { store, rng, prefix: String::new(), tag: None }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, R> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        ParamBuilder { store: &mut *self.store, rng: &mut *self.rng, prefix, tag: self.tag.clone() }
    }

    /// Like [`sub`](Self::sub) but tags every parameter below for the gradient probe.
    pub fn tagged(&mut self, name: &str, path: LayerPath, block: usize) -> ParamBuilder<'_, R> {
        let mut b = self.sub(name);
        b.tag = Some(LayerTag { layer: b.prefix.clone(), path, block });
        b
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, value, self.tag.clone())
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape, 1.0))
    }

    /// Kaiming-uniform with unit gain: U(-b, b), b = sqrt(3 / fan_in).
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let n = super::tensor::numel(shape);
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.tensor(name, Tensor::new(shape, data)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        use rand_distr::{Distribution, StandardNormal};
        let n = super::tensor::numel(shape);
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                z * std
            })
            .collect();
        self.tensor(name, Tensor::new(shape, data)?)
    }
}
