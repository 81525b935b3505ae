//! Named parameter storage with weight sharing, plus the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
}

/// Tensors addressed by stable names. Several names may alias one slot;
/// writes through any alias are visible through all of them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    names: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>, trainable: bool) -> ParamId {
        assert!(!self.names.contains_key(name), "duplicate parameter {name}");
        let id = self.slots.len();
        self.slots.push(Slot {
            name: name.to_string(),
            value,
            trainable,
        });
        self.names.insert(name.to_string(), id);
        id
    }

    /// Makes `alias` refer to the storage of `target`.
    pub fn alias(&mut self, alias: &str, target: &str) -> Result<ParamId> {
        let id = self.id(target)?;
        if self.names.contains_key(alias) {
            return Err(Error::Config(format!("parameter {alias} already exists")));
        }
        self.names.insert(alias.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.slots[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.slots[id].value
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        Ok(self.value(self.id(name)?))
    }

    pub fn slot(&self, id: ParamId) -> &Slot {
        &self.slots[id]
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.slots[id].trainable = trainable;
    }

    /// Every name (including aliases) with its slot.
    pub fn names(&self) -> &BTreeMap<String, ParamId> {
        &self.names
    }

    pub fn aliases(&self) -> Vec<(String, String)> {
        self.names
            .iter()
            .filter(|(name, &id)| self.slots[id].name != **name)
            .map(|(name, &id)| (name.clone(), self.slots[id].name.clone()))
            .collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn slots_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .names
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, &id)| id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Seeded initializer: Gaussian weights, Gaussian biases, unit LayerNorm gains.
pub struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
    fan_in: bool,
}

impl Initializer {
    pub fn new(seed: u64, std: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, std).expect("std > 0"),
            fan_in: false,
        }
    }

    /// Projection matrices drawn with std `1/sqrt(rows)` instead of the
    /// fixed std.
    pub fn with_fan_in(mut self, on: bool) -> Self {
        self.fan_in = on;
        self
    }

    pub fn gaussian(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || self.normal.sample(&mut self.rng))
    }

    /// A `rows → cols` projection applied as `x·W`.
    pub fn matrix(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let m = self.gaussian(rows, cols);
        if self.fan_in {
            m / (self.normal.std_dev() * (rows as f64).sqrt())
        } else {
            m
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .slots()
            .iter()
            .map(|s| Array2::zeros(s.value.raw_dim()))
            .collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Slots without a gradient or marked frozen are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Array2<f64>>], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !params.slot(id).trainable {
                continue;
            }
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let p = params.value_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}
