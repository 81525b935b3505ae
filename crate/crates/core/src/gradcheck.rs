//! Central finite-difference checks of analytic parameter gradients.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub n_coords: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Added to the denominator so coordinates with near-zero gradient do
    /// not blow up the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            n_coords: 200,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    /// Largest relative error seen per tensor.
    pub max_rel_err: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.values().copied().fold(0.0, f64::max)
    }

    pub fn failing(&self, tolerance: f64) -> Vec<String> {
        self.max_rel_err
            .iter()
            .filter(|(_, &e)| !(e < tolerance))
            .map(|(n, _)| n.clone())
            .collect()
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / (a.abs().max(n.abs()) + floor)
}

/// Compares `grads` against central differences of `loss` on a random
/// subset of trainable coordinates. `grads` is indexed by slot.
pub fn gradcheck(
    params: &mut ParamStore,
    grads: &[Option<Array2<f64>>],
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (slot, s) in params.slots().iter().enumerate() {
        if s.trainable {
            coords.extend((0..s.value.len()).map(|i| (slot, i)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picked = sample(&mut rng, coords.len(), cfg.n_coords.min(coords.len()));
    let names = slot_names(params);
    let mut report = GradCheckReport {
        coords: Vec::new(),
        max_rel_err: BTreeMap::new(),
    };
    for k in picked.into_iter() {
        let (slot, i) = coords[k];
        let analytic = grads
            .get(slot)
            .and_then(|g| g.as_ref())
            .map_or(0.0, |g| g.as_slice().expect("standard layout")[i]);
        let orig = params.value(slot).as_slice().expect("standard layout")[i];
        let set = |p: &mut ParamStore, v: f64| p.value_mut(slot).as_slice_mut().expect("standard layout")[i] = v;
        set(params, orig + cfg.step);
        let up = loss(params);
        set(params, orig - cfg.step);
        let down = loss(params);
        set(params, orig);
        let numeric = (up? - down?) / (2.0 * cfg.step);
        let e = rel_err(analytic, numeric, cfg.floor);
        let name = names[slot].clone();
        let worst = report.max_rel_err.entry(name.clone()).or_insert(0.0);
        *worst = worst.max(e);
        report.coords.push(CoordCheck {
            tensor: name,
            index: i,
            analytic,
            numeric,
            rel_err: e,
        });
    }
    Ok(report)
}

/// Like [`gradcheck`] but returns an error naming the offending tensors.
pub fn gradcheck_strict(
    params: &mut ParamStore,
    grads: &[Option<Array2<f64>>],
    loss: impl FnMut(&ParamStore) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let report = gradcheck(params, grads, loss, cfg)?;
    let bad = report.failing(cfg.tolerance);
    if bad.is_empty() {
        Ok(report)
    } else {
        Err(Error::GradCheckFailure(bad))
    }
}

fn slot_names(params: &ParamStore) -> Vec<String> {
    params.slots().iter().map(|s| s.name.clone()).collect()
}
