//! Contrastive, matching and sequence losses.
//!
//! The graph kernels here are what training differentiates; the plain
//! functions evaluate the same kernels on fixed inputs.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{stack, PooledFeature};
use crate::ots::Ots;
use crate::params::ParamStore;
use crate::queue::FeatureQueue;
use crate::seed::derive_seed;
use crate::vocab::TokenId;

/// Seed tags for queue sampling, shared with the trainer so a step and the
/// standalone loss functions draw the same negatives.
pub const TAG_NEG_OTS: u64 = 1;
pub const TAG_NEG_IMG: u64 = 2;
pub const TAG_NEG_TEACHER: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub foc: f64,
    pub fom: f64,
    pub om: f64,
    pub kd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            foc: 1.0,
            fom: 1.0,
            om: 1.0,
            kd: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(foc: f64, fom: f64, om: f64, kd: f64) -> Result<Self> {
        let w = Self { foc, fom, om, kd };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.foc, self.fom, self.om, self.kd];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub foc: f64,
    pub fom: f64,
    pub om: f64,
    pub kd: f64,
}

/// Temperatures and denominator convention for one InfoNCE evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contrast {
    pub tau: f64,
    pub tau_prime: f64,
    /// Standard InfoNCE keeps the positive in the denominator. Without it
    /// the loss is unbounded below.
    pub include_positive: bool,
}

impl Contrast {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            tau_prime: tau,
            include_positive: true,
        }
    }
}

/// Matching-head outputs for one batch, grouped by anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchBatch {
    pub logits: Vec<[f64; 2]>,
    /// `true` when the image belongs to the anchor's OTS.
    pub labels: Vec<bool>,
    pub n_anchors: usize,
}

impl MatchBatch {
    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_negative(&self) -> usize {
        self.labels.len() - self.n_positive()
    }
}

/// One InfoNCE term. `anchor` and `positive` are 1×d unit rows,
/// `negatives` is n×d. Logits are `[s⁺/τ, s_k/τ′]` with target 0.
pub fn info_nce_graph(
    g: &mut Graph,
    anchor: Var,
    positive: Var,
    negatives: Var,
    tau: Var,
    tau_prime: Var,
    include_positive: bool,
) -> Var {
    let prod = g.mul(anchor, positive);
    let pos = g.sum_all(prod);
    let pos = g.div_scalar(pos, tau);
    let neg = g.matmul_nt(anchor, negatives);
    let neg = g.div_scalar(neg, tau_prime);
    if include_positive {
        let logits = g.concat_cols(&[pos, neg]);
        g.cross_entropy(logits, &[Some(0)])
    } else {
        let lse = g.logsumexp(neg);
        g.sub(lse, pos)
    }
}

/// −log softmax(z)[0] for a positive pair, −log softmax(z)[1] otherwise.
pub fn match_graph_loss(g: &mut Graph, logits: Var, positive: bool) -> Var {
    g.cross_entropy(logits, &[Some(if positive { 0 } else { 1 })])
}

/// Teacher-forced next-token cross-entropy summed over positions. Row k of
/// `logits` predicts `targets[k + 1]`; rows past the true length are ignored.
pub fn sequence_graph_loss(g: &mut Graph, logits: Var, targets: &[TokenId]) -> Result<Var> {
    let rows = g.value(logits).nrows();
    let n_v = g.value(logits).ncols();
    let mut t = vec![None; rows];
    for k in 0..rows.min(targets.len().saturating_sub(1)) {
        let id = targets[k + 1].index();
        if id >= n_v {
            return Err(Error::Shape(format!("target id {} outside vocabulary of {n_v}", targets[k + 1].0)));
        }
        t[k] = Some(id);
    }
    Ok(g.cross_entropy(logits, &t))
}

fn row(f: &PooledFeature) -> Array2<f64> {
    Array2::from_shape_vec((1, f.dim()), f.as_slice().to_vec()).expect("row shape")
}

/// Evaluates one term on fixed features.
pub fn info_nce_term(anchor: &PooledFeature, positive: &PooledFeature, negatives: &Array2<f64>, c: Contrast) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let a = g.constant(row(anchor));
    let p = g.constant(row(positive));
    let n = g.constant(negatives.clone());
    let tau = g.constant(Array2::from_elem((1, 1), c.tau));
    let tau_p = g.constant(Array2::from_elem((1, 1), c.tau_prime));
    let l = info_nce_graph(&mut g, a, p, n, tau, tau_p, c.include_positive);
    g.scalar(l)
}

fn check_batch(lists: &[&[PooledFeature]]) -> Result<usize> {
    let n = lists[0].len();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if lists.iter().any(|l| l.len() != n) {
        return Err(Error::Shape("feature lists differ in length".into()));
    }
    Ok(n)
}

/// Symmetric image/OTS InfoNCE averaged over the batch. FOC uses τ for
/// both numerator and denominator.
pub fn loss_foc(
    gi: &[PooledFeature],
    go: &[PooledFeature],
    qi: &FeatureQueue,
    qo: &FeatureQueue,
    c: Contrast,
    n_neg: usize,
    seed: u64,
) -> Result<f64> {
    let n = check_batch(&[gi, go])?;
    let neg_o = qo.sample_matrix(n_neg, derive_seed(seed, TAG_NEG_OTS))?;
    let neg_i = qi.sample_matrix(n_neg, derive_seed(seed, TAG_NEG_IMG))?;
    let c = Contrast { tau_prime: c.tau, ..c };
    let total: f64 = gi
        .iter()
        .zip(go)
        .map(|(i, o)| info_nce_term(i, o, &neg_o, c) + info_nce_term(o, i, &neg_i, c))
        .sum();
    Ok(total / n as f64)
}

/// Pulls image and OTS features toward the embedded teacher features,
/// with negatives from the teacher queue.
pub fn loss_kd(
    gi: &[PooledFeature],
    go: &[PooledFeature],
    gs: &[PooledFeature],
    qs: &FeatureQueue,
    c: Contrast,
    n_neg: usize,
    seed: u64,
) -> Result<f64> {
    let n = check_batch(&[gi, go, gs])?;
    let neg = qs.sample_matrix(n_neg, derive_seed(seed, TAG_NEG_TEACHER))?;
    let total: f64 = gi
        .iter()
        .zip(go)
        .zip(gs)
        .map(|((i, o), s)| info_nce_term(i, s, &neg, c) + info_nce_term(o, s, &neg, c))
        .sum();
    Ok(total / n as f64)
}

/// Sum of per-sample matching cross-entropies, averaged over anchors.
pub fn loss_fom(batch: &MatchBatch) -> Result<f64> {
    if batch.logits.is_empty() || batch.logits.len() != batch.labels.len() || batch.n_anchors == 0 {
        return Err(Error::Shape("match batch is empty or inconsistent".into()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let mut total = 0.0;
    for (z, &label) in batch.logits.iter().zip(&batch.labels) {
        let v = g.constant(Array2::from_shape_vec((1, 2), z.to_vec()).expect("1x2"));
        let l = match_graph_loss(&mut g, v, label);
        total += g.scalar(l);
    }
    Ok(total / batch.n_anchors as f64)
}

/// Next-token cross-entropy over the full vocabulary, summed over
/// positions and averaged over the batch. `logits` is `[N × (k̃−1) × N_v]`.
pub fn loss_om(logits: &Array3<f64>, targets: &[Ots]) -> Result<f64> {
    let (n, rows, _) = logits.dim();
    if n != targets.len() || n == 0 {
        return Err(Error::Shape(format!("{n} logit blocks for {} targets", targets.len())));
    }
    let store = ParamStore::new();
    let mut total = 0.0;
    for (j, t) in targets.iter().enumerate() {
        if rows + 1 != t.max_len() {
            return Err(Error::Shape(format!("logits cover {rows} positions, k̃ is {}", t.max_len())));
        }
        let mut g = Graph::new(&store);
        let l = g.constant(logits.index_axis(ndarray::Axis(0), j).to_owned());
        let loss = sequence_graph_loss(&mut g, l, t.tokens())?;
        total += g.scalar(loss);
    }
    Ok(total / n as f64)
}

/// Same kernel as [`loss_om`]; only the conditioning source differs.
pub fn loss_som(logits: &Array3<f64>, targets: &[Ots]) -> Result<f64> {
    loss_om(logits, targets)
}

pub fn loss_total(parts: &LossParts, w: &LossWeights) -> f64 {
    w.foc * parts.foc + w.fom * parts.fom + w.om * parts.om + w.kd * parts.kd
}

/// Pairwise cosine matrix between two stacks of unit features.
pub fn similarity_matrix(a: &[PooledFeature], b: &[PooledFeature]) -> Array2<f64> {
    stack(a).dot(&stack(b).t())
}
