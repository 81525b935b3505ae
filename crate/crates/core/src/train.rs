//! Pre-training and fine-tuning loops.
//!
//! A pre-training step is split into a plan (batch, negatives, matching
//! partners), a shard computation that builds one tape over a slice of the
//! batch, and an update. The distributed simulation reuses the shard
//! computation per worker.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::features::{PooledFeature, Pooling};
use crate::loss::{
    info_nce_graph, match_graph_loss, sequence_graph_loss, LossParts, LossWeights, TAG_NEG_IMG, TAG_NEG_OTS,
    TAG_NEG_TEACHER,
};
use crate::nn::{Ctx, Model, OtsInput};
use crate::params::{Adam, AdamConfig};
use crate::queue::FeatureQueue;
use crate::render::FuncImage;
use crate::schedule::LrSchedule;
use crate::seed::{derive_seed, derive_seed_path};
use crate::teacher::Teacher;

const TAG_QUEUE_IMG: u64 = 0x91;
const TAG_QUEUE_OTS: u64 = 0x92;
const TAG_QUEUE_TEACHER: u64 = 0x93;
const TAG_PARTNER: u64 = 0xfa;
const TAG_DROPOUT: u64 = 0xd0;
const TAG_EPOCH: u64 = 0xe0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub batch_size: usize,
    pub steps: u64,
    pub lr_warmup_start: f64,
    pub lr_max: f64,
    pub lr_decay: f64,
    pub decay_every_epochs: u64,
    pub warmup_fraction: f64,
    pub queue_capacity: usize,
    pub n_neg: usize,
    pub seed: u64,
    pub include_positive: bool,
    pub pooling: Pooling,
    pub teacher_pooling: Pooling,
    pub tau_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fine-tuning only: whether the conditioning encoder keeps learning.
    pub train_encoder: bool,
    /// Treat the positive of each image/OTS contrastive term as a constant,
    /// so every term only moves its anchor. Loss values are unchanged.
    pub detach_keys: bool,
    /// Same for the teacher-side positive of the distillation terms, which
    /// otherwise trains the embedder.
    pub detach_teacher: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            batch_size: 16,
            steps: 1000,
            lr_warmup_start: 1e-6,
            lr_max: 1e-4,
            lr_decay: 0.9,
            decay_every_epochs: 5,
            warmup_fraction: 0.05,
            queue_capacity: 256,
            n_neg: 32,
            seed: 0,
            include_positive: true,
            pooling: Pooling::FirstToken,
            teacher_pooling: Pooling::Mean,
            tau_min: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            train_encoder: true,
            detach_keys: true,
            detach_teacher: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.queue_capacity == 0 {
            return Err(Error::Config("batch size and queue capacity must be positive".into()));
        }
        if self.n_neg > self.queue_capacity {
            return Err(Error::Sample {
                requested: self.n_neg,
                capacity: self.queue_capacity,
            });
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> u64 {
        (n_samples / self.batch_size).max(1) as u64
    }

    pub fn schedule(&self, n_samples: usize) -> LrSchedule {
        LrSchedule {
            warmup_start: self.lr_warmup_start,
            lr_max: self.lr_max,
            decay: self.lr_decay,
            decay_every_epochs: self.decay_every_epochs,
            ..LrSchedule::for_run(self.steps, self.steps_per_epoch(n_samples), self.warmup_fraction)
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// The three MoCo-style queues.
#[derive(Debug, Clone, PartialEq)]
pub struct Queues {
    pub img: FeatureQueue,
    pub ots: FeatureQueue,
    pub teacher: FeatureQueue,
}

impl Queues {
    pub fn new(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            img: FeatureQueue::new(capacity, dim, derive_seed(seed, TAG_QUEUE_IMG))?,
            ots: FeatureQueue::new(capacity, dim, derive_seed(seed, TAG_QUEUE_OTS))?,
            teacher: FeatureQueue::new(capacity, dim, derive_seed(seed, TAG_QUEUE_TEACHER))?,
        })
    }
}

/// Everything a resumed run needs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub queues: Queues,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(&model.params, cfg.adam());
        let queues = Queues::new(cfg.queue_capacity, model.config().d_f, cfg.seed)?;
        Ok(Self {
            model,
            adam,
            queues,
            step: 0,
        })
    }
}

/// Indices of the batch at `step`: an epoch-seeded permutation sliced in
/// order, so any step's batch is computable without replaying earlier ones.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let batch = batch.min(n);
    let per_epoch = (n / batch) as u64;
    let epoch = step / per_epoch;
    let within = (step % per_epoch) as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed_path(seed, &[TAG_EPOCH, epoch])));
    perm[within * batch..(within + 1) * batch].to_vec()
}

/// Random cyclic permutation (no fixed points) by Sattolo's algorithm.
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

pub fn step_seed(cfg: &TrainConfig, step: u64) -> u64 {
    derive_seed(cfg.seed, step)
}

/// Randomness fixed before any forward pass of a step.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub step: u64,
    pub seed: u64,
    pub neg_img: Array2<f64>,
    pub neg_ots: Array2<f64>,
    pub neg_teacher: Array2<f64>,
    /// Batch position whose image serves as the matching negative for each
    /// anchor. Empty for single-sample batches.
    pub partner: Vec<usize>,
}

pub fn plan_step(queues: &Queues, batch_len: usize, step: u64, cfg: &TrainConfig) -> Result<StepPlan> {
    let seed = step_seed(cfg, step);
    Ok(StepPlan {
        step,
        seed,
        neg_img: queues.img.sample_matrix(cfg.n_neg, derive_seed(seed, TAG_NEG_IMG))?,
        neg_ots: queues.ots.sample_matrix(cfg.n_neg, derive_seed(seed, TAG_NEG_OTS))?,
        neg_teacher: queues.teacher.sample_matrix(cfg.n_neg, derive_seed(seed, TAG_NEG_TEACHER))?,
        partner: if batch_len > 1 {
            derangement(batch_len, derive_seed(seed, TAG_PARTNER))
        } else {
            Vec::new()
        },
    })
}

/// One anchor as seen by a shard.
pub struct ShardItem<'a> {
    pub sample: &'a Sample,
    pub teacher_hidden: &'a Array2<f64>,
    /// Image paired with the anchor as a matching negative.
    pub partner_image: Option<&'a FuncImage>,
    /// Position of that image inside the same shard, when present.
    pub partner_local: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ShardOutput {
    /// Unnormalized per-part sums over the shard.
    pub sums: LossParts,
    pub grads: Option<Vec<Option<Array2<f64>>>>,
    pub gi: Vec<PooledFeature>,
    pub go: Vec<PooledFeature>,
    pub gs: Vec<PooledFeature>,
}

pub fn pool_graph(g: &mut Graph, h: Var, pooling: Pooling) -> Var {
    let p = match pooling {
        Pooling::FirstToken => g.select_rows(h, &[0]),
        Pooling::Mean => g.mean_rows(h),
    };
    g.normalize_rows(p)
}

fn detach(g: &mut Graph, v: Var) -> Var {
    let value = g.value(v).clone();
    g.constant(value)
}

fn pooled_value(g: &Graph, v: Var) -> PooledFeature {
    PooledFeature::from_unit(g.value(v).row(0).to_vec())
}

/// Builds the pre-training tape over one shard. Gradients of
/// `Σ λ·sum / n_total` are returned when `with_grads` is set.
pub fn shard_forward_backward(
    model: &Model,
    items: &[ShardItem],
    plan: &StepPlan,
    cfg: &TrainConfig,
    n_total: usize,
    with_grads: bool,
) -> Result<ShardOutput> {
    if items.is_empty() {
        return Ok(ShardOutput {
            sums: LossParts::default(),
            grads: with_grads.then(|| vec![None; model.params.len()]),
            gi: Vec::new(),
            go: Vec::new(),
            gs: Vec::new(),
        });
    }
    let mut g = Graph::new(&model.params);
    let mut ctx = Ctx::train(model.config().dropout, derive_seed_path(plan.seed, &[TAG_DROPOUT, items.len() as u64]));
    let (tau, tau_p) = model.tau_graph(&mut g);
    let neg_img = g.constant(plan.neg_img.clone());
    let neg_ots = g.constant(plan.neg_ots.clone());
    let neg_teacher = g.constant(plan.neg_teacher.clone());

    let mut hi = Vec::with_capacity(items.len());
    for it in items {
        hi.push(model.image_graph(&mut g, &mut ctx, &it.sample.image)?);
    }
    let (mut foc, mut fom, mut om, mut kd) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut gi_v, mut go_v, mut gs_v) = (Vec::new(), Vec::new(), Vec::new());
    for (j, it) in items.iter().enumerate() {
        let s = it.sample;
        let gi = pool_graph(&mut g, hi[j], cfg.pooling);
        let ho = model.ots_graph(&mut g, &mut ctx, &OtsInput::compact(&s.ots, &s.consts), None)?;
        let go = pool_graph(&mut g, ho, cfg.pooling);
        let th = g.constant(it.teacher_hidden.clone());
        let hs = model.embedder_graph(&mut g, th)?;
        let gs = pool_graph(&mut g, hs, cfg.teacher_pooling);

        let (key_i, key_o) = if cfg.detach_keys {
            (detach(&mut g, gi), detach(&mut g, go))
        } else {
            (gi, go)
        };
        let a = info_nce_graph(&mut g, gi, key_o, neg_ots, tau, tau, cfg.include_positive);
        let b = info_nce_graph(&mut g, go, key_i, neg_img, tau, tau, cfg.include_positive);
        foc.push(g.add(a, b));

        let key_s = if cfg.detach_teacher { detach(&mut g, gs) } else { gs };
        let a = info_nce_graph(&mut g, gi, key_s, neg_teacher, tau, tau_p, cfg.include_positive);
        let b = info_nce_graph(&mut g, go, key_s, neg_teacher, tau, tau_p, cfg.include_positive);
        kd.push(g.add(a, b));

        let masked = s.consts.masked();
        let input = OtsInput::compact(&s.ots, &masked);
        let h_pos = model.ots_graph(&mut g, &mut ctx, &input, Some(hi[j]))?;
        let z_pos = model.match_graph(&mut g, h_pos);
        let mut m = match_graph_loss(&mut g, z_pos, true);
        if let Some(img) = it.partner_image {
            let h_img = match it.partner_local {
                Some(k) => hi[k],
                None => model.image_graph(&mut g, &mut ctx, img)?,
            };
            let h_neg = model.ots_graph(&mut g, &mut ctx, &input, Some(h_img))?;
            let z_neg = model.match_graph(&mut g, h_neg);
            let l = match_graph_loss(&mut g, z_neg, false);
            m = g.add(m, l);
        }
        fom.push(m);

        let toks = s.ots.tokens();
        let logits = model.decoder_graph(&mut g, &mut ctx, &toks[..toks.len() - 1], hi[j])?;
        om.push(sequence_graph_loss(&mut g, logits, toks)?);

        gi_v.push(pooled_value(&g, gi));
        go_v.push(pooled_value(&g, go));
        gs_v.push(pooled_value(&g, gs));
    }
    let foc = g.add_scalars(&foc);
    let fom = g.add_scalars(&fom);
    let om = g.add_scalars(&om);
    let kd = g.add_scalars(&kd);
    let sums = LossParts {
        foc: g.scalar(foc),
        fom: g.scalar(fom),
        om: g.scalar(om),
        kd: g.scalar(kd),
    };
    let grads = if with_grads {
        let w = cfg.weights;
        let mut terms = Vec::new();
        for (var, lambda) in [(foc, w.foc), (fom, w.fom), (om, w.om), (kd, w.kd)] {
            if lambda > 0.0 {
                terms.push(if lambda == 1.0 { var } else { g.scale(var, lambda) });
            }
        }
        let root = g.add_scalars(&terms);
        Some(g.backward_with(root, 1.0 / n_total as f64).params)
    } else {
        None
    };
    Ok(ShardOutput {
        sums,
        grads,
        gi: gi_v,
        go: go_v,
        gs: gs_v,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub parts: LossParts,
    pub total: f64,
}

/// Per-part means from shard sums.
pub fn reduce_parts(sums: &[LossParts], n_total: usize) -> LossParts {
    let n = n_total as f64;
    let mut acc = sums[0];
    for s in &sums[1..] {
        acc.foc += s.foc;
        acc.fom += s.fom;
        acc.om += s.om;
        acc.kd += s.kd;
    }
    LossParts {
        foc: acc.foc / n,
        fom: acc.fom / n,
        om: acc.om / n,
        kd: acc.kd / n,
    }
}

fn check_finite(parts: &LossParts, total: f64, grads: &[Option<Array2<f64>>], step: u64) -> Result<()> {
    let finite = [parts.foc, parts.fom, parts.om, parts.kd, total].iter().all(|v| v.is_finite())
        && grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
    if finite {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step })
    }
}

/// Teacher outputs for a batch. The teacher is frozen, so callers may cache.
pub fn teacher_batch(teacher: &dyn Teacher, samples: &[&Sample]) -> Result<Vec<Array2<f64>>> {
    samples
        .iter()
        .map(|s| teacher.extract(&s.formula).map(|h| h.values))
        .collect()
}

/// Items for a whole batch held by one worker.
pub fn batch_items<'a>(batch: &[&'a Sample], hidden: &'a [Array2<f64>], plan: &StepPlan) -> Vec<ShardItem<'a>> {
    batch
        .iter()
        .enumerate()
        .map(|(j, s)| ShardItem {
            sample: s,
            teacher_hidden: &hidden[j],
            partner_image: plan.partner.get(j).map(|&k| &batch[k].image),
            partner_local: plan.partner.get(j).copied(),
        })
        .collect()
}

/// The full forward pass of one step without updating anything.
pub fn pretrain_forward(
    state: &TrainState,
    batch: &[&Sample],
    teacher: &dyn Teacher,
    cfg: &TrainConfig,
) -> Result<(StepPlan, ShardOutput)> {
    let plan = plan_step(&state.queues, batch.len(), state.step, cfg)?;
    let hidden = teacher_batch(teacher, batch)?;
    let items = batch_items(batch, &hidden, &plan);
    let out = shard_forward_backward(&state.model, &items, &plan, cfg, batch.len(), true)?;
    Ok((plan, out))
}

/// One optimizer update followed by queue pushes. A non-finite loss leaves
/// parameters, optimizer and queues untouched.
pub fn pretrain_step(
    state: &mut TrainState,
    batch: &[&Sample],
    teacher: &dyn Teacher,
    cfg: &TrainConfig,
    schedule: &LrSchedule,
) -> Result<StepReport> {
    let (_, out) = pretrain_forward(state, batch, teacher, cfg)?;
    apply_update(state, &[out], batch.len(), cfg, schedule)
}

/// Shared tail of the monolithic and distributed steps.
pub fn apply_update(
    state: &mut TrainState,
    shards: &[ShardOutput],
    n_total: usize,
    cfg: &TrainConfig,
    schedule: &LrSchedule,
) -> Result<StepReport> {
    let sums: Vec<LossParts> = shards.iter().map(|s| s.sums).collect();
    let parts = reduce_parts(&sums, n_total);
    let total = crate::loss::loss_total(&parts, &cfg.weights);
    let grads = sum_grads(shards.iter().map(|s| s.grads.as_deref().unwrap_or(&[])), state.model.params.len());
    check_finite(&parts, total, &grads, state.step)?;
    let lr = schedule.lr(state.step);
    state.adam.step(&mut state.model.params, &grads, lr);
    state.model.clamp_temperatures(cfg.tau_min);
    for s in shards {
        state.queues.img.push(&s.gi);
        state.queues.ots.push(&s.go);
        state.queues.teacher.push(&s.gs);
    }
    let report = StepReport {
        step: state.step,
        lr,
        parts,
        total,
    };
    state.step += 1;
    Ok(report)
}

/// Slot-wise sum; a slot is `None` only when no shard produced it.
pub fn sum_grads<'a>(
    shards: impl Iterator<Item = &'a [Option<Array2<f64>>]>,
    n_slots: usize,
) -> Vec<Option<Array2<f64>>> {
    let mut acc: Vec<Option<Array2<f64>>> = vec![None; n_slots];
    for grads in shards {
        for (slot, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                match &mut acc[slot] {
                    Some(a) => *a += g,
                    None => acc[slot] = Some(g.clone()),
                }
            }
        }
    }
    acc
}

/// Runs pre-training from `state.step` up to `cfg.steps`.
pub fn pretrain(
    state: &mut TrainState,
    data: &[Sample],
    teacher: &dyn Teacher,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    let schedule = cfg.schedule(data.len());
    let mut log = Vec::new();
    while state.step < cfg.steps {
        let idx = batch_indices(data.len(), cfg.batch_size, cfg.seed, state.step);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
        let r = pretrain_step(state, &batch, teacher, cfg, &schedule)?;
        on_step(&r);
        log.push(r);
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneTask {
    /// Decoder conditioned on image features.
    FuncimgOts,
    /// Decoder conditioned on embedded teacher features.
    FormulaOts,
}

impl std::str::FromStr for FinetuneTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "funcimg-ots" => Ok(Self::FuncimgOts),
            "formula-ots" => Ok(Self::FormulaOts),
            other => Err(Error::Config(format!("unknown fine-tune task {other}"))),
        }
    }
}

/// Conditioning features for the decoder as a graph node.
pub fn condition_graph(
    model: &Model,
    g: &mut Graph,
    ctx: &mut Ctx,
    task: FinetuneTask,
    sample: &Sample,
    hidden: Option<&Array2<f64>>,
) -> Result<Var> {
    match task {
        FinetuneTask::FuncimgOts => model.image_graph(g, ctx, &sample.image),
        FinetuneTask::FormulaOts => {
            let th = hidden.ok_or_else(|| Error::Config("formula task needs teacher features".into()))?;
            let th = g.constant(th.clone());
            model.embedder_graph(g, th)
        }
    }
}

/// Mean sequence loss over a batch, optionally with parameter gradients.
pub fn sequence_batch_loss(
    model: &Model,
    task: FinetuneTask,
    batch: &[&Sample],
    hidden: &[Option<&Array2<f64>>],
    dropout_seed: u64,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Option<Array2<f64>>>>)> {
    let mut g = Graph::new(&model.params);
    let mut ctx = Ctx::train(model.config().dropout, dropout_seed);
    let mut terms = Vec::with_capacity(batch.len());
    for (s, h) in batch.iter().zip(hidden) {
        let cond = condition_graph(model, &mut g, &mut ctx, task, s, *h)?;
        let toks = s.ots.tokens();
        let logits = model.decoder_graph(&mut g, &mut ctx, &toks[..toks.len() - 1], cond)?;
        terms.push(sequence_graph_loss(&mut g, logits, toks)?);
    }
    let sum = g.add_scalars(&terms);
    let n = batch.len() as f64;
    let loss = g.scalar(sum) / n;
    let grads = with_grads.then(|| g.backward_with(sum, 1.0 / n).params);
    Ok((loss, grads))
}

/// Fine-tunes the decoder on one task with a fresh optimizer. Returns the
/// per-step loss log.
pub fn finetune(
    model: &mut Model,
    data: &[Sample],
    teacher: Option<&dyn Teacher>,
    task: FinetuneTask,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty fine-tuning set".into()));
    }
    let hidden: Vec<Option<Array2<f64>>> = match task {
        FinetuneTask::FuncimgOts => vec![None; data.len()],
        FinetuneTask::FormulaOts => {
            let t = teacher.ok_or_else(|| Error::Config("formula-ots fine-tuning needs a teacher".into()))?;
            data.iter()
                .map(|s| t.extract(&s.formula).map(|h| Some(h.values)))
                .collect::<Result<_>>()?
        }
    };
    let cond_prefix = match task {
        FinetuneTask::FuncimgOts => "img.",
        FinetuneTask::FormulaOts => "embed.",
    };
    let saved: Vec<bool> = model.params.slots().iter().map(|s| s.trainable).collect();
    model.set_trainable_prefix(cond_prefix, cfg.train_encoder);
    let schedule = cfg.schedule(data.len());
    let mut adam = Adam::new(&model.params, cfg.adam());
    let mut log = Vec::with_capacity(cfg.steps as usize);
    let mut result = Ok(());
    for step in 0..cfg.steps {
        let idx = batch_indices(data.len(), cfg.batch_size, cfg.seed, step);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
        let h: Vec<Option<&Array2<f64>>> = idx.iter().map(|&i| hidden[i].as_ref()).collect();
        let seed = derive_seed_path(cfg.seed, &[TAG_DROPOUT, step]);
        let (loss, grads) = match sequence_batch_loss(model, task, &batch, &h, seed, true) {
            Ok(v) => v,
            Err(e) => {
                result = Err(e);
                break;
            }
        };
        let grads = grads.expect("requested");
        if !loss.is_finite() || grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            result = Err(Error::NonFiniteLoss { step });
            break;
        }
        adam.step(&mut model.params, &grads, schedule.lr(step));
        log.push(loss);
    }
    for (id, t) in saved.into_iter().enumerate() {
        model.params.set_trainable(id, t);
    }
    result.map(|_| log)
}
