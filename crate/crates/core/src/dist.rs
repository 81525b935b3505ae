//! In-process simulation of sharded pre-training with a dedicated teacher
//! worker. Model workers and the teacher run as scoped threads that talk
//! only through FIFO channels.

use std::sync::mpsc;
use std::thread;

use ndarray::Array2;
use serde::Serialize;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::loss::{loss_total, LossParts};
use crate::render::FuncImage;
use crate::schedule::LrSchedule;
use crate::teacher::Teacher;
use crate::train::{
    apply_update, plan_step, reduce_parts, shard_forward_backward, sum_grads, ShardItem, ShardOutput, StepPlan,
    StepReport, TrainConfig, TrainState,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkerTopology {
    pub n_model_workers: usize,
    /// Id of the worker hosting the teacher; model workers are `0..K`.
    pub teacher_worker: Option<usize>,
}

impl WorkerTopology {
    pub fn new(n_model_workers: usize) -> Self {
        Self {
            n_model_workers,
            teacher_worker: Some(n_model_workers),
        }
    }

    pub fn validate(&self) -> Result<usize> {
        let k = self.n_model_workers;
        if k == 0 {
            return Err(Error::Topology("at least one model worker is required".into()));
        }
        match self.teacher_worker {
            None => Err(Error::Topology("no teacher worker".into())),
            Some(t) if t < k => Err(Error::Topology(format!("teacher id {t} collides with a model worker"))),
            Some(t) => Ok(t),
        }
    }

    /// Contiguous, near-equal slices of `0..n`, one per model worker.
    pub fn shards(&self, n: usize) -> Vec<std::ops::Range<usize>> {
        let k = self.n_model_workers;
        let (base, extra) = (n / k, n % k);
        let mut start = 0;
        (0..k)
            .map(|w| {
                let len = base + usize::from(w < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum MessageKind {
    /// Matching-negative image between model workers.
    Image,
    /// Formula strings to the teacher.
    Formulas,
    /// Teacher features back to a model worker.
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct MessageRecord {
    pub kind: MessageKind,
    pub from: usize,
    pub to: usize,
    pub items: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct DistResult {
    pub parts: LossParts,
    pub total: f64,
    /// Formula bytes up plus `f32` feature bytes down.
    pub transfer_bytes: u64,
    pub grads: Vec<Option<Array2<f64>>>,
    pub shards: Vec<ShardOutput>,
    pub plan: StepPlan,
    pub log: Vec<MessageRecord>,
}

struct HiddenWire {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl HiddenWire {
    fn encode(h: &Array2<f64>) -> Self {
        Self {
            rows: h.nrows(),
            cols: h.ncols(),
            data: h.iter().map(|&v| v as f32).collect(),
        }
    }

    fn decode(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.iter().map(|&v| v as f64).collect())
            .expect("wire shape")
    }

    fn bytes(&self) -> u64 {
        4 * self.data.len() as u64
    }
}

/// Runs the forward and backward pass of one step across `K` model workers
/// and one teacher worker. Parameters and queues are not modified.
pub fn dist_sim_run(
    topology: &WorkerTopology,
    state: &TrainState,
    batch: &[&Sample],
    teacher: &dyn Teacher,
    cfg: &TrainConfig,
) -> Result<DistResult> {
    let teacher_id = topology.validate()?;
    let plan = plan_step(&state.queues, batch.len(), state.step, cfg)?;
    let shards = topology.shards(batch.len());
    let owner: Vec<usize> = shards
        .iter()
        .enumerate()
        .flat_map(|(w, r)| r.clone().map(move |_| w))
        .collect();

    let mut log = Vec::new();
    // Matching negatives whose image lives on another worker are shipped
    // ahead of the step.
    for (j, &k) in plan.partner.iter().enumerate() {
        if owner[j] != owner[k] {
            log.push(MessageRecord {
                kind: MessageKind::Image,
                from: owner[k],
                to: owner[j],
                items: 1,
                bytes: batch[k].image.to_f32_bytes().len() as u64,
            });
        }
    }

    let model = &state.model;
    let plan_ref = &plan;
    let n_total = batch.len();
    let outputs = thread::scope(|scope| -> Result<Vec<ShardOutput>> {
        let (up_tx, up_rx) = mpsc::channel::<(usize, Vec<String>)>();
        let mut down_tx = Vec::new();
        let mut down_rx = Vec::new();
        for _ in 0..topology.n_model_workers {
            let (tx, rx) = mpsc::channel::<Result<Vec<HiddenWire>>>();
            down_tx.push(tx);
            down_rx.push(rx);
        }
        let (out_tx, out_rx) = mpsc::channel::<(usize, Result<ShardOutput>)>();

        let k = topology.n_model_workers;
        let teacher_handle = scope.spawn(move || -> Vec<MessageRecord> {
            let mut got: Vec<Option<Vec<String>>> = vec![None; k];
            let mut records = Vec::new();
            for _ in 0..k {
                let Ok((w, strings)) = up_rx.recv() else { break };
                records.push(MessageRecord {
                    kind: MessageKind::Formulas,
                    from: w,
                    to: teacher_id,
                    items: strings.len(),
                    bytes: strings.iter().map(|s| s.len() as u64).sum(),
                });
                got[w] = Some(strings);
            }
            // One teacher pass over the gathered batch, then split.
            let all: Vec<(usize, String)> = got
                .into_iter()
                .enumerate()
                .flat_map(|(w, s)| s.unwrap_or_default().into_iter().map(move |f| (w, f)))
                .collect();
            let hidden: Result<Vec<Array2<f64>>> = all.iter().map(|(_, f)| teacher.extract(f).map(|h| h.values)).collect();
            match hidden {
                Ok(hidden) => {
                    let mut per: Vec<Vec<HiddenWire>> = (0..k).map(|_| Vec::new()).collect();
                    for ((w, _), h) in all.iter().zip(&hidden) {
                        per[*w].push(HiddenWire::encode(h));
                    }
                    for (w, rows) in per.into_iter().enumerate() {
                        records.push(MessageRecord {
                            kind: MessageKind::Hidden,
                            from: teacher_id,
                            to: w,
                            items: rows.len(),
                            bytes: rows.iter().map(HiddenWire::bytes).sum(),
                        });
                        let _ = down_tx[w].send(Ok(rows));
                    }
                }
                Err(e) => {
                    let msg = e.to_string();
                    for tx in &down_tx {
                        let _ = tx.send(Err(Error::Config(format!("teacher worker failed: {msg}"))));
                    }
                }
            }
            records
        });

        for (w, rx) in down_rx.into_iter().enumerate() {
            let range = shards[w].clone();
            let up_tx = up_tx.clone();
            let out_tx = out_tx.clone();
            let owner = &owner;
            scope.spawn(move || {
                let mine = &batch[range.clone()];
                let formulas = mine.iter().map(|s| s.formula.clone()).collect();
                let _ = up_tx.send((w, formulas));
                let result = rx.recv().map_err(|_| Error::Topology("teacher channel closed".into()));
                let result = result.and_then(|r| r).and_then(|wire| {
                    let hidden: Vec<Array2<f64>> = wire.iter().map(HiddenWire::decode).collect();
                    let items: Vec<ShardItem> = range
                        .clone()
                        .enumerate()
                        .map(|(local, j)| {
                            let partner = plan_ref.partner.get(j).copied();
                            ShardItem {
                                sample: batch[j],
                                teacher_hidden: &hidden[local],
                                partner_image: partner.map(|k| -> &FuncImage { &batch[k].image }),
                                partner_local: partner.filter(|&k| owner[k] == w).map(|k| k - range.start),
                            }
                        })
                        .collect();
                    shard_forward_backward(model, &items, plan_ref, cfg, n_total, true)
                });
                let _ = out_tx.send((w, result));
            });
        }
        drop(up_tx);
        drop(out_tx);

        let mut outs: Vec<Option<ShardOutput>> = (0..k).map(|_| None).collect();
        let mut first_err = None;
        for (w, r) in out_rx {
            match r {
                Ok(o) => outs[w] = Some(o),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        log.extend(teacher_handle.join().expect("teacher worker panicked"));
        if let Some(e) = first_err {
            return Err(e);
        }
        Ok(outs.into_iter().map(|o| o.expect("every worker reports")).collect())
    })?;

    log.sort();
    let sums: Vec<LossParts> = outputs.iter().map(|o| o.sums).collect();
    let parts = reduce_parts(&sums, n_total);
    let total = loss_total(&parts, &cfg.weights);
    let grads = sum_grads(
        outputs.iter().map(|o| o.grads.as_deref().unwrap_or(&[])),
        state.model.params.len(),
    );
    let transfer_bytes = log
        .iter()
        .filter(|m| m.kind != MessageKind::Image)
        .map(|m| m.bytes)
        .sum();
    Ok(DistResult {
        parts,
        total,
        transfer_bytes,
        grads,
        shards: outputs,
        plan,
        log,
    })
}

/// A full training step through the simulation.
pub fn dist_pretrain_step(
    topology: &WorkerTopology,
    state: &mut TrainState,
    batch: &[&Sample],
    teacher: &dyn Teacher,
    cfg: &TrainConfig,
    schedule: &LrSchedule,
) -> Result<(StepReport, DistResult)> {
    let r = dist_sim_run(topology, state, batch, teacher, cfg)?;
    let report = apply_update(state, &r.shards, batch.len(), cfg, schedule)?;
    Ok((report, r))
}
