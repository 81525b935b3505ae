//! Reconstruction rate and Levenshtein similarities.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::formula::tree_to_formula;
use crate::ots::{ots_to_tree, ConstVec, Ots};
use crate::vocab::{OperatorVocab, TokenId};

/// Insert/delete/substitute distance, two-row DP.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn levenshtein_str(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRow {
    pub reconstructs: bool,
    pub seq_distance: usize,
    pub pred_len: usize,
    pub target_len: usize,
    /// Character distance between formulas, present when `reconstructs`.
    pub formula_distance: Option<usize>,
    pub target_formula_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub acc_r: f64,
    pub s_rl: f64,
    pub s_rl_tilde: f64,
    pub n_samples: usize,
    pub rows: Vec<SampleRow>,
}

/// Predicted constants are read from the target vector by slot, so a
/// reconstructed skeleton is compared under the target's numerics. Missing
/// slots are zero.
fn borrowed_consts(target: &ConstVec, n: usize) -> ConstVec {
    let values: Vec<f64> = (0..n)
        .map(|i| {
            if i < target.true_len() && target.is_visible(i) {
                target.raw_values()[i]
            } else {
                0.0
            }
        })
        .collect();
    ConstVec::from_values(&values)
}

pub fn metric_suite(
    pred: &[Ots],
    target: &[Ots],
    pred_consts: Option<&[ConstVec]>,
    target_consts: &[ConstVec],
    vocab: &OperatorVocab,
) -> Result<MetricReport> {
    if pred.len() != target.len() || target.len() != target_consts.len() {
        return Err(Error::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    if let Some(pc) = pred_consts {
        if pc.len() != pred.len() {
            return Err(Error::LengthMismatch {
                pred: pc.len(),
                target: pred.len(),
            });
        }
    }
    if pred.is_empty() {
        return Err(Error::LengthMismatch { pred: 0, target: 0 });
    }
    let mut rows = Vec::with_capacity(pred.len());
    let (mut acc, mut srl, mut srl_t) = (0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        let p: &[TokenId] = pred[i].tokens();
        let t: &[TokenId] = target[i].tokens();
        let d = levenshtein(p, t);
        srl += (t.len() as f64 - d as f64) / t.len() as f64;
        let target_tree = ots_to_tree(&target[i], &target_consts[i], vocab)?;
        let target_formula = tree_to_formula(&target_tree, &target_consts[i])?;
        let mut row = SampleRow {
            reconstructs: false,
            seq_distance: d,
            pred_len: p.len(),
            target_len: t.len(),
            formula_distance: None,
            target_formula_len: target_formula.chars().count(),
        };
        // Regularity is structural: any slot count is accepted here.
        let placeholder = ConstVec::from_values(&vec![0.0; pred[i].max_len()]);
        if let Ok(tree) = ots_to_tree(&pred[i], &placeholder, vocab) {
            let consts = match pred_consts {
                Some(pc) if pc[i].visible().map_or(0, |v| v.len()) >= tree.n_consts() => pc[i].clone(),
                _ => borrowed_consts(&target_consts[i], tree.n_consts()),
            };
            let formula = tree_to_formula(&tree, &consts)?;
            let fd = levenshtein_str(&formula, &target_formula);
            row.reconstructs = true;
            row.formula_distance = Some(fd);
            acc += 1.0;
            srl_t += (row.target_formula_len as f64 - fd as f64) / row.target_formula_len as f64;
        }
        rows.push(row);
    }
    let n = pred.len() as f64;
    Ok(MetricReport {
        acc_r: acc / n,
        s_rl: srl / n,
        s_rl_tilde: srl_t / n,
        n_samples: pred.len(),
        rows,
    })
}
