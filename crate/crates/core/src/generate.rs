//! Autoregressive OTS decoding.

use crate::error::Result;
use crate::features::FeatureMatrix;
use crate::nn::Model;
use crate::ots::Ots;
use crate::vocab::{OperatorVocab, TokenId};

/// Produces next-token logits for a prefix that starts with BOS.
pub trait NextToken {
    fn next_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// A trained decoder bound to one conditioning matrix.
pub struct Conditioned<'a> {
    pub model: &'a Model,
    pub cond: &'a FeatureMatrix,
}

impl NextToken for Conditioned<'_> {
    fn next_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let logits = self.model.decode_prefix(prefix, self.cond)?;
        Ok(logits.row(logits.nrows() - 1).to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decoding {
    #[default]
    Greedy,
    Beam(usize),
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// First index of the maximum, so ties break toward smaller ids.
fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Decodes from BOS until EOS or until the sequence fills k̃. Special
/// tokens other than EOS are never emitted after BOS.
pub fn generate_ots(scorer: &dyn NextToken, vocab: &OperatorVocab, max_len: usize, mode: Decoding) -> Result<Ots> {
    let banned = [vocab.pad(), vocab.bos(), vocab.mask()];
    let mask = |z: &mut Vec<f64>| {
        for t in banned {
            if let Some(v) = z.get_mut(t.index()) {
                *v = f64::NEG_INFINITY;
            }
        }
    };
    match mode {
        Decoding::Greedy => {
            let mut seq = vec![vocab.bos()];
            while seq.len() < max_len {
                let mut z = scorer.next_logits(&seq)?;
                mask(&mut z);
                let t = TokenId::from_index(argmax(&z));
                seq.push(t);
                if t == vocab.eos() {
                    break;
                }
            }
            Ots::from_tokens(&seq, max_len, vocab.pad())
        }
        Decoding::Beam(width) => {
            let width = width.max(1);
            let mut live: Vec<(Vec<TokenId>, f64)> = vec![(vec![vocab.bos()], 0.0)];
            let mut done: Vec<(Vec<TokenId>, f64)> = Vec::new();
            while !live.is_empty() {
                let mut cand: Vec<(Vec<TokenId>, f64)> = Vec::new();
                for (seq, score) in &live {
                    let mut z = scorer.next_logits(seq)?;
                    mask(&mut z);
                    let lp = log_softmax(&z);
                    for (i, &l) in lp.iter().enumerate() {
                        if l.is_finite() {
                            let mut s = seq.clone();
                            s.push(TokenId::from_index(i));
                            cand.push((s, score + l));
                        }
                    }
                }
                // Stable sort keeps generation order among equal scores,
                // which matches greedy's tie-breaking at width 1.
                cand.sort_by(|a, b| b.1.total_cmp(&a.1));
                cand.truncate(width);
                live.clear();
                for (seq, score) in cand {
                    if *seq.last().expect("non-empty") == vocab.eos() || seq.len() >= max_len {
                        done.push((seq, score));
                    } else {
                        live.push((seq, score));
                    }
                }
                if done.len() >= width {
                    let best_live = live.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
                    let worst_done = done.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
                    if best_live <= worst_done {
                        break;
                    }
                }
            }
            let best = done
                .into_iter()
                .reduce(|a, b| if b.1 > a.1 { b } else { a })
                .expect("at least one hypothesis finishes");
            Ots::from_tokens(&best.0, max_len, vocab.pad())
        }
    }
}
