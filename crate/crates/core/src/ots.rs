//! Operation tree skeleton sequences (OTS) and constant vectors.
//!
//! A tree serializes to its pre-order token ids framed `BOS … EOS` and padded
//! with `PAD`. Arity comes from the vocabulary, so no bracket tokens are needed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, ReconstructionError, ReconstructionReason, Result};
use crate::tree::{Node, OperationTree};
use crate::vocab::{OperatorVocab, Symbol, TokenId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ots {
    ids: Vec<TokenId>,
    true_len: usize,
}

impl Ots {
    /// Pads `tokens` with `pad` up to `max_len`.
    pub fn from_tokens(tokens: &[TokenId], max_len: usize, pad: TokenId) -> Result<Self> {
        if tokens.len() > max_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: max_len,
            });
        }
        // Trailing PAD is padding, not content.
        let true_len = tokens.iter().rposition(|&t| t != pad).map_or(0, |i| i + 1);
        let mut ids = tokens[..true_len].to_vec();
        ids.resize(max_len, pad);
        Ok(Self { ids, true_len })
    }

    /// The de-padded sequence.
    pub fn tokens(&self) -> &[TokenId] {
        &self.ids[..self.true_len]
    }

    /// The full padded sequence of length k̃.
    pub fn padded(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn true_len(&self) -> usize {
        self.true_len
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of `C` tokens in the sequence.
    pub fn const_slots(&self, vocab: &OperatorVocab) -> usize {
        let c = vocab.constant();
        self.tokens().iter().filter(|&&t| t == c).count()
    }
}

/// Constant values with a visibility mask. Masked slots hold 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstVec {
    values: Vec<f64>,
    mask: Vec<bool>,
    true_len: usize,
}

impl ConstVec {
    pub fn from_values(values: &[f64]) -> Self {
        Self {
            values: values.to_vec(),
            mask: vec![true; values.len()],
            true_len: values.len(),
        }
    }

    /// Visible constants padded (masked) to `capacity` slots.
    pub fn padded(values: &[f64], capacity: usize) -> Result<Self> {
        if values.len() > capacity {
            return Err(Error::Length {
                len: values.len(),
                max: capacity,
            });
        }
        let mut v = values.to_vec();
        v.resize(capacity, 0.0);
        let mut mask = vec![true; values.len()];
        mask.resize(capacity, false);
        Ok(Self {
            values: v,
            mask,
            true_len: values.len(),
        })
    }

    /// Same slot count with every value hidden (c̃).
    pub fn masked(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            mask: vec![false; self.values.len()],
            true_len: self.true_len,
        }
    }

    pub fn with_capacity(&self, capacity: usize) -> Result<Self> {
        if self.true_len > capacity {
            return Err(Error::Length {
                len: self.true_len,
                max: capacity,
            });
        }
        let mut values = self.values.clone();
        let mut mask = self.mask.clone();
        values.resize(capacity, 0.0);
        mask.resize(capacity, false);
        values.truncate(capacity);
        mask.truncate(capacity);
        Ok(Self {
            values,
            mask,
            true_len: self.true_len,
        })
    }

    pub fn true_len(&self) -> usize {
        self.true_len
    }

    pub fn capacity(&self) -> usize {
        self.values.len()
    }

    pub fn raw_values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_visible(&self, slot: usize) -> bool {
        slot < self.true_len && self.mask[slot]
    }

    /// The first `true_len` values, failing if any is masked.
    pub fn visible(&self) -> Result<&[f64]> {
        if let Some(slot) = (0..self.true_len).find(|&i| !self.mask[i]) {
            return Err(Error::MaskedConst(slot));
        }
        Ok(&self.values[..self.true_len])
    }
}

/// Pre-order serialization. Refuses to clip: trees longer than `max_len - 2`
/// are a [`Error::Length`].
pub fn tree_to_ots(tree: &OperationTree, vocab: &OperatorVocab, max_len: usize) -> Result<Ots> {
    let mut tokens = Vec::with_capacity(tree.n_nodes() + 2);
    tokens.push(vocab.bos());
    for node in tree.pre_order() {
        let id = vocab.id(node.symbol).ok_or_else(|| {
            Error::Config(format!("token {} is not in the vocabulary", node.symbol.name()))
        })?;
        tokens.push(id);
    }
    tokens.push(vocab.eos());
    Ots::from_tokens(&tokens, max_len, vocab.pad())
}

struct Rebuild<'a> {
    vocab: &'a OperatorVocab,
    body: &'a [TokenId],
    pos: usize,
}

impl Rebuild<'_> {
    fn fail(&self, reason: ReconstructionReason) -> ReconstructionError {
        ReconstructionError {
            reason,
            position: self.pos + 1,
        }
    }

    fn node(&mut self, depth: usize) -> std::result::Result<Node, ReconstructionError> {
        let Some(&id) = self.body.get(self.pos) else {
            return Err(self.fail(ReconstructionReason::DanglingChildren));
        };
        let symbol = match self.vocab.symbol(id) {
            Some(Symbol::Eos) => return Err(self.fail(ReconstructionReason::DanglingChildren)),
            Some(s) if s.is_node() => s,
            _ => return Err(self.fail(ReconstructionReason::UnknownToken)),
        };
        // the body is bounded by k̃, so depth cannot exceed it for valid input
        if depth > self.body.len() {
            return Err(self.fail(ReconstructionReason::DanglingChildren));
        }
        self.pos += 1;
        let children = (0..symbol.arity())
            .map(|_| self.node(depth + 1))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Node {
            symbol,
            children,
            const_slot: None,
        })
    }
}

/// Rebuilds a tree from a possibly malformed sequence. Every failure reason
/// counts as a non-reconstructible sample for the regularity metric.
pub fn ots_to_tree(
    ots: &Ots,
    consts: &ConstVec,
    vocab: &OperatorVocab,
) -> std::result::Result<OperationTree, ReconstructionError> {
    let tokens = ots.tokens();
    if tokens.first() != Some(&vocab.bos()) {
        return Err(ReconstructionError {
            reason: ReconstructionReason::UnknownToken,
            position: 0,
        });
    }
    let body = &tokens[1..];
    let mut r = Rebuild {
        vocab,
        body,
        pos: 0,
    };
    let root = r.node(0)?;
    match body.get(r.pos) {
        None => return Err(r.fail(ReconstructionReason::MissingEos)),
        Some(&t) if t == vocab.eos() => {}
        Some(_) => return Err(r.fail(ReconstructionReason::TrailingTokens)),
    }
    let after = &body[r.pos + 1..];
    if let Some(offset) = after.iter().position(|&t| t != vocab.pad()) {
        return Err(ReconstructionError {
            reason: ReconstructionReason::TrailingTokens,
            position: r.pos + 2 + offset,
        });
    }
    let tree = OperationTree::new(root).expect("arity respected by construction");
    if tree.n_consts() > consts.true_len() {
        return Err(ReconstructionError {
            reason: ReconstructionReason::ConstUnderflow,
            position: tokens.len(),
        });
    }
    Ok(tree)
}
