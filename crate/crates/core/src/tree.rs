//! Operation trees and the seeded random tree generator.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{BinaryOp, OperatorVocab, Symbol, UnaryOp};

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub symbol: Symbol,
    pub children: Vec<Node>,
    /// Set on `Const` leaves only.
    pub const_slot: Option<usize>,
}

impl Node {
    pub fn var(index: u8) -> Self {
        Node {
            symbol: Symbol::Var(index),
            children: Vec::new(),
            const_slot: None,
        }
    }

    /// A constant placeholder; its slot is assigned by [`OperationTree::new`].
    pub fn constant() -> Self {
        Node {
            symbol: Symbol::Const,
            children: Vec::new(),
            const_slot: None,
        }
    }

    pub fn unary(op: UnaryOp, child: Node) -> Self {
        Node {
            symbol: Symbol::Unary(op),
            children: vec![child],
            const_slot: None,
        }
    }

    pub fn binary(op: BinaryOp, lhs: Node, rhs: Node) -> Self {
        Node {
            symbol: Symbol::Binary(op),
            children: vec![lhs, rhs],
            const_slot: None,
        }
    }

    fn count(&self) -> usize {
        1 + self.children.iter().map(Node::count).sum::<usize>()
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a Node>) {
        out.push(self);
        for c in &self.children {
            c.visit(out);
        }
    }

    fn assign_slots(&mut self, next: &mut usize) {
        if self.symbol == Symbol::Const {
            self.const_slot = Some(*next);
            *next += 1;
        } else {
            self.const_slot = None;
        }
        for c in &mut self.children {
            c.assign_slots(next);
        }
    }

    fn check_arity(&self) -> Result<()> {
        if self.symbol.is_special() {
            return Err(Error::Config(format!(
                "special token {} cannot be a tree node",
                self.symbol.name()
            )));
        }
        if self.children.len() != self.symbol.arity() {
            return Err(Error::Config(format!(
                "{} expects {} children, got {}",
                self.symbol.name(),
                self.symbol.arity(),
                self.children.len()
            )));
        }
        self.children.iter().try_for_each(Node::check_arity)
    }
}

/// A rooted expression tree. Constant slots are numbered 0.. in pre-order.
#[derive(Debug, Clone, PartialEq)]
pub struct OperationTree {
    root: Node,
    n_nodes: usize,
    n_consts: usize,
}

impl OperationTree {
    pub fn new(mut root: Node) -> Result<Self> {
        root.check_arity()?;
        let mut n_consts = 0;
        root.assign_slots(&mut n_consts);
        Ok(Self {
            n_nodes: root.count(),
            n_consts,
            root,
        })
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_consts(&self) -> usize {
        self.n_consts
    }

    pub fn pre_order(&self) -> Vec<&Node> {
        let mut out = Vec::with_capacity(self.n_nodes);
        self.root.visit(&mut out);
        out
    }

    pub fn var_dims_used(&self) -> BTreeSet<usize> {
        self.pre_order()
            .into_iter()
            .filter_map(|n| match n.symbol {
                Symbol::Var(i) => Some(i as usize),
                _ => None,
            })
            .collect()
    }

    pub fn max_var(&self) -> Option<usize> {
        self.var_dims_used().into_iter().next_back()
    }
}

/// Settings for the random tree generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub node_range: [usize; 2],
    pub var_count: usize,
    pub p_const_leaf: f64,
    /// Sampling weight per operator name. Operators absent from the map are not generated.
    pub op_weights: BTreeMap<String, f64>,
    pub seed: u64,
    /// k̃; trees must fit `n_nodes + 2` tokens.
    pub max_ots_len: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        let op_weights = BinaryOp::ALL
            .iter()
            .map(|op| op.name())
            .chain(UnaryOp::ALL.iter().map(|op| op.name()))
            .map(|n| (n.to_string(), 1.0))
            .collect();
        Self {
            node_range: [5, 15],
            var_count: 1,
            p_const_leaf: 0.3,
            op_weights,
            seed: 0,
            max_ots_len: 24,
        }
    }
}

impl GenConfig {
    pub fn vocab(&self) -> Result<OperatorVocab> {
        let binary: Vec<BinaryOp> = BinaryOp::ALL
            .iter()
            .copied()
            .filter(|op| self.op_weights.contains_key(op.name()))
            .collect();
        let unary: Vec<UnaryOp> = UnaryOp::ALL
            .iter()
            .copied()
            .filter(|op| self.op_weights.contains_key(op.name()))
            .collect();
        OperatorVocab::with_ops(self.var_count, &binary, &unary)
    }

    fn weight(&self, name: &str) -> f64 {
        self.op_weights.get(name).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.node_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid node range [{lo}, {hi}]")));
        }
        if hi + 2 > self.max_ots_len {
            return Err(Error::Config(format!(
                "node range upper bound {hi} does not fit OTS length {}",
                self.max_ots_len
            )));
        }
        if !(0.0..=1.0).contains(&self.p_const_leaf) {
            return Err(Error::Config("p_const_leaf must lie in [0, 1]".into()));
        }
        if self.p_const_leaf >= 1.0 {
            return Err(Error::Config(
                "p_const_leaf = 1 never produces a variable leaf".into(),
            ));
        }
        if self.op_weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("operator weights must be finite and >= 0".into()));
        }
        for name in self.op_weights.keys() {
            match Symbol::from_name(name) {
                Some(Symbol::Binary(_)) | Some(Symbol::Unary(_)) => {}
                _ => return Err(Error::Config(format!("unknown operator {name:?}"))),
            }
        }
        if self.var_count == 0 {
            return Err(Error::Config("at least one variable is required".into()));
        }
        Ok(())
    }
}

struct Sampler<'a> {
    cfg: &'a GenConfig,
    unary: Vec<(UnaryOp, f64)>,
    binary: Vec<(BinaryOp, f64)>,
    pow_weight: f64,
    feasible: Vec<bool>,
}

impl<'a> Sampler<'a> {
    fn new(cfg: &'a GenConfig) -> Self {
        let unary: Vec<(UnaryOp, f64)> = UnaryOp::ALL
            .iter()
            .map(|&op| (op, cfg.weight(op.name())))
            .filter(|(_, w)| *w > 0.0)
            .collect();
        let binary: Vec<(BinaryOp, f64)> = BinaryOp::ALL
            .iter()
            .filter(|&&op| op != BinaryOp::Pow)
            .map(|&op| (op, cfg.weight(op.name())))
            .filter(|(_, w)| *w > 0.0)
            .collect();
        // pow only takes a constant exponent during generation
        let pow_weight = if cfg.p_const_leaf > 0.0 {
            cfg.weight(BinaryOp::Pow.name())
        } else {
            0.0
        };
        let max_n = cfg.node_range[1];
        let mut feasible = vec![false; max_n + 1];
        for n in 1..=max_n {
            feasible[n] = n == 1
                || (!unary.is_empty() && feasible[n - 1])
                || (pow_weight > 0.0 && n >= 3 && feasible[n - 2])
                || (!binary.is_empty()
                    && n >= 3
                    && (1..=n - 2).any(|l| feasible[l] && feasible[n - 1 - l]));
        }
        Self {
            cfg,
            unary,
            binary,
            pow_weight,
            feasible,
        }
    }

    fn leaf(&self, rng: &mut ChaCha8Rng) -> Node {
        if rng.random::<f64>() < self.cfg.p_const_leaf {
            Node::constant()
        } else {
            Node::var(rng.random_range(0..self.cfg.var_count) as u8)
        }
    }

    fn tree(&self, n: usize, rng: &mut ChaCha8Rng) -> Node {
        if n == 1 {
            return self.leaf(rng);
        }
        enum Choice {
            Unary(UnaryOp),
            Binary(BinaryOp),
            Pow,
        }
        let mut options: Vec<(Choice, f64)> = Vec::new();
        if self.feasible[n - 1] {
            options.extend(self.unary.iter().map(|&(op, w)| (Choice::Unary(op), w)));
        }
        let splits: Vec<usize> = if n >= 3 {
            (1..=n - 2)
                .filter(|&l| self.feasible[l] && self.feasible[n - 1 - l])
                .collect()
        } else {
            Vec::new()
        };
        if !splits.is_empty() {
            options.extend(self.binary.iter().map(|&(op, w)| (Choice::Binary(op), w)));
        }
        if n >= 3 && self.pow_weight > 0.0 && self.feasible[n - 2] {
            options.push((Choice::Pow, self.pow_weight));
        }
        let total: f64 = options.iter().map(|(_, w)| w).sum();
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = options.len() - 1;
        for (i, (_, w)) in options.iter().enumerate() {
            if pick < *w {
                chosen = i;
                break;
            }
            pick -= w;
        }
        match options.swap_remove(chosen).0 {
            Choice::Unary(op) => Node::unary(op, self.tree(n - 1, rng)),
            Choice::Binary(op) => {
                let l = splits[rng.random_range(0..splits.len())];
                let lhs = self.tree(l, rng);
                let rhs = self.tree(n - 1 - l, rng);
                Node::binary(op, lhs, rhs)
            }
            Choice::Pow => Node::binary(BinaryOp::Pow, self.tree(n - 2, rng), Node::constant()),
        }
    }
}

const MAX_RESAMPLES: usize = 10_000;

/// Draws a tree whose node count is uniform over `cfg.node_range` and which
/// contains at least one variable leaf. Deterministic in `(cfg, seed)`.
pub fn sample_tree(cfg: &GenConfig, seed: u64) -> Result<OperationTree> {
    cfg.validate()?;
    let sampler = Sampler::new(cfg);
    let [lo, hi] = cfg.node_range;
    if let Some(n) = (lo..=hi).find(|&n| !sampler.feasible[n]) {
        return Err(Error::Config(format!(
            "no tree with {n} nodes can be built from the configured operators"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(lo..=hi);
    for _ in 0..MAX_RESAMPLES {
        let root = sampler.tree(n, &mut rng);
        let tree = OperationTree::new(root)?;
        if !tree.var_dims_used().is_empty() {
            return Ok(tree);
        }
    }
    Err(Error::Config(
        "generator failed to produce a tree with a variable leaf".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lo: usize, hi: usize) -> GenConfig {
        GenConfig {
            node_range: [lo, hi],
            ..GenConfig::default()
        }
    }

    #[test]
    fn single_node_without_constants_is_a_variable() {
        let c = GenConfig {
            p_const_leaf: 0.0,
            ..cfg(1, 1)
        };
        for seed in 0..20 {
            let t = sample_tree(&c, seed).unwrap();
            assert_eq!(t.n_nodes(), 1);
            assert!(matches!(t.root().symbol, Symbol::Var(_)));
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let c = cfg(5, 15);
        for seed in [0u64, 1, 42, u64::MAX] {
            assert_eq!(sample_tree(&c, seed).unwrap(), sample_tree(&c, seed).unwrap());
        }
    }

    #[test]
    fn node_counts_stay_in_range() {
        let c = cfg(5, 15);
        let mut seen = BTreeSet::new();
        for seed in 0..10_000 {
            let t = sample_tree(&c, seed).unwrap();
            assert!((5..=15).contains(&t.n_nodes()), "{}", t.n_nodes());
            assert!(!t.var_dims_used().is_empty());
            seen.insert(t.n_nodes());
        }
        assert_eq!(seen.len(), 11);
    }

    #[test]
    fn pow_exponent_is_constant() {
        let c = cfg(3, 12);
        for seed in 0..2_000 {
            let t = sample_tree(&c, seed).unwrap();
            for node in t.pre_order() {
                if node.symbol == Symbol::Binary(BinaryOp::Pow) {
                    assert_eq!(node.children[1].symbol, Symbol::Const);
                }
            }
        }
    }

    #[test]
    fn const_slots_are_preorder() {
        let root = Node::binary(
            BinaryOp::Add,
            Node::binary(BinaryOp::Mul, Node::constant(), Node::var(0)),
            Node::constant(),
        );
        let t = OperationTree::new(root).unwrap();
        let slots: Vec<usize> = t.pre_order().iter().filter_map(|n| n.const_slot).collect();
        assert_eq!(slots, vec![0, 1]);
        assert_eq!(t.n_consts(), 2);
    }

    #[test]
    fn infeasible_range_is_config_error() {
        // only binary operators: even node counts are unreachable
        let mut c = cfg(4, 4);
        c.op_weights = [("add".to_string(), 1.0)].into_iter().collect();
        assert!(matches!(sample_tree(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn arity_is_checked() {
        let bad = Node {
            symbol: Symbol::Binary(BinaryOp::Add),
            children: vec![Node::var(0)],
            const_slot: None,
        };
        assert!(OperationTree::new(bad).is_err());
    }
}
