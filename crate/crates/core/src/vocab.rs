//! Token inventory shared by every modality.
//!
//! Ids are dense and 1-based. The default inventory is
//! `PAD BOS EOS MASK add sub mul div pow neg abs sin cos tanh exp log sqrt C x1..xd`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    /// Zero-based column in a `[.. × N_v]` logit matrix.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> Self {
        TokenId(index as u32 + 1)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 5] = [
        BinaryOp::Add,
        BinaryOp::Sub,
        BinaryOp::Mul,
        BinaryOp::Div,
        BinaryOp::Pow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Pow => "pow",
        }
    }

    /// Infix symbol used by the formula grammar.
    pub fn symbol(self) -> char {
        match self {
            BinaryOp::Add => '+',
            BinaryOp::Sub => '-',
            BinaryOp::Mul => '*',
            BinaryOp::Div => '/',
            BinaryOp::Pow => '^',
        }
    }

    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Pow => a.powf(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Abs,
    Sin,
    Cos,
    Tanh,
    Exp,
    Log,
    Sqrt,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 8] = [
        UnaryOp::Neg,
        UnaryOp::Abs,
        UnaryOp::Sin,
        UnaryOp::Cos,
        UnaryOp::Tanh,
        UnaryOp::Exp,
        UnaryOp::Log,
        UnaryOp::Sqrt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Abs => "abs",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
        }
    }

    pub fn apply(self, a: f64) -> f64 {
        match self {
            UnaryOp::Neg => -a,
            UnaryOp::Abs => a.abs(),
            UnaryOp::Sin => a.sin(),
            UnaryOp::Cos => a.cos(),
            UnaryOp::Tanh => a.tanh(),
            UnaryOp::Exp => a.exp(),
            UnaryOp::Log => a.ln(),
            UnaryOp::Sqrt => a.sqrt(),
        }
    }

    /// d/da of `apply(a)`.
    pub fn derivative(self, a: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Abs => {
                if a > 0.0 {
                    1.0
                } else if a < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Sin => a.cos(),
            UnaryOp::Cos => -a.sin(),
            UnaryOp::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            UnaryOp::Exp => a.exp(),
            UnaryOp::Log => 1.0 / a,
            UnaryOp::Sqrt => 0.5 / a.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Pad,
    Bos,
    Eos,
    Mask,
    Binary(BinaryOp),
    Unary(UnaryOp),
    /// Zero-based variable index: `Var(0)` is `x1`.
    Var(u8),
    Const,
}

impl Symbol {
    pub fn arity(self) -> usize {
        match self {
            Symbol::Binary(_) => 2,
            Symbol::Unary(_) => 1,
            _ => 0,
        }
    }

    pub fn is_special(self) -> bool {
        matches!(self, Symbol::Pad | Symbol::Bos | Symbol::Eos | Symbol::Mask)
    }

    /// True for symbols that may appear as tree nodes.
    pub fn is_node(self) -> bool {
        !self.is_special()
    }

    pub fn name(self) -> String {
        match self {
            Symbol::Pad => "PAD".into(),
            Symbol::Bos => "BOS".into(),
            Symbol::Eos => "EOS".into(),
            Symbol::Mask => "MASK".into(),
            Symbol::Binary(op) => op.name().into(),
            Symbol::Unary(op) => op.name().into(),
            Symbol::Var(i) => format!("x{}", i + 1),
            Symbol::Const => "C".into(),
        }
    }

    pub fn from_name(name: &str) -> Option<Symbol> {
        match name {
            "PAD" => return Some(Symbol::Pad),
            "BOS" => return Some(Symbol::Bos),
            "EOS" => return Some(Symbol::Eos),
            "MASK" => return Some(Symbol::Mask),
            "C" => return Some(Symbol::Const),
            _ => {}
        }
        if let Some(op) = BinaryOp::ALL.iter().find(|op| op.name() == name) {
            return Some(Symbol::Binary(*op));
        }
        if let Some(op) = UnaryOp::ALL.iter().find(|op| op.name() == name) {
            return Some(Symbol::Unary(*op));
        }
        let idx: u8 = name.strip_prefix('x')?.parse().ok()?;
        (idx >= 1).then(|| Symbol::Var(idx - 1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorVocab {
    symbols: Vec<Symbol>,
    var_count: usize,
}

impl OperatorVocab {
    /// The default operator inventory over `var_count` input variables.
    pub fn standard(var_count: usize) -> Self {
        Self::with_ops(var_count, &BinaryOp::ALL, &UnaryOp::ALL)
            .expect("standard vocabulary is valid")
    }

    pub fn with_ops(var_count: usize, binary: &[BinaryOp], unary: &[UnaryOp]) -> Result<Self> {
        if var_count == 0 || var_count > 9 {
            return Err(Error::Config(format!(
                "variable count must be in 1..=9, got {var_count}"
            )));
        }
        let mut symbols = vec![Symbol::Pad, Symbol::Bos, Symbol::Eos, Symbol::Mask];
        symbols.extend(binary.iter().map(|&op| Symbol::Binary(op)));
        symbols.extend(unary.iter().map(|&op| Symbol::Unary(op)));
        symbols.push(Symbol::Const);
        symbols.extend((0..var_count as u8).map(Symbol::Var));
        Self::from_symbols(symbols)
    }

    pub fn from_symbols(symbols: Vec<Symbol>) -> Result<Self> {
        for special in [Symbol::Pad, Symbol::Bos, Symbol::Eos, Symbol::Mask, Symbol::Const] {
            let n = symbols.iter().filter(|&&s| s == special).count();
            if n != 1 {
                return Err(Error::Config(format!(
                    "vocabulary must contain exactly one {} token, found {n}",
                    special.name()
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if !symbols.iter().all(|s| seen.insert(*s)) {
            return Err(Error::Config("duplicate vocabulary token".into()));
        }
        let mut vars: Vec<u8> = symbols
            .iter()
            .filter_map(|s| match s {
                Symbol::Var(i) => Some(*i),
                _ => None,
            })
            .collect();
        vars.sort_unstable();
        if vars.is_empty() || vars.iter().enumerate().any(|(i, &v)| v as usize != i) {
            return Err(Error::Config(
                "variables must be x1..xd without gaps".into(),
            ));
        }
        Ok(Self {
            var_count: vars.len(),
            symbols,
        })
    }

    /// N_v.
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn var_count(&self) -> usize {
        self.var_count
    }

    pub fn symbol(&self, id: TokenId) -> Option<Symbol> {
        if id.0 == 0 {
            return None;
        }
        self.symbols.get(id.index()).copied()
    }

    pub fn id(&self, symbol: Symbol) -> Option<TokenId> {
        self.symbols
            .iter()
            .position(|&s| s == symbol)
            .map(TokenId::from_index)
    }

    fn special(&self, symbol: Symbol) -> TokenId {
        self.id(symbol).expect("specials are validated at construction")
    }

    pub fn pad(&self) -> TokenId {
        self.special(Symbol::Pad)
    }

    pub fn bos(&self) -> TokenId {
        self.special(Symbol::Bos)
    }

    pub fn eos(&self) -> TokenId {
        self.special(Symbol::Eos)
    }

    pub fn mask(&self) -> TokenId {
        self.special(Symbol::Mask)
    }

    pub fn constant(&self) -> TokenId {
        self.special(Symbol::Const)
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn binary_ops(&self) -> Vec<BinaryOp> {
        self.symbols
            .iter()
            .filter_map(|s| match s {
                Symbol::Binary(op) => Some(*op),
                _ => None,
            })
            .collect()
    }

    pub fn unary_ops(&self) -> Vec<UnaryOp> {
        self.symbols
            .iter()
            .filter_map(|s| match s {
                Symbol::Unary(op) => Some(*op),
                _ => None,
            })
            .collect()
    }

    pub fn name_to_id(&self) -> BTreeMap<String, u32> {
        self.symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name(), i as u32 + 1))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.name_to_id()).expect("map of strings to ints")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> = serde_json::from_str(text)?;
        let n = map.len();
        let mut slots: Vec<Option<Symbol>> = vec![None; n];
        for (name, id) in &map {
            let symbol = Symbol::from_name(name)
                .ok_or_else(|| Error::Config(format!("unknown token name {name:?}")))?;
            let idx = (*id as usize)
                .checked_sub(1)
                .filter(|&i| i < n)
                .ok_or_else(|| Error::Config(format!("token id {id} is not in 1..={n}")))?;
            if slots[idx].replace(symbol).is_some() {
                return Err(Error::Config(format!("token id {id} assigned twice")));
            }
        }
        let symbols = slots.into_iter().map(|s| s.expect("ids are dense")).collect();
        Self::from_symbols(symbols)
    }
}
