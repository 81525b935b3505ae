//! Canonical infix formula strings.
//!
//! Emission fully parenthesizes binary operators (`(a + b)`), writes unary
//! operators as calls (`sin(a)`), variables as `x1..xd` and constants in the
//! shortest decimal form that parses back to the same `f64`.
//!
//! Parsing accepts the canonical form and ordinary infix input. Precedence,
//! loosest first: `+ -` (left), `* /` (left), prefix `-`, `^` (right).
//! A `-` written directly in front of a numeric literal belongs to the
//! literal, so `(-2 ^ x1)` reads as `pow(-2, x1)`.

use crate::error::{Error, ParseError, Result};
use crate::ots::ConstVec;
use crate::tree::{Node, OperationTree};
use crate::vocab::{BinaryOp, Symbol, UnaryOp};

/// Shortest round-trip decimal, switching to exponent form for very small or
/// very large magnitudes.
pub fn format_constant(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn emit(node: &Node, consts: &[f64], out: &mut String) {
    match node.symbol {
        Symbol::Binary(op) => {
            out.push('(');
            emit(&node.children[0], consts, out);
            out.push(' ');
            out.push(op.symbol());
            out.push(' ');
            emit(&node.children[1], consts, out);
            out.push(')');
        }
        Symbol::Unary(op) => {
            out.push_str(op.name());
            out.push('(');
            emit(&node.children[0], consts, out);
            out.push(')');
        }
        Symbol::Var(i) => {
            out.push('x');
            out.push_str(&(i as usize + 1).to_string());
        }
        Symbol::Const => {
            let slot = node.const_slot.expect("constant leaves carry a slot");
            out.push_str(&format_constant(consts[slot]));
        }
        _ => unreachable!("special tokens are never tree nodes"),
    }
}

pub fn tree_to_formula(tree: &OperationTree, consts: &ConstVec) -> Result<String> {
    let values = consts.visible()?;
    if values.len() < tree.n_consts() {
        return Err(Error::MaskedConst(values.len()));
    }
    let mut out = String::new();
    emit(tree.root(), values, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    End,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Returns the token and its starting byte offset without consuming it.
    fn peek(&mut self) -> std::result::Result<(Tok, usize, usize), ParseError> {
        self.skip_ws();
        let start = self.pos;
        let Some(&b) = self.src.get(start) else {
            return Ok((Tok::End, start, start));
        };
        let tok_end;
        let tok = match b {
            b'(' => {
                tok_end = start + 1;
                Tok::LParen
            }
            b')' => {
                tok_end = start + 1;
                Tok::RParen
            }
            b'+' | b'-' | b'*' | b'/' | b'^' => {
                tok_end = start + 1;
                Tok::Op(b as char)
            }
            b'0'..=b'9' | b'.' => {
                let end = self.number_end(start);
                let text = std::str::from_utf8(&self.src[start..end]).expect("ascii");
                let v: f64 = text.parse().map_err(|_| ParseError {
                    offset: start,
                    expected: vec!["number".into()],
                })?;
                tok_end = end;
                Tok::Num(v)
            }
            b if b.is_ascii_alphabetic() => {
                let mut end = start;
                while end < self.src.len() && self.src[end].is_ascii_alphanumeric() {
                    end += 1;
                }
                tok_end = end;
                Tok::Ident(String::from_utf8_lossy(&self.src[start..end]).into_owned())
            }
            _ => {
                return Err(ParseError {
                    offset: start,
                    expected: expected_operand(),
                })
            }
        };
        Ok((tok, start, tok_end))
    }

    fn number_end(&self, start: usize) -> usize {
        let s = self.src;
        let mut i = start;
        while i < s.len() && (s[i].is_ascii_digit() || s[i] == b'.') {
            i += 1;
        }
        if i < s.len() && (s[i] == b'e' || s[i] == b'E') {
            let mut j = i + 1;
            if j < s.len() && (s[j] == b'+' || s[j] == b'-') {
                j += 1;
            }
            if j < s.len() && s[j].is_ascii_digit() {
                while j < s.len() && s[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        i
    }

    fn next(&mut self) -> std::result::Result<(Tok, usize), ParseError> {
        let (tok, start, end) = self.peek()?;
        self.pos = end;
        Ok((tok, start))
    }
}

fn expected_operand() -> Vec<String> {
    ["number", "variable", "function", "(", "-"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

enum Ast {
    Num(f64),
    Var(u8),
    Unary(UnaryOp, Box<Ast>),
    Binary(BinaryOp, Box<Ast>, Box<Ast>),
}

fn binary_op(c: char) -> Option<(BinaryOp, u8, bool)> {
    // (operator, precedence, right-associative)
    match c {
        '+' => Some((BinaryOp::Add, 1, false)),
        '-' => Some((BinaryOp::Sub, 1, false)),
        '*' => Some((BinaryOp::Mul, 2, false)),
        '/' => Some((BinaryOp::Div, 2, false)),
        '^' => Some((BinaryOp::Pow, 4, true)),
        _ => None,
    }
}

const PREFIX_MINUS_PREC: u8 = 3;

struct Parser<'a> {
    lex: Lexer<'a>,
}

impl Parser<'_> {
    fn expression(&mut self, min_prec: u8) -> std::result::Result<Ast, ParseError> {
        let mut lhs = self.prefix()?;
        loop {
            let (tok, _, _) = self.lex.peek()?;
            let Tok::Op(c) = tok else { break };
            let (op, prec, right) = binary_op(c).expect("lexer only yields known operators");
            if prec < min_prec {
                break;
            }
            self.lex.next()?;
            let next_min = if right { prec } else { prec + 1 };
            let rhs = self.expression(next_min)?;
            lhs = Ast::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn prefix(&mut self) -> std::result::Result<Ast, ParseError> {
        let (tok, _, _) = self.lex.peek()?;
        if tok == Tok::Op('-') {
            self.lex.next()?;
            let (after, _, _) = self.lex.peek()?;
            // a sign glued to a literal is part of the literal
            if let Tok::Num(v) = after {
                self.lex.next()?;
                return self.postfix_power(Ast::Num(-v));
            }
            let operand = self.expression(PREFIX_MINUS_PREC)?;
            return Ok(Ast::Unary(UnaryOp::Neg, Box::new(operand)));
        }
        let atom = self.atom()?;
        Ok(atom)
    }

    /// Lets a folded negative literal still take a `^` suffix.
    fn postfix_power(&mut self, base: Ast) -> std::result::Result<Ast, ParseError> {
        let (tok, _, _) = self.lex.peek()?;
        if tok == Tok::Op('^') {
            self.lex.next()?;
            let rhs = self.expression(4)?;
            return Ok(Ast::Binary(BinaryOp::Pow, Box::new(base), Box::new(rhs)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> std::result::Result<Ast, ParseError> {
        let (tok, start) = self.lex.next()?;
        match tok {
            Tok::Num(v) => Ok(Ast::Num(v)),
            Tok::LParen => {
                let inner = self.expression(0)?;
                self.expect_rparen()?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                if let Some(op) = UnaryOp::ALL.iter().copied().find(|op| op.name() == name) {
                    let (open, at) = self.lex.next()?;
                    if open != Tok::LParen {
                        return Err(ParseError {
                            offset: at,
                            expected: vec!["(".into()],
                        });
                    }
                    let arg = self.expression(0)?;
                    self.expect_rparen()?;
                    return Ok(Ast::Unary(op, Box::new(arg)));
                }
                match Symbol::from_name(&name) {
                    Some(Symbol::Var(i)) => Ok(Ast::Var(i)),
                    _ => Err(ParseError {
                        offset: start,
                        expected: vec!["variable".into(), "function".into()],
                    }),
                }
            }
            _ => Err(ParseError {
                offset: start,
                expected: expected_operand(),
            }),
        }
    }

    fn expect_rparen(&mut self) -> std::result::Result<(), ParseError> {
        let (tok, at) = self.lex.next()?;
        if tok != Tok::RParen {
            return Err(ParseError {
                offset: at,
                expected: vec![")".into(), "operator".into()],
            });
        }
        Ok(())
    }
}

fn lower(ast: Ast, consts: &mut Vec<f64>) -> Node {
    match ast {
        Ast::Num(v) => {
            consts.push(v);
            Node::constant()
        }
        Ast::Var(i) => Node::var(i),
        Ast::Unary(op, a) => Node::unary(op, lower(*a, consts)),
        Ast::Binary(op, a, b) => {
            let lhs = lower(*a, consts);
            let rhs = lower(*b, consts);
            Node::binary(op, lhs, rhs)
        }
    }
}

/// Parses an infix formula into a tree and its constants (pre-order slots).
pub fn parse_formula(s: &str) -> std::result::Result<(OperationTree, ConstVec), ParseError> {
    let mut p = Parser {
        lex: Lexer {
            src: s.as_bytes(),
            pos: 0,
        },
    };
    let ast = p.expression(0)?;
    let (tok, at) = p.lex.next()?;
    if tok != Tok::End {
        return Err(ParseError {
            offset: at,
            expected: vec!["operator".into(), "end of input".into()],
        });
    }
    let mut consts = Vec::new();
    let root = lower(ast, &mut consts);
    let tree = OperationTree::new(root).expect("parser builds well-formed nodes");
    Ok((tree, ConstVec::from_values(&consts)))
}
