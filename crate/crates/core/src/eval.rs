//! Vectorized tree evaluation and the constant Jacobian.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::ots::ConstVec;
use crate::tree::{Node, OperationTree};
use crate::vocab::{BinaryOp, Symbol};

struct Flat {
    symbol: Symbol,
    children: [usize; 2],
    slot: Option<usize>,
}

/// Pre-order arena: every child index is larger than its parent's.
fn flatten(tree: &OperationTree) -> Vec<Flat> {
    fn go(node: &Node, out: &mut Vec<Flat>) -> usize {
        let me = out.len();
        out.push(Flat {
            symbol: node.symbol,
            children: [usize::MAX; 2],
            slot: node.const_slot,
        });
        for (k, child) in node.children.iter().enumerate() {
            let c = go(child, out);
            out[me].children[k] = c;
        }
        me
    }
    let mut out = Vec::with_capacity(tree.n_nodes());
    go(tree.root(), &mut out);
    out
}

fn check_points(tree: &OperationTree, points: &ArrayView2<f64>) -> Result<()> {
    if let Some(max) = tree.max_var() {
        if max >= points.ncols() {
            return Err(Error::Shape(format!(
                "tree uses x{} but points have {} columns",
                max + 1,
                points.ncols()
            )));
        }
    }
    Ok(())
}

fn forward(flat: &[Flat], consts: &[f64], points: &ArrayView2<f64>) -> Vec<Vec<f64>> {
    let m = points.nrows();
    let mut vals: Vec<Vec<f64>> = vec![Vec::new(); flat.len()];
    for i in (0..flat.len()).rev() {
        let f = &flat[i];
        let v = match f.symbol {
            Symbol::Var(j) => points.column(j as usize).to_vec(),
            Symbol::Const => vec![consts[f.slot.expect("slot")]; m],
            Symbol::Unary(op) => vals[f.children[0]].iter().map(|&a| op.apply(a)).collect(),
            Symbol::Binary(op) => {
                let (a, b) = (&vals[f.children[0]], &vals[f.children[1]]);
                a.iter().zip(b).map(|(&x, &y)| op.apply(x, y)).collect()
            }
            _ => unreachable!(),
        };
        vals[i] = v;
    }
    vals
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::NAN
    }
}

/// Evaluates with explicit constant values. Non-finite outputs become NaN.
pub fn eval_with_values(
    tree: &OperationTree,
    consts: &[f64],
    points: ArrayView2<f64>,
) -> Result<Vec<f64>> {
    check_points(tree, &points)?;
    if consts.len() < tree.n_consts() {
        return Err(Error::MaskedConst(consts.len()));
    }
    let flat = flatten(tree);
    let mut vals = forward(&flat, consts, &points);
    Ok(vals.swap_remove(0).into_iter().map(sanitize).collect())
}

/// Evaluates the tree at each row of `points` (`m × d`).
pub fn eval_tree(tree: &OperationTree, consts: &ConstVec, points: ArrayView2<f64>) -> Result<Vec<f64>> {
    eval_with_values(tree, consts.visible()?, points)
}

/// Per-row values and ∂f/∂c. Rows whose value or gradient is non-finite are
/// marked invalid and zeroed in the Jacobian.
#[derive(Debug, Clone)]
pub struct ConstJacobian {
    pub values: Vec<f64>,
    pub jacobian: Array2<f64>,
    pub valid: Vec<bool>,
}

pub fn grad_with_values(
    tree: &OperationTree,
    consts: &[f64],
    points: ArrayView2<f64>,
) -> Result<ConstJacobian> {
    check_points(tree, &points)?;
    if consts.len() < tree.n_consts() {
        return Err(Error::MaskedConst(consts.len()));
    }
    let m = points.nrows();
    let n_c = tree.n_consts();
    let flat = flatten(tree);
    let vals = forward(&flat, consts, &points);
    let mut adj: Vec<Vec<f64>> = vec![Vec::new(); flat.len()];
    adj[0] = vec![1.0; m];
    let mut jac = Array2::<f64>::zeros((m, n_c));
    for i in 0..flat.len() {
        let f = &flat[i];
        let up = std::mem::take(&mut adj[i]);
        if up.is_empty() {
            continue;
        }
        let mut push = |child: usize, local: &dyn Fn(usize) -> f64| {
            let a = &mut adj[child];
            if a.is_empty() {
                *a = (0..m).map(|r| up[r] * local(r)).collect();
            } else {
                for r in 0..m {
                    a[r] += up[r] * local(r);
                }
            }
        };
        match f.symbol {
            Symbol::Const => {
                let s = f.slot.expect("slot");
                for r in 0..m {
                    jac[[r, s]] += up[r];
                }
            }
            Symbol::Var(_) => {}
            Symbol::Unary(op) => {
                let x = &vals[f.children[0]];
                push(f.children[0], &|r| op.derivative(x[r]));
            }
            Symbol::Binary(op) => {
                let (l, rc) = (f.children[0], f.children[1]);
                let (a, b) = (&vals[l], &vals[rc]);
                match op {
                    BinaryOp::Add => {
                        push(l, &|_| 1.0);
                        push(rc, &|_| 1.0);
                    }
                    BinaryOp::Sub => {
                        push(l, &|_| 1.0);
                        push(rc, &|_| -1.0);
                    }
                    BinaryOp::Mul => {
                        push(l, &|r| b[r]);
                        push(rc, &|r| a[r]);
                    }
                    BinaryOp::Div => {
                        push(l, &|r| 1.0 / b[r]);
                        push(rc, &|r| -a[r] / (b[r] * b[r]));
                    }
                    BinaryOp::Pow => {
                        push(l, &|r| b[r] * a[r].powf(b[r] - 1.0));
                        push(rc, &|r| a[r].powf(b[r]) * a[r].ln());
                    }
                }
            }
            _ => unreachable!(),
        }
    }
    let values: Vec<f64> = vals[0].iter().copied().map(sanitize).collect();
    let mut valid = vec![true; m];
    for r in 0..m {
        let ok = values[r].is_finite() && jac.row(r).iter().all(|g| g.is_finite());
        if !ok {
            valid[r] = false;
            jac.row_mut(r).fill(0.0);
        }
    }
    Ok(ConstJacobian {
        values,
        jacobian: jac,
        valid,
    })
}

pub fn grad_consts(
    tree: &OperationTree,
    consts: &ConstVec,
    points: ArrayView2<f64>,
) -> Result<ConstJacobian> {
    grad_with_values(tree, consts.visible()?, points)
}
