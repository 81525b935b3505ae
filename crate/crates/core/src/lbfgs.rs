//! Limited-memory BFGS with a strong-Wolfe line search, and constant
//! fitting of a skeleton against a function image.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{eval_with_values, grad_with_values};
use crate::ots::{ots_to_tree, ConstVec, Ots};
use crate::render::{FuncImage, MeshGrid};
use crate::tree::OperationTree;
use crate::vocab::OperatorVocab;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub history: usize,
    pub max_iters: usize,
    /// Stop when ‖∇f‖∞ falls below this.
    pub gtol: f64,
    /// Stop when the relative decrease of f falls below this.
    pub ftol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_evals: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            max_iters: 200,
            gtol: 1e-12,
            ftol: 1e-15,
            c1: 1e-4,
            c2: 0.9,
            max_line_evals: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Objective with gradient. Non-finite values are treated as +∞.
fn eval<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(f: &mut F, x: &[f64]) -> (f64, Vec<f64>) {
    let (v, g) = f(x);
    if v.is_finite() && g.iter().all(|d| d.is_finite()) {
        (v, g)
    } else {
        (f64::INFINITY, g)
    }
}

struct LinePoint {
    alpha: f64,
    f: f64,
    dphi: f64,
    g: Vec<f64>,
}

/// Strong-Wolfe search along `d` from `x`. Returns `None` when no
/// acceptable step is found within the evaluation budget.
fn line_search<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    gx: &[f64],
    d: &[f64],
    alpha0: f64,
    cfg: &LbfgsConfig,
) -> Option<LinePoint> {
    let dphi0 = dot(gx, d);
    if dphi0 >= 0.0 {
        return None;
    }
    let mut evals = 0;
    let probe = |f: &mut F, alpha: f64| -> LinePoint {
        let xa: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        let (fa, ga) = eval(f, &xa);
        let dphi = if fa.is_finite() { dot(&ga, d) } else { f64::NAN };
        LinePoint {
            alpha,
            f: fa,
            dphi,
            g: ga,
        }
    };
    let mut prev = LinePoint {
        alpha: 0.0,
        f: fx,
        dphi: dphi0,
        g: gx.to_vec(),
    };
    let mut alpha = alpha0;
    let (mut lo, mut hi);
    loop {
        if evals >= cfg.max_line_evals {
            return None;
        }
        evals += 1;
        let cur = probe(f, alpha);
        if !cur.f.is_finite() || cur.f > fx + cfg.c1 * alpha * dphi0 || (evals > 1 && cur.f >= prev.f) {
            lo = prev;
            hi = cur;
            break;
        }
        if cur.dphi.abs() <= -cfg.c2 * dphi0 {
            return Some(cur);
        }
        if cur.dphi >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        prev = cur;
        alpha *= 2.0;
    }
    // Zoom between lo (satisfies sufficient decrease) and hi.
    loop {
        if evals >= cfg.max_line_evals {
            return (lo.alpha > 0.0 && lo.f < fx).then_some(lo);
        }
        evals += 1;
        let a = interpolate(&lo, &hi);
        let cur = probe(f, a);
        if !cur.f.is_finite() || cur.f > fx + cfg.c1 * a * dphi0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.dphi.abs() <= -cfg.c2 * dphi0 {
                return Some(cur);
            }
            if cur.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
            return (lo.alpha > 0.0 && lo.f < fx).then_some(lo);
        }
    }
}

/// Cubic interpolation when both ends are finite, bisection otherwise,
/// kept away from the bracket ends.
fn interpolate(lo: &LinePoint, hi: &LinePoint) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a + b);
    if !(hi.f.is_finite() && hi.dphi.is_finite()) {
        return mid;
    }
    let d1 = lo.dphi + hi.dphi - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.dphi * hi.dphi;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.dphi + d2 - d1) / (hi.dphi - lo.dphi + 2.0 * d2);
    let (left, right) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (right - left);
    if t.is_finite() && t > left + margin && t < right - margin {
        t
    } else {
        mid
    }
}

pub fn minimize<F>(mut f: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0.to_vec();
    let (mut fx, mut gx) = eval(&mut f, &x);
    if !fx.is_finite() {
        return Err(Error::NoDescent);
    }
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    for iter in 0..cfg.max_iters {
        if inf_norm(&gx) <= cfg.gtol {
            return Ok(LbfgsResult {
                x,
                f: fx,
                iterations: iter,
                converged: true,
            });
        }
        // Two-loop recursion.
        let mut q = gx.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = hist.back().map_or(1.0, |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let d: Vec<f64> = q.iter().map(|v| -v).collect();
        let alpha0 = if hist.is_empty() { (1.0 / inf_norm(&gx)).min(1.0) } else { 1.0 };
        let found = line_search(&mut f, &x, fx, &gx, &d, alpha0, cfg);
        // A stale curvature model can produce a useless direction; retry
        // once along the scaled negative gradient before giving up.
        let found = match found {
            None if !hist.is_empty() => {
                hist.clear();
                let d: Vec<f64> = gx.iter().map(|v| -v).collect();
                let a0 = (1.0 / inf_norm(&gx)).min(1.0);
                line_search(&mut f, &x, fx, &gx, &d, a0, cfg).map(|p| (p, d))
            }
            other => other.map(|p| (p, d)),
        };
        let Some((step, d)) = found else {
            if iter == 0 {
                return Err(Error::NoDescent);
            }
            return Ok(LbfgsResult {
                x,
                f: fx,
                iterations: iter,
                converged: false,
            });
        };
        let s: Vec<f64> = d.iter().map(|di| step.alpha * di).collect();
        let y: Vec<f64> = step.g.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let x_new: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a + b).collect();
        let rel = (fx - step.f) / fx.abs().max(1e-300);
        x = x_new;
        fx = step.f;
        gx = step.g;
        if sy > 1e-300 {
            if hist.len() == cfg.history {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        if rel.abs() <= cfg.ftol || fx == 0.0 {
            return Ok(LbfgsResult {
                x,
                f: fx,
                iterations: iter + 1,
                converged: true,
            });
        }
    }
    Ok(LbfgsResult {
        x,
        f: fx,
        iterations: cfg.max_iters,
        converged: false,
    })
}

/// Finite image positions stacked across channels, with their raw targets.
pub struct FitTarget {
    points: Array2<f64>,
    targets: Array1<f64>,
}

impl FitTarget {
    pub fn new(img: &FuncImage, grid: &MeshGrid) -> Result<Self> {
        let raw = img.raw_values();
        if raw.nrows() != grid.n_scales() || raw.ncols() != grid.points_per_channel() {
            return Err(Error::Shape("image does not match grid".into()));
        }
        let mask = img.finite_mask();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for ch in 0..grid.n_scales() {
            let pts = grid.channel_points(ch);
            for p in 0..pts.nrows() {
                if mask[[ch, p]] {
                    rows.push(pts.row(p).to_owned());
                    targets.push(raw[[ch, p]]);
                }
            }
        }
        let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
        let points = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self {
            points,
            targets: Array1::from(targets),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Mean squared error and its gradient. Any non-finite prediction at a
    /// finite target yields +∞. Points with a finite value but a non-finite
    /// derivative (saturated branches) count in the loss and contribute no
    /// gradient.
    pub fn mse(&self, tree: &OperationTree, c: &[f64]) -> (f64, Vec<f64>) {
        let m = self.len() as f64;
        let Ok(j) = grad_with_values(tree, c, self.points.view()) else {
            return (f64::INFINITY, vec![0.0; c.len()]);
        };
        if j.values.iter().any(|v| !v.is_finite()) {
            return (f64::INFINITY, vec![0.0; c.len()]);
        }
        let r = Array1::from(j.values) - &self.targets;
        let f = r.dot(&r) / m;
        let g = j.jacobian.t().dot(&r) * (2.0 / m);
        (f, g.to_vec())
    }

    pub fn mse_value(&self, tree: &OperationTree, c: &[f64]) -> f64 {
        match eval_with_values(tree, c, self.points.view()) {
            Ok(v) => {
                let mut s = 0.0;
                for (p, t) in v.iter().zip(&self.targets) {
                    if !p.is_finite() {
                        return f64::INFINITY;
                    }
                    s += (p - t) * (p - t);
                }
                s / self.len() as f64
            }
            Err(_) => f64::INFINITY,
        }
    }

    /// Points in stacking order, for external checks.
    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstFit {
    pub consts: ConstVec,
    pub mse: f64,
    pub iterations: usize,
}

pub fn fit_tree_constants(
    tree: &OperationTree,
    target: &FitTarget,
    init: &[f64],
    cfg: &LbfgsConfig,
) -> Result<ConstFit> {
    let n = tree.n_consts();
    if n == 0 {
        return Ok(ConstFit {
            consts: ConstVec::from_values(&[]),
            mse: target.mse_value(tree, &[]),
            iterations: 0,
        });
    }
    if init.len() < n {
        return Err(Error::MaskedConst(init.len()));
    }
    let r = minimize(|c| target.mse(tree, c), &init[..n], cfg)?;
    Ok(ConstFit {
        consts: ConstVec::from_values(&r.x),
        mse: r.f,
        iterations: r.iterations,
    })
}

/// Refits the constants of `skeleton` against `img`, starting from `init`.
pub fn fit_constants_lbfgs(
    skeleton: &Ots,
    vocab: &OperatorVocab,
    img: &FuncImage,
    grid: &MeshGrid,
    init: &ConstVec,
    iters: usize,
) -> Result<ConstFit> {
    let tree = ots_to_tree(skeleton, init, vocab)?;
    let target = FitTarget::new(img, grid)?;
    let cfg = LbfgsConfig {
        max_iters: iters,
        ..LbfgsConfig::default()
    };
    fit_tree_constants(&tree, &target, init.visible()?, &cfg)
}

/// Uniform draws in `[-2, 2]` tried per restart before giving up on a
/// finite starting loss.
const START_DRAWS: usize = 50;

/// Best of `restarts` fits from uniform draws in `[-2, 2]`. Each restart
/// redraws its start until the loss there is finite; starts that cannot
/// descend are skipped.
pub fn fit_constants_restarts(
    tree: &OperationTree,
    img: &FuncImage,
    grid: &MeshGrid,
    restarts: usize,
    seed: u64,
    cfg: &LbfgsConfig,
) -> Result<ConstFit> {
    let target = FitTarget::new(img, grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<ConstFit> = None;
    for _ in 0..restarts.max(1) {
        let mut init = Vec::new();
        for _ in 0..START_DRAWS {
            init = (0..tree.n_consts()).map(|_| rng.random_range(-2.0..=2.0)).collect();
            if target.mse_value(tree, &init).is_finite() {
                break;
            }
        }
        let Ok(fit) = fit_tree_constants(tree, &target, &init, cfg) else { continue };
        if best.as_ref().is_none_or(|b| fit.mse < b.mse) {
            best = Some(fit);
        }
    }
    best.ok_or(Error::NoDescent)
}
