//! Limited-memory BFGS with a diagonal preconditioner and a backtracking
//! line search that treats `+inf` as rejection.

use std::collections::VecDeque;

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsOptions {
    pub history: usize,
    pub max_iter: usize,
    /// Stop when `sqrt(sum g_i^2 * norm_w_i) <= grad_tol`.
    pub grad_tol: f64,
    pub c1: f64,
    pub max_backtracks: usize,
    /// Largest entry of the first trial step after a history reset.
    pub max_first_step: f64,
    /// Relative value change treated as rounding noise by the line search.
    pub f_eps: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { history: 10, max_iter: 500, grad_tol: 1e-8, c1: 1e-4, max_backtracks: 60, max_first_step: 1e-2, f_eps: 1e-12 }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub dual_norm: f64,
}

pub fn dual_norm(g: &[f64], precond: &[f64]) -> f64 {
    g.iter().zip(precond).map(|(g, p)| g * g * p).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `objective(x, want_grad) -> (f, grad)`; `grad` may be empty when
/// `f` is infinite. `precond` is the diagonal initial inverse Hessian and
/// also weighs the convergence norm.
pub fn minimize(x0: Vec<f64>, objective: impl FnMut(&[f64], bool) -> (f64, Vec<f64>), precond: &[f64], opts: &LbfgsOptions) -> LbfgsResult {
    minimize_scaled(x0, objective, precond, precond, opts)
}

/// [`minimize`] with separate weights `norm_w` for the convergence norm.
pub fn minimize_scaled(
    x0: Vec<f64>,
    mut objective: impl FnMut(&[f64], bool) -> (f64, Vec<f64>),
    precond: &[f64],
    norm_w: &[f64],
    opts: &LbfgsOptions,
) -> LbfgsResult {
    let n = x0.len();
    assert_eq!(precond.len(), n, "preconditioner length");
    assert_eq!(norm_w.len(), n, "norm weight length");
    let mut x = x0;
    let (mut f, mut g) = objective(&x, true);
    let mut evals = 1;
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut it = 0;
    if !f.is_finite() {
        return LbfgsResult { x, f, grad: g, iterations: 0, evaluations: evals, converged: false, dual_norm: f64::INFINITY };
    }
    loop {
        let dn = dual_norm(&g, norm_w);
        if dn <= opts.grad_tol {
            return LbfgsResult { x, f, grad: g, iterations: it, evaluations: evals, converged: true, dual_norm: dn };
        }
        if it >= opts.max_iter {
            return LbfgsResult { x, f, grad: g, iterations: it, evaluations: evals, converged: false, dual_norm: dn };
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = match hist.back() {
            Some((s, y, _)) => {
                let yhy: f64 = y.iter().zip(precond).map(|(y, p)| y * y * p).sum();
                dot(s, y) / yhy
            }
            None => 1.0,
        };
        for (qi, p) in q.iter_mut().zip(precond) {
            *qi *= gamma * p;
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        let mut alpha = 1.0;
        if hist.is_empty() || !(slope < 0.0) {
            hist.clear();
            dir = g.iter().zip(precond).map(|(g, p)| -g * p).collect();
            slope = dot(&g, &dir);
            let dmax = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            alpha = (opts.max_first_step / dmax).min(1.0);
        }
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let xt: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + alpha * b).collect();
            let (ft, gt) = objective(&xt, true);
            evals += 1;
            if ft.is_finite() && ft <= f + opts.c1 * alpha * slope {
                accepted = Some((xt, ft, gt));
                break;
            }
            // approximate Wolfe: value change at rounding level, slope conditions hold
            if ft.is_finite() && ft <= f + opts.f_eps * f.abs() {
                let st = dot(&gt, &dir);
                if st <= (2.0 * opts.c1 - 1.0) * slope && st >= 0.9 * slope {
                    accepted = Some((xt, ft, gt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xt, ft, gt)) = accepted else {
            if hist.is_empty() {
                return LbfgsResult { x, f, grad: g, iterations: it, evaluations: evals, converged: false, dual_norm: dn };
            }
            hist.clear();
            it += 1;
            continue;
        };
        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 && sy.is_finite() {
            if hist.len() == opts.history {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        x = xt;
        f = ft;
        g = gt;
        it += 1;
    }
}
