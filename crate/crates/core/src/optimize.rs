//! Dense BFGS ascent with a strong-Wolfe line search.
//!
//! The estimator maximizes the mixture log-likelihood over a few dozen
//! unconstrained coordinates; a dense inverse-Hessian approximation is
//! cheap at that size. Objective evaluations may fail (degenerate
//! covariance); failed points are treated as infinitely bad so the line
//! search backs away from them.

/// Objective contract: value and gradient of the function being
/// *maximized*, or `None` where the function is undefined.
pub trait Objective {
    fn eval(&self, x: &[f64]) -> Option<(f64, Vec<f64>)>;
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    fn eval(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        self(x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Relative change in the objective below which (together with the
    /// gradient test) the run counts as converged.
    pub rel_f_tol: f64,
    /// Max-norm gradient threshold.
    pub grad_tol: f64,
    /// Abort when any coordinate leaves [-bound, bound].
    pub coord_bound: Option<f64>,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iterations: 500,
            rel_f_tol: 1e-8,
            grad_tol: 1e-4,
            coord_bound: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIterations,
    CoordinateBound,
    LineSearchStalled,
    InfeasibleStart,
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reason: StopReason,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

/// Maximize `objective` from `x0`.
pub fn maximize<O: Objective>(objective: &O, x0: &[f64], opts: &BfgsOptions) -> BfgsResult {
    let p = x0.len();
    let eval = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        objective.eval(x).and_then(|(f, g)| {
            if f.is_finite() && g.iter().all(|v| v.is_finite()) {
                // Internally minimize -f.
                Some((-f, g.iter().map(|v| -v).collect()))
            } else {
                None
            }
        })
    };

    let mut x = x0.to_vec();
    let Some((mut f, mut g)) = eval(&x) else {
        return BfgsResult {
            x,
            f: f64::NEG_INFINITY,
            grad: vec![f64::NAN; p],
            iterations: 0,
            converged: false,
            reason: StopReason::InfeasibleStart,
        };
    };

    // Inverse Hessian approximation, row-major.
    let mut h: Vec<f64> = identity(p);
    let mut first_update_done = false;
    let mut iterations = 0;
    let mut reason = StopReason::MaxIterations;

    for iter in 0..opts.max_iterations {
        iterations = iter + 1;
        if max_norm(&g) < opts.grad_tol {
            reason = StopReason::Converged;
            break;
        }

        // Search direction d = -H g; fall back to steepest descent when
        // the approximation loses descent.
        let mut d = neg_mat_vec(&h, &g, p);
        let mut dg = dot(&d, &g);
        if !(dg < 0.0) || !dg.is_finite() {
            h = identity(p);
            first_update_done = false;
            d = g.iter().map(|v| -v).collect();
            dg = dot(&d, &g);
            if !(dg < 0.0) {
                reason = StopReason::Converged;
                break;
            }
        }

        match line_search(&eval, &x, f, &g, &d, dg) {
            Some((alpha, xn, fn_, gn)) => {
                let s: Vec<f64> = d.iter().map(|v| v * alpha).collect();
                let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &yv);
                let rel_df = (f - fn_).abs() / (1.0 + fn_.abs());
                x = xn;
                let f_prev = f;
                f = fn_;
                g = gn;

                if let Some(bound) = opts.coord_bound {
                    if x.iter().any(|v| v.abs() > bound) {
                        reason = StopReason::CoordinateBound;
                        break;
                    }
                }

                if sy > 1e-12 * norm(&s) * norm(&yv) {
                    if !first_update_done {
                        let yy = dot(&yv, &yv);
                        if yy > 0.0 {
                            let gamma = sy / yy;
                            for (i, v) in h.iter_mut().enumerate() {
                                *v = if i % (p + 1) == 0 { gamma } else { 0.0 };
                            }
                        }
                        first_update_done = true;
                    }
                    bfgs_update(&mut h, &s, &yv, sy, p);
                }

                if rel_df < opts.rel_f_tol && max_norm(&g) < opts.grad_tol {
                    reason = StopReason::Converged;
                    break;
                }
                // Tiny non-final steps with a large gradient usually mean a
                // reset is needed; keep iterating.
                let _ = f_prev;
            }
            None => {
                reason = if max_norm(&g) < opts.grad_tol {
                    StopReason::Converged
                } else {
                    StopReason::LineSearchStalled
                };
                break;
            }
        }
    }

    BfgsResult {
        converged: reason == StopReason::Converged,
        f: -f,
        grad: g.iter().map(|v| -v).collect(),
        x,
        iterations,
        reason,
    }
}

type EvalFn<'a> = &'a dyn Fn(&[f64]) -> Option<(f64, Vec<f64>)>;

/// Strong-Wolfe line search (bracket then zoom). Returns
/// (alpha, x_new, f_new, g_new) for the minimized objective.
#[allow(clippy::too_many_arguments)]
fn line_search(
    eval: &impl Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
    x0: &[f64],
    f0: f64,
    _g0: &[f64],
    d: &[f64],
    dg0: f64,
) -> Option<(f64, Vec<f64>, f64, Vec<f64>)> {
    let probe = |alpha: f64| -> Option<(Vec<f64>, f64, f64, Vec<f64>)> {
        let xn: Vec<f64> = x0.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        let (fv, gv) = eval(&xn)?;
        let slope = dot(&gv, d);
        Some((xn, fv, slope, gv))
    };

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut alpha = 1.0;
    for i in 0..20 {
        match probe(alpha) {
            None => {
                // Undefined region: bracket between the last good point
                // and the failure.
                return zoom(
                    eval as EvalFn, x0, f0, dg0, d, alpha_prev, f_prev, alpha,
                );
            }
            Some((xn, fv, slope, gv)) => {
                if fv > f0 + C1 * alpha * dg0 || (i > 0 && fv >= f_prev) {
                    return zoom(eval as EvalFn, x0, f0, dg0, d, alpha_prev, f_prev, alpha);
                }
                if slope.abs() <= -C2 * dg0 {
                    return Some((alpha, xn, fv, gv));
                }
                if slope >= 0.0 {
                    return zoom(eval as EvalFn, x0, f0, dg0, d, alpha, fv, alpha_prev);
                }
                alpha_prev = alpha;
                f_prev = fv;
                alpha *= 2.0;
            }
        }
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn zoom(
    eval: EvalFn,
    x0: &[f64],
    f0: f64,
    dg0: f64,
    d: &[f64],
    mut lo: f64,
    mut f_lo: f64,
    mut hi: f64,
) -> Option<(f64, Vec<f64>, f64, Vec<f64>)> {
    let probe = |alpha: f64| -> Option<(Vec<f64>, f64, f64, Vec<f64>)> {
        let xn: Vec<f64> = x0.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        let (fv, gv) = eval(&xn)?;
        let slope = dot(&gv, d);
        Some((xn, fv, slope, gv))
    };

    for _ in 0..50 {
        let alpha = 0.5 * (lo + hi);
        if alpha <= 0.0 || !alpha.is_finite() || (hi - lo).abs() < 1e-16 * (1.0 + lo.abs()) {
            break;
        }
        match probe(alpha) {
            None => {
                hi = alpha;
            }
            Some((xn, fv, slope, gv)) => {
                if fv > f0 + C1 * alpha * dg0 || fv >= f_lo {
                    hi = alpha;
                } else {
                    if slope.abs() <= -C2 * dg0 {
                        return Some((alpha, xn, fv, gv));
                    }
                    if slope * (hi - lo) >= 0.0 {
                        hi = lo;
                    }
                    lo = alpha;
                    f_lo = fv;
                }
            }
        }
    }
    // Wolfe curvature never satisfied; accept any strict decrease.
    if lo > 0.0 {
        if let Some((xn, fv, _slope, gv)) = probe(lo) {
            if fv < f0 {
                return Some((lo, xn, fv, gv));
            }
        }
    }
    None
}

fn identity(p: usize) -> Vec<f64> {
    let mut h = vec![0.0; p * p];
    for i in 0..p {
        h[i * p + i] = 1.0;
    }
    h
}

fn neg_mat_vec(h: &[f64], g: &[f64], p: usize) -> Vec<f64> {
    let mut d = vec![0.0; p];
    for i in 0..p {
        let row = &h[i * p..(i + 1) * p];
        let mut acc = 0.0;
        for (hij, gj) in row.iter().zip(g) {
            acc += hij * gj;
        }
        d[i] = -acc;
    }
    d
}

fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64, p: usize) {
    // H <- (I - r s y') H (I - r y s') + r s s', r = 1/sy.
    let r = 1.0 / sy;
    let mut hy = vec![0.0; p];
    for i in 0..p {
        let row = &h[i * p..(i + 1) * p];
        let mut acc = 0.0;
        for (hij, yj) in row.iter().zip(y) {
            acc += hij * yj;
        }
        hy[i] = acc;
    }
    let yhy = dot(y, &hy);
    for i in 0..p {
        for j in 0..p {
            h[i * p + j] += -r * (s[i] * hy[j] + hy[i] * s[j]) + r * r * yhy * s[i] * s[j]
                + r * s[i] * s[j];
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximizes_concave_quadratic() {
        // f(x) = -(x0-3)^2 - 2(x1+1)^2
        let obj = |x: &[f64]| {
            let f = -(x[0] - 3.0).powi(2) - 2.0 * (x[1] + 1.0).powi(2);
            let g = vec![-2.0 * (x[0] - 3.0), -4.0 * (x[1] + 1.0)];
            Some((f, g))
        };
        let res = maximize(
            &obj,
            &[0.0, 0.0],
            &BfgsOptions {
                grad_tol: 1e-10,
                ..Default::default()
            },
        );
        assert!(res.converged);
        assert!((res.x[0] - 3.0).abs() < 1e-8);
        assert!((res.x[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn climbs_negative_rosenbrock() {
        let obj = |x: &[f64]| {
            let a = 1.0 - x[0];
            let b = x[1] - x[0] * x[0];
            let f = -(a * a + 100.0 * b * b);
            let g = vec![2.0 * a + 400.0 * x[0] * b, -200.0 * b];
            Some((f, g))
        };
        let res = maximize(
            &obj,
            &[-1.2, 1.0],
            &BfgsOptions {
                max_iterations: 2000,
                grad_tol: 1e-8,
                ..Default::default()
            },
        );
        assert!((res.x[0] - 1.0).abs() < 1e-5, "{:?}", res.x);
        assert!((res.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn respects_undefined_regions() {
        // Only defined for x < 2; maximum at x = 1.
        let obj = |x: &[f64]| {
            if x[0] >= 2.0 {
                return None;
            }
            Some((-(x[0] - 1.0).powi(2), vec![-2.0 * (x[0] - 1.0)]))
        };
        let res = maximize(&obj, &[-10.0], &BfgsOptions::default());
        assert!((res.x[0] - 1.0).abs() < 1e-6, "{:?}", res);
    }

    #[test]
    fn coordinate_bound_aborts() {
        // Unbounded ascent in x0.
        let obj = |x: &[f64]| Some((x[0], vec![1.0]));
        let res = maximize(
            &obj,
            &[0.0],
            &BfgsOptions {
                coord_bound: Some(30.0),
                ..Default::default()
            },
        );
        assert!(!res.converged);
        assert_eq!(res.reason, StopReason::CoordinateBound);
    }

    #[test]
    fn infeasible_start_reported() {
        let obj = |_: &[f64]| -> Option<(f64, Vec<f64>)> { None };
        let res = maximize(&obj, &[0.0], &BfgsOptions::default());
        assert_eq!(res.reason, StopReason::InfeasibleStart);
    }
}
