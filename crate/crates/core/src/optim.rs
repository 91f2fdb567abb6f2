//! Bound-constrained derivative-free minimizers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Powell's trust-region method on quadratic interpolation models.
    BoundedQuadraticApprox,
    NelderMead,
    /// Projected BFGS with finite-difference gradients.
    BoundedQuasiNewton,
}

impl OptimizerKind {
    pub const CASCADE: [OptimizerKind; 3] = [
        Self::BoundedQuadraticApprox,
        Self::NelderMead,
        Self::BoundedQuasiNewton,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::BoundedQuadraticApprox => "bobyqa",
            Self::NelderMead => "nelder-mead",
            Self::BoundedQuasiNewton => "quasi-newton",
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub n_evals: usize,
    /// The method's own stopping rule fired (not the budget).
    pub success: bool,
}

/// Objective with an evaluation counter, a hard budget and best-point
/// tracking. Non-finite values are treated as `+∞`.
struct Counted<'a> {
    f: &'a mut dyn FnMut(&[f64]) -> f64,
    n: usize,
    max: usize,
    best_x: Vec<f64>,
    best_f: f64,
}

impl<'a> Counted<'a> {
    fn new(f: &'a mut dyn FnMut(&[f64]) -> f64, max: usize, x0: &[f64]) -> Self {
        Self { f, n: 0, max, best_x: x0.to_vec(), best_f: f64::INFINITY }
    }

    fn exhausted(&self) -> bool {
        self.n >= self.max
    }

    fn eval(&mut self, x: &[f64]) -> f64 {
        self.n += 1;
        let v = (self.f)(x);
        let v = if v.is_finite() { v } else { f64::INFINITY };
        if v < self.best_f {
            self.best_f = v;
            self.best_x.copy_from_slice(x);
        }
        v
    }

    fn finish(self, success: bool) -> OptResult {
        OptResult { x: self.best_x, f: self.best_f, n_evals: self.n, success }
    }
}

fn project(x: &mut [f64], lb: &[f64], ub: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lb[i], ub[i]);
    }
}

pub fn minimize(
    kind: OptimizerKind,
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    lb: &[f64],
    ub: &[f64],
    max_evals: usize,
) -> OptResult {
    match kind {
        OptimizerKind::BoundedQuadraticApprox => bobyqa_min(f, x0, lb, ub, max_evals),
        OptimizerKind::NelderMead => nelder_mead(f, x0, lb, ub, max_evals),
        OptimizerKind::BoundedQuasiNewton => quasi_newton(f, x0, lb, ub, max_evals),
    }
}

/// Infinite bounds are replaced by ±1e6, which the interpolation method
/// needs to be finite.
pub fn bobyqa_min(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    lb: &[f64],
    ub: &[f64],
    max_evals: usize,
) -> OptResult {
    const BIG: f64 = 1e6;
    let n = x0.len();
    if n == 0 {
        let v = f(&[]);
        return OptResult { x: vec![], f: v, n_evals: 1, success: v.is_finite() };
    }
    // The method needs at least two variables; pad with an inert one.
    let m = n.max(2);
    let mut lo: Vec<f64> = lb.iter().map(|v| v.max(-BIG)).collect();
    let mut hi: Vec<f64> = ub.iter().map(|v| v.min(BIG)).collect();
    let mut x: Vec<f64> = x0.to_vec();
    project(&mut x, &lo, &hi);
    if m > n {
        lo.push(-1.0);
        hi.push(1.0);
        x.push(0.0);
    }
    let min_width = lo.iter().zip(&hi).map(|(l, h)| h - l).fold(f64::INFINITY, f64::min);
    let mut cfg = bobyqa::Config::new(m);
    cfg.npt = 2 * m + 1;
    cfg.rho_begin = 0.2f64.min(0.4 * min_width);
    cfg.rho_end = 1e-7f64.min(cfg.rho_begin * 1e-3);
    cfg.max_fun = max_evals;
    let mut counted = Counted::new(f, max_evals, &x[..n]);
    let status = match bobyqa::Bobyqa::new(m, cfg) {
        Ok(mut solver) => {
            let out = solver.minimize(
                |z: &[f64]| {
                    let v = counted.eval(&z[..n]);
                    if v.is_finite() { v } else { f64::NAN }
                },
                &mut x,
                &lo,
                &hi,
            );
            Some(out.status)
        }
        Err(_) => None,
    };
    let ok = matches!(
        status,
        Some(bobyqa::Status::Converged | bobyqa::Status::FtolReached | bobyqa::Status::TargetReached)
    ) && counted.best_f.is_finite();
    counted.finish(ok)
}

/// Adaptive Nelder-Mead (dimension-dependent coefficients) with reflection
/// of trial points at the bounds.
pub fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    lb: &[f64],
    ub: &[f64],
    max_evals: usize,
) -> OptResult {
    let n = x0.len();
    let mut c = Counted::new(f, max_evals, x0);
    if n == 0 {
        c.eval(&[]);
        return c.finish(true);
    }
    let nf = n as f64;
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf);

    let fold = |x: &mut [f64]| {
        for i in 0..n {
            if x[i] < lb[i] {
                x[i] = lb[i] + (lb[i] - x[i]);
            }
            if x[i] > ub[i] {
                x[i] = ub[i] - (x[i] - ub[i]);
            }
            x[i] = x[i].clamp(lb[i], ub[i]);
        }
    };

    let mut start = x0.to_vec();
    project(&mut start, lb, ub);
    let mut simplex: Vec<Vec<f64>> = vec![start.clone()];
    for i in 0..n {
        let mut v = start.clone();
        let step = 0.2 * (1.0 + start[i].abs());
        v[i] = if v[i] + step <= ub[i] { v[i] + step } else { v[i] - step };
        fold(&mut v);
        simplex.push(v);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|v| c.eval(v)).collect();

    loop {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| fv[a].total_cmp(&fv[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        fv = idx.iter().map(|&i| fv[i]).collect();

        let fspread = fv[n] - fv[0];
        let xspread = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let xscale = 1.0 + simplex[0].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if fspread.is_finite() && fspread <= 1e-10 * (1.0 + fv[0].abs()) && xspread <= 1e-7 * xscale {
            return c.finish(true);
        }
        if c.exhausted() {
            return c.finish(false);
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / nf)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[n]).map(|(cj, wj)| cj + t * (cj - wj)).collect()
        };

        let mut xr = along(alpha);
        fold(&mut xr);
        let fr = c.eval(&xr);
        if fr < fv[0] {
            let mut xe = along(alpha * gamma);
            fold(&mut xe);
            let fe = c.eval(&xe);
            if fe < fr {
                simplex[n] = xe;
                fv[n] = fe;
            } else {
                simplex[n] = xr;
                fv[n] = fr;
            }
            continue;
        }
        if fr < fv[n - 1] {
            simplex[n] = xr;
            fv[n] = fr;
            continue;
        }
        let (mut xc, outside) = if fr < fv[n] { (along(alpha * rho), true) } else { (along(-rho), false) };
        fold(&mut xc);
        let fc = c.eval(&xc);
        if (outside && fc <= fr) || (!outside && fc < fv[n]) {
            simplex[n] = xc;
            fv[n] = fc;
            continue;
        }
        // Shrink toward the best vertex.
        for k in 1..=n {
            let v: Vec<f64> = simplex[0]
                .iter()
                .zip(&simplex[k])
                .map(|(b, x)| b + sigma * (x - b))
                .collect();
            simplex[k] = v;
            fv[k] = c.eval(&simplex[k]);
            if c.exhausted() {
                break;
            }
        }
    }
}

/// Projected BFGS: variables at a bound with an outward gradient are held
/// fixed, the inverse-Hessian step is projected back onto the box and
/// accepted by Armijo backtracking.
pub fn quasi_newton(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    lb: &[f64],
    ub: &[f64],
    max_evals: usize,
) -> OptResult {
    let n = x0.len();
    let mut c = Counted::new(f, max_evals, x0);
    let mut x = x0.to_vec();
    project(&mut x, lb, ub);
    let mut fx = c.eval(&x);
    if n == 0 || !fx.is_finite() {
        let ok = fx.is_finite();
        return c.finish(ok);
    }

    let grad = |c: &mut Counted, x: &[f64], fx: f64| -> DVector<f64> {
        let mut g = DVector::zeros(n);
        let mut z = x.to_vec();
        for i in 0..n {
            let h = 1e-6 * (1.0 + x[i].abs());
            let up = (x[i] + h).min(ub[i]);
            let dn = (x[i] - h).max(lb[i]);
            z[i] = up;
            let fu = if up > x[i] { c.eval(&z) } else { fx };
            z[i] = dn;
            let fd = if dn < x[i] { c.eval(&z) } else { fx };
            z[i] = x[i];
            g[i] = if up > dn { (fu - fd) / (up - dn) } else { 0.0 };
        }
        g
    };

    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut g = grad(&mut c, &x, fx);
    let mut stall = 0;
    loop {
        let pg = (0..n)
            .map(|i| ((x[i] - g[i]).clamp(lb[i], ub[i]) - x[i]).abs())
            .fold(0.0, f64::max);
        if pg <= 1e-6 * (1.0 + fx.abs()) || stall >= 3 {
            return c.finish(true);
        }
        if c.exhausted() {
            return c.finish(false);
        }
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lb[i] && g[i] > 0.0) || (x[i] >= ub[i] && g[i] < 0.0))
            .collect();
        let mut d = DVector::zeros(n);
        for i in (0..n).filter(|&i| !active[i]) {
            for j in (0..n).filter(|&j| !active[j]) {
                d[i] -= hinv[(i, j)] * g[j];
            }
        }
        if d.dot(&g) >= 0.0 {
            hinv = DMatrix::identity(n, n);
            d = -g.clone();
            for i in (0..n).filter(|&i| active[i]) {
                d[i] = 0.0;
            }
        }

        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-12 && !c.exhausted() {
            let mut xn: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
            project(&mut xn, lb, ub);
            let step: f64 = xn.iter().zip(&x).zip(g.iter()).map(|((a, b), gi)| (a - b) * gi).sum();
            let fnew = c.eval(&xn);
            if fnew <= fx + 1e-4 * step.min(0.0) && fnew.is_finite() {
                accepted = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            return c.finish(true);
        };
        stall = if (fx - fnew) <= 1e-12 * (1.0 + fx.abs()) { stall + 1 } else { 0 };
        let gn = grad(&mut c, &xn, fnew);
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let yv = &gn - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - rho * &s * yv.transpose();
            hinv = &a * &hinv * a.transpose() + rho * &s * s.transpose();
        }
        x = xn;
        fx = fnew;
        g = gn;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosen(x: &[f64]) -> f64 {
        x.windows(2).map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2)).sum()
    }

    fn bounded_quad(x: &[f64]) -> f64 {
        // Unconstrained minimum at (-1, 2, 0.5); the lower bound 0 binds on x0.
        (x[0] + 1.0).powi(2) + 3.0 * (x[1] - 2.0).powi(2) + (x[2] - 0.5).powi(2) + 0.5 * x[1] * x[2]
    }

    #[test]
    fn all_methods_hit_a_binding_bound() {
        let lb = [0.0, 0.0, f64::NEG_INFINITY];
        let ub = [f64::INFINITY; 3];
        for kind in OptimizerKind::CASCADE {
            let mut f = |x: &[f64]| bounded_quad(x);
            let r = minimize(kind, &mut f, &[1.0, 1.0, 0.0], &lb, &ub, 10_000);
            assert!(r.success, "{kind:?}");
            assert!(r.x[0].abs() < 1e-5, "{kind:?} {:?}", r.x);
            // Stationarity in the free coordinates.
            let g1 = 6.0 * (r.x[1] - 2.0) + 0.5 * r.x[2];
            let g2 = 2.0 * (r.x[2] - 0.5) + 0.5 * r.x[1];
            assert!(g1.abs() < 1e-3 && g2.abs() < 1e-3, "{kind:?} {g1} {g2}");
        }
    }

    #[test]
    fn rosenbrock_two_d() {
        let lb = [-5.0; 2];
        let ub = [5.0; 2];
        for kind in OptimizerKind::CASCADE {
            let mut f = |x: &[f64]| rosen(x);
            let r = minimize(kind, &mut f, &[-1.2, 1.0], &lb, &ub, 10_000);
            assert!(r.f < 1e-6, "{kind:?} {}", r.f);
        }
    }

    #[test]
    fn one_dimensional_and_budget() {
        let mut f = |x: &[f64]| (x[0] - 0.3).powi(2);
        let r = bobyqa_min(&mut f, &[1.0], &[0.0], &[f64::INFINITY], 1000);
        assert!(r.success && (r.x[0] - 0.3).abs() < 1e-6);
        let mut g = |x: &[f64]| rosen(x);
        let r = nelder_mead(&mut g, &[-1.2, 1.0, 1.0, 1.0], &[-5.0; 4], &[5.0; 4], 30);
        assert!(!r.success);
        assert!(r.n_evals <= 40);
    }

    #[test]
    fn non_finite_values_are_avoided() {
        let mut f = |x: &[f64]| if x[0] < 0.5 { f64::NAN } else { (x[0] - 0.6).powi(2) + x[1] * x[1] };
        for kind in OptimizerKind::CASCADE {
            let r = minimize(kind, &mut f, &[1.0, 1.0], &[0.0, -2.0], &[2.0, 2.0], 5000);
            assert!((r.x[0] - 0.6).abs() < 1e-3, "{kind:?} {:?}", r.x);
        }
    }
}
