//! Type III F tests with Satterthwaite denominator degrees of freedom.
//!
//! The variance parameters are `φ = (θ, σ)`. Their covariance is
//! `A = (½·∇²d)⁻¹` with `d` the (non-profiled) REML deviance, and the
//! derivatives of `Var(β̂)` with respect to `φ` are taken by central
//! differences. A single contrast `c` gets `ν = 2v²/(gᵀAg)` with
//! `v = cᵀVc` and `g_k = cᵀ(∂V/∂φ_k)c`.
//!
//! A `q`-row hypothesis `L` is rotated onto the eigenvectors of `LVLᵀ`,
//! giving `q` independent contrasts with dfs `ν_m`. Then `F = Σ t²_m / q`
//! and the denominator df matches the mean of `q·F(q, ν)`:
//! `E = Σ ν_m/(ν_m − 2)`, `df = 2E/(E − q)`, with `df = 2` as soon as
//! one `ν_m ≤ 2`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{f_upper_tail, InferenceError, TestResult};
use crate::reml::{vcov_from_lx, FitProblem, FitResult};

/// Relative finite-difference step.
const STEP: f64 = 1e-4;

/// Everything the per-effect tests share for one fit.
#[derive(Debug, Clone)]
pub struct Satterthwaite {
    pub beta: DVector<f64>,
    /// `Var(β̂)` at the estimate.
    pub vcov: DMatrix<f64>,
    /// `∂Var(β̂)/∂φ_k`, θ entries first, σ last.
    pub jacobian: Vec<DMatrix<f64>>,
    /// Asymptotic covariance of `φ̂`.
    pub phi_cov: DMatrix<f64>,
    pub singular_hessian: bool,
    pub residual_df: f64,
}

fn step(x: f64) -> f64 {
    STEP * (1.0 + x.abs())
}

impl Satterthwaite {
    pub fn new(problem: &FitProblem, fit: &FitResult) -> Result<Self, InferenceError> {
        if !fit.converged {
            return Err(InferenceError::NonConvergedFit);
        }
        let theta = &fit.theta_hat;
        let sigma = fit.sigma2_hat.sqrt();
        let s2 = fit.sigma2_hat;
        let nt = theta.len();
        let nmp = (problem.n_obs() - problem.p()) as f64;

        let e0 = problem.evaluate(theta)?;
        let vcov = vcov_from_lx(&e0.lx, s2);

        let shifted = |k: usize, d: f64| -> Result<_, InferenceError> {
            let mut t = theta.clone();
            t[k] += d;
            Ok(problem.evaluate(&t)?)
        };

        let mut jacobian = Vec::with_capacity(nt + 1);
        for k in 0..nt {
            let h = step(theta[k]);
            let vp = vcov_from_lx(&shifted(k, h)?.lx, s2);
            let vm = vcov_from_lx(&shifted(k, -h)?.lx, s2);
            jacobian.push((vp - vm) / (2.0 * h));
        }
        jacobian.push(&vcov * (2.0 / sigma));

        // The deviance at (θ, σ) is c(θ) + m·log(2πσ²) + r²(θ)/σ², so one
        // factorization per θ point serves every σ.
        let dev = |c: f64, r2: f64, s: f64| {
            c + nmp * (2.0 * std::f64::consts::PI * s * s).ln() + r2 / (s * s)
        };
        let parts = |t: &[f64]| -> Result<(f64, f64), InferenceError> {
            let e = problem.evaluate(t)?;
            Ok((e.logdet_l + e.logdet_rx, e.pwrss))
        };
        let n = nt + 1;
        let mut phi = theta.clone();
        phi.push(sigma);
        let h: Vec<f64> = phi.iter().map(|&x| step(x)).collect();
        let at = |offsets: &[(usize, f64)]| -> Result<f64, InferenceError> {
            let mut t = theta.clone();
            let mut s = sigma;
            for &(k, d) in offsets {
                if k == nt {
                    s += d;
                } else {
                    t[k] += d;
                }
            }
            let (c, r2) = parts(&t)?;
            Ok(dev(c, r2, s))
        };
        let f0 = at(&[])?;
        let mut hess = DMatrix::zeros(n, n);
        for i in 0..n {
            let fp = at(&[(i, h[i])])?;
            let fm = at(&[(i, -h[i])])?;
            hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
            for j in 0..i {
                let pp = at(&[(i, h[i]), (j, h[j])])?;
                let pm = at(&[(i, h[i]), (j, -h[j])])?;
                let mp = at(&[(i, -h[i]), (j, h[j])])?;
                let mm = at(&[(i, -h[i]), (j, -h[j])])?;
                let v = (pp - pm - mp + mm) / (4.0 * h[i] * h[j]);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        let half = (&hess + hess.transpose()) * 0.25;
        let (phi_cov, singular_hessian) = inverse_or_pinv(&half);

        Ok(Self {
            beta: DVector::from_column_slice(&fit.beta_hat),
            vcov,
            jacobian,
            phi_cov,
            singular_hessian,
            residual_df: nmp,
        })
    }

    /// Satterthwaite df of one contrast; `None` when the delta-method
    /// variance is not positive.
    pub fn contrast_df(&self, c: &DVector<f64>) -> Option<f64> {
        let v = c.dot(&(&self.vcov * c));
        let g = DVector::from_iterator(self.jacobian.len(), self.jacobian.iter().map(|j| c.dot(&(j * c))));
        let var = g.dot(&(&self.phi_cov * &g));
        let nu = 2.0 * v * v / var;
        (var > 0.0 && nu.is_finite()).then_some(nu)
    }
}

/// Inverse of a symmetric matrix, or its pseudo-inverse over the positive
/// eigenvalues when it is not positive definite.
fn inverse_or_pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(c) = m.clone().cholesky() {
        if c.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
            return (c.inverse(), false);
        }
    }
    let eig = SymmetricEigen::new(m.clone());
    let tol = 1e-10 * eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > tol {
            let v = eig.eigenvectors.column(k);
            out += v * v.transpose() / l;
        }
    }
    (out, true)
}

/// Combined denominator df of independent single-df contrasts.
fn combine_df(nu: &[f64]) -> f64 {
    if nu.len() == 1 {
        return nu[0];
    }
    if nu.iter().any(|&v| v <= 2.0) {
        return 2.0;
    }
    let q = nu.len() as f64;
    let e: f64 = nu.iter().map(|v| v / (v - 2.0)).sum();
    2.0 * e / (e - q)
}

/// F test of `Lβ = 0` for an arbitrary hypothesis matrix (one row per
/// contrast, one column per fixed coefficient).
pub fn contrast_test(
    sat: &Satterthwaite,
    l: &DMatrix<f64>,
    label: &str,
) -> Result<TestResult, InferenceError> {
    if l.ncols() != sat.beta.len() || l.nrows() == 0 {
        return Err(InferenceError::DegenerateHypothesis);
    }
    let m = l * &sat.vcov * l.transpose();
    let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-10 * top;
    let mut f = 0.0;
    let mut nu = Vec::new();
    let mut fallback = false;
    for (k, &d) in eig.eigenvalues.iter().enumerate() {
        if !(top > 0.0 && d > tol) {
            continue;
        }
        let c = l.transpose() * eig.eigenvectors.column(k);
        let t = c.dot(&sat.beta);
        f += t * t / d;
        nu.push(sat.contrast_df(&c).unwrap_or_else(|| {
            fallback = true;
            sat.residual_df
        }));
    }
    if nu.is_empty() {
        return Err(InferenceError::DegenerateHypothesis);
    }
    let q = nu.len() as f64;
    f /= q;
    let df_den = combine_df(&nu);
    Ok(TestResult {
        effect: label.to_string(),
        f,
        df_num: q,
        df_den,
        p_value: f_upper_tail(f, q, df_den),
        df_fallback: fallback,
        singular_hessian: sat.singular_hessian,
    })
}

fn effect_matrix(problem: &FitProblem, k: usize) -> DMatrix<f64> {
    let cols = problem.design.fixed_cols[k].clone();
    let mut l = DMatrix::zeros(cols.len(), problem.p());
    for (r, c) in cols.enumerate() {
        l[(r, c)] = 1.0;
    }
    l
}

/// Type III test of one fixed term. Under sum-to-zero coding of a full
/// factorial, the hypothesis sets the term's own coefficients to zero.
pub fn type3_test(problem: &FitProblem, fit: &FitResult, effect: &str) -> Result<TestResult, InferenceError> {
    let k = problem
        .design
        .fixed_labels
        .iter()
        .position(|l| l == effect)
        .ok_or_else(|| InferenceError::UnknownEffect(effect.to_string()))?;
    let sat = Satterthwaite::new(problem, fit)?;
    contrast_test(&sat, &effect_matrix(problem, k), effect)
}

/// Type III tests of every fixed term except the intercept, sharing one
/// parameter Hessian.
pub fn anova(problem: &FitProblem, fit: &FitResult) -> Result<Vec<TestResult>, InferenceError> {
    let sat = Satterthwaite::new(problem, fit)?;
    (1..problem.design.fixed_labels.len())
        .map(|k| contrast_test(&sat, &effect_matrix(problem, k), &problem.design.fixed_labels[k]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_df_rules() {
        assert_eq!(combine_df(&[7.5]), 7.5);
        assert_eq!(combine_df(&[10.0, 1.5]), 2.0);
        let nu = 12.0;
        assert!((combine_df(&[nu, nu, nu]) - nu).abs() < 1e-12);
        let d = combine_df(&[5.0, 50.0]);
        assert!(d > 5.0 && d < 50.0);
    }

    #[test]
    fn pinv_of_singular_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (p, singular) = inverse_or_pinv(&m);
        assert!(singular);
        assert!((&m * &p * &m - &m).abs().max() < 1e-12);
        let (i, singular) = inverse_or_pinv(&DMatrix::from_diagonal_element(2, 2, 4.0));
        assert!(!singular);
        assert!((i[(0, 0)] - 0.25).abs() < 1e-15);
    }
}
