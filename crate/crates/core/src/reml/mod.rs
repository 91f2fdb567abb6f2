//! Profiled REML deviance and its minimization.
//!
//! With `Σ = σ²ΛΛᵀ` the criterion is evaluated from the block factorization
//! of the penalized least-squares system (see [`factor`]):
//!
//! ```text
//! d(θ) = log|L|² + log|R_X|² + (n−p)·(1 + log(2π·r²/(n−p)))
//! ```
//!
//! where `LLᵀ = ΛᵀZᵀZΛ + I`, `R_X R_Xᵀ` is the Schur complement on `X`
//! and `r²` the penalized residual sum of squares.

mod factor;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariance::{realize, CovError, CovFamily, CovStructure};
use crate::data::Dataset;
use crate::design::{build_design, DesignError, DesignMatrices};
use crate::formula::ModelSpec;
use crate::optim::{minimize, OptimizerKind};

use factor::{templates, Plan};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("fixed-effect design is rank deficient")]
    SingularFixedDesign,
    #[error("penalized system is not positive definite")]
    FactorizationFailure,
    #[error("need more observations ({n}) than fixed-effect columns ({p})")]
    TooFewObservations { n: usize, p: usize },
    #[error("response contains non-finite values")]
    NonFiniteResponse,
    #[error("new structure is incompatible with the fitted problem: {0}")]
    IncompatibleStructure(String),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Cov(#[from] CovError),
}

/// Data, design and covariance structure of one model; immutable and
/// shareable across threads.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub spec: ModelSpec,
    /// The input rows in canonical order.
    pub data: Dataset,
    pub design: DesignMatrices,
    pub structure: CovStructure,
    plan: Plan,
}

/// All quantities available at one θ.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub deviance: f64,
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub logdet_l: f64,
    pub logdet_rx: f64,
    pub pwrss: f64,
    /// Lower factor with `L_X L_Xᵀ = σ²·Var(β̂)⁻¹`.
    pub lx: DMatrix<f64>,
    /// Conditional modes `b = Λu` per design unit, group-major.
    pub b: Vec<DVector<f64>>,
}

impl FitProblem {
    /// Rows are put in a canonical order first, so the fit does not depend
    /// on how the input rows happen to be ordered.
    pub fn new(spec: &ModelSpec, data: &Dataset, structure: CovStructure) -> Result<Self, FitError> {
        let data = &data.select_rows(&data.canonical_order());
        let design = build_design(spec, data, &structure)?;
        let (n, p) = (design.n_obs(), design.p());
        if n <= p {
            return Err(FitError::TooFewObservations { n, p });
        }
        if design.y.iter().any(|v| !v.is_finite()) {
            return Err(FitError::NonFiniteResponse);
        }
        let xtx = design.x.transpose() * &design.x;
        let scale = xtx.diagonal().max().max(1.0);
        match xtx.clone().cholesky() {
            Some(c) if c.l_dirty().diagonal().iter().all(|v| v * v > 1e-10 * scale) => {}
            _ => return Err(FitError::SingularFixedDesign),
        }
        let plan = Plan::new(&design);
        Ok(Self { spec: spec.clone(), data: data.clone(), design, structure, plan })
    }

    pub fn from_family(spec: &ModelSpec, data: &Dataset, family: CovFamily) -> Result<Self, FitError> {
        Self::new(spec, data, realize(spec, family)?)
    }

    pub fn n_obs(&self) -> usize {
        self.design.n_obs()
    }

    pub fn p(&self) -> usize {
        self.design.p()
    }

    pub fn n_theta(&self) -> usize {
        self.structure.n_theta()
    }

    /// Factors the system at θ. Only the length of θ is checked: negative
    /// scalars give the same Σ as their absolute value, which finite
    /// differences around a boundary rely on.
    pub fn evaluate(&self, theta: &[f64]) -> Result<Evaluation, FitError> {
        if theta.len() != self.n_theta() {
            return Err(CovError::ThetaLength { expected: self.n_theta(), got: theta.len() }.into());
        }
        let t = templates(&self.structure, &self.design, theta);
        let s = self.plan.solve(&self.design, &t).map_err(|_| FitError::FactorizationFailure)?;
        let nmp = (self.n_obs() - self.p()) as f64;
        let sigma2 = s.pwrss / nmp;
        let deviance = s.logdet_l
            + s.logdet_rx
            + nmp * (1.0 + (2.0 * std::f64::consts::PI * sigma2).ln());
        let b = self
            .design
            .units
            .iter()
            .zip(&t)
            .zip(&s.u)
            .map(|((ud, tu), uu)| {
                let mut out = DVector::zeros(uu.len());
                for g in 0..ud.n_groups {
                    out.rows_mut(g * ud.dim, ud.dim)
                        .copy_from(&(tu * uu.rows(g * ud.dim, ud.dim)));
                }
                out
            })
            .collect();
        Ok(Evaluation {
            deviance,
            beta: s.beta,
            sigma2,
            logdet_l: s.logdet_l,
            logdet_rx: s.logdet_rx,
            pwrss: s.pwrss,
            lx: s.lx,
            b,
        })
    }

    /// REML deviance with σ profiled out, plus β̂ and σ̂².
    pub fn profiled_deviance(&self, theta: &[f64]) -> Result<(f64, DVector<f64>, f64), FitError> {
        self.structure.check_theta(theta)?;
        let e = self.evaluate(theta)?;
        Ok((e.deviance, e.beta, e.sigma2))
    }

    /// REML deviance at a given residual sd, σ not profiled.
    pub fn deviance_at(&self, theta: &[f64], sigma: f64) -> Result<f64, FitError> {
        let e = self.evaluate(theta)?;
        let nmp = (self.n_obs() - self.p()) as f64;
        let s2 = sigma * sigma;
        Ok(e.logdet_l + e.logdet_rx + nmp * (2.0 * std::f64::consts::PI * s2).ln() + e.pwrss / s2)
    }

    /// `Var(β̂) = σ²(R_X R_Xᵀ)⁻¹`.
    pub fn vcov_beta(&self, theta: &[f64], sigma2: f64) -> Result<DMatrix<f64>, FitError> {
        let e = self.evaluate(theta)?;
        Ok(vcov_from_lx(&e.lx, sigma2))
    }
}

pub(crate) fn vcov_from_lx(lx: &DMatrix<f64>, sigma2: f64) -> DMatrix<f64> {
    let p = lx.nrows();
    let mut linv = DMatrix::identity(p, p);
    lx.solve_lower_triangular_mut(&mut linv);
    linv.transpose() * linv * sigma2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    /// Tried in order until one passes the convergence test.
    pub optimizers: Vec<OptimizerKind>,
    pub max_evals: usize,
    /// Starting θ for every stage; defaults to unit relative variances.
    pub start: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { optimizers: OptimizerKind::CASCADE.to_vec(), max_evals: 10_000, start: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub sigma2_hat: f64,
    pub deviance: f64,
    pub converged: bool,
    /// The stage whose solution is reported.
    pub optimizer_used: OptimizerKind,
    /// Total deviance evaluations over all stages and probes.
    pub n_evals: usize,
    pub boundary_flags: Vec<bool>,
}

impl FitResult {
    pub fn any_boundary(&self) -> bool {
        self.boundary_flags.iter().any(|&b| b)
    }
}

/// Relative sd below which a variance parameter counts as zero
/// (variance below 1e-10·σ̂²).
pub const BOUNDARY_TOL: f64 = 1e-5;

/// Probes θ ± h·e_k (kept inside the bounds) and reports whether any probe
/// lowers the deviance by more than 1e-8·(1 + |d|).
fn stencil_ok(problem: &FitProblem, theta: &[f64], f: f64, lb: &[f64], evals: &mut usize) -> bool {
    let tol = 1e-8 * (1.0 + f.abs());
    let mut z = theta.to_vec();
    for k in 0..theta.len() {
        let h = 1e-4 * (1.0 + theta[k].abs());
        for s in [-1.0, 1.0] {
            let v = (theta[k] + s * h).max(lb[k]);
            if v == theta[k] {
                continue;
            }
            z[k] = v;
            *evals += 1;
            let fp = problem.evaluate(&z).map(|e| e.deviance).unwrap_or(f64::INFINITY);
            z[k] = theta[k];
            if fp < f - tol {
                return false;
            }
        }
    }
    true
}

/// Minimizes the profiled deviance with the optimizer cascade. Failures are
/// reported through `converged`, never as errors; the best point over all
/// stages is returned when none converges.
pub fn fit(problem: &FitProblem, options: &FitOptions) -> FitResult {
    let lb = problem.structure.lower_bounds();
    let ub = vec![f64::INFINITY; lb.len()];
    let start = options.start.clone().unwrap_or_else(|| problem.structure.theta0());
    let mut total = 0;
    let mut best: Option<(Vec<f64>, f64, OptimizerKind)> = None;
    let mut objective = |th: &[f64]| problem.evaluate(th).map(|e| e.deviance).unwrap_or(f64::INFINITY);

    for &kind in &options.optimizers {
        let r = minimize(kind, &mut objective, &start, &lb, &ub, options.max_evals);
        total += r.n_evals;
        let mut ok = r.success && r.f.is_finite();
        if ok {
            ok = stencil_ok(problem, &r.x, r.f, &lb, &mut total);
        }
        if best.as_ref().map_or(true, |b| r.f < b.1) {
            best = Some((r.x.clone(), r.f, kind));
        }
        if ok {
            return finish(problem, r.x, kind, true, total);
        }
    }
    let (x, _, kind) = best.unwrap_or((start, f64::INFINITY, OptimizerKind::BoundedQuadraticApprox));
    finish(problem, x, kind, false, total)
}

fn finish(problem: &FitProblem, theta: Vec<f64>, kind: OptimizerKind, converged: bool, n_evals: usize) -> FitResult {
    let (deviance, beta, sigma2, ok) = match problem.evaluate(&theta) {
        Ok(e) => (e.deviance, e.beta.iter().copied().collect(), e.sigma2, true),
        Err(_) => (f64::NAN, vec![f64::NAN; problem.p()], f64::NAN, false),
    };
    FitResult {
        boundary_flags: problem.structure.boundary_flags(&theta, BOUNDARY_TOL),
        theta_hat: theta,
        beta_hat: beta,
        sigma2_hat: sigma2,
        deviance,
        converged: converged && ok && deviance.is_finite(),
        optimizer_used: kind,
        n_evals,
    }
}

/// Refits the same data with another structure, starting from the matching
/// part of a previous solution.
pub fn refit_with_structure(
    problem: &FitProblem,
    result: &FitResult,
    new_structure: CovStructure,
    options: &FitOptions,
) -> Result<(FitProblem, FitResult), FitError> {
    if result.theta_hat.len() != problem.n_theta() {
        return Err(FitError::IncompatibleStructure("result does not belong to the problem".into()));
    }
    for u in &new_structure.units {
        if !problem.structure.units.iter().any(|o| o.unit == u.unit)
            && !problem.spec.random_terms.iter().any(|t| t.unit.tag == u.unit)
        {
            return Err(FitError::IncompatibleStructure(format!("unit {} not in the model", u.unit)));
        }
    }
    let start = if new_structure == problem.structure {
        result.theta_hat.clone()
    } else {
        new_structure.warm_start(&problem.structure, &result.theta_hat)
    };
    let np = FitProblem::new(&problem.spec, &problem.data, new_structure)?;
    let opts = FitOptions { start: Some(start), ..options.clone() };
    let r = fit(&np, &opts);
    Ok((np, r))
}

#[cfg(test)]
mod tests;
