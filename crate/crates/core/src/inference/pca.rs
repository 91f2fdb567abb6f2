//! Data-driven reduction of the maximal structure by principal components
//! of the estimated random-effect covariances.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::InferenceError;
use crate::covariance::{realize, CovFamily, CovStructure, FamilyTag};
use crate::data::Dataset;
use crate::formula::{ModelSpec, RandomTerm, UnitKind};
use crate::reml::{fit, refit_with_structure, FitError, FitOptions, FitProblem, FitResult};

/// Share of the total variance the retained components must reach.
pub const PCA_VARIANCE_CUTOFF: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SelectionProcedure {
    /// Likelihood-ratio test between nested structures; the larger one is
    /// kept when the test rejects at `alpha`.
    Lrt { alpha: f64 },
    Aic,
}

impl Default for SelectionProcedure {
    fn default() -> Self {
        SelectionProcedure::Lrt { alpha: 0.05 }
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub spec: ModelSpec,
    pub structure: CovStructure,
    pub problem: FitProblem,
    pub fit: FitResult,
    /// Whether the selected structure keeps correlations within units.
    pub correlated: bool,
    /// Outcome of the first correlated versus uncorrelated comparison, on
    /// the dimension-reduced terms.
    pub initial_correlated: bool,
    /// Estimated dimensionality of the participant and stimulus covariances
    /// of the maximal fit.
    pub dimensions: Vec<(UnitKind, usize)>,
}

/// Number of leading eigenvalues needed to reach `cutoff` of their sum.
pub fn pca_dimension(eigenvalues: &[f64], cutoff: f64) -> usize {
    let mut e: Vec<f64> = eigenvalues.iter().map(|v| v.max(0.0)).collect();
    e.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = e.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (k, v) in e.iter().enumerate() {
        acc += v;
        if acc >= cutoff * total {
            return k + 1;
        }
    }
    e.len()
}

struct Candidate {
    terms: Vec<RandomTerm>,
    correlated: bool,
    problem: FitProblem,
    fit: FitResult,
}

impl Candidate {
    fn k(&self) -> usize {
        self.problem.structure.n_params()
    }
}

struct Context<'a> {
    spec: &'a ModelSpec,
    max_problem: &'a FitProblem,
    max_fit: &'a FitResult,
    options: &'a FitOptions,
}

impl Context<'_> {
    fn fit(&self, terms: Vec<RandomTerm>, correlated: bool) -> Result<Candidate, InferenceError> {
        let spec = self.spec.with_random_terms(terms.clone()).map_err(|e| FitError::Cov(e.into()))?;
        let tag = if correlated { FamilyTag::Max } else { FamilyTag::ZcpPoly };
        let structure = realize(&spec, CovFamily::new(tag, spec.has_pair_unit())).map_err(FitError::from)?;
        let (mut problem, fit) = refit_with_structure(self.max_problem, self.max_fit, structure, self.options)?;
        problem.spec = spec;
        Ok(Candidate { terms, correlated, problem, fit })
    }
}

/// Whether the procedure prefers the smaller of two nested candidates.
fn prefers_smaller(proc: SelectionProcedure, small: &Candidate, large: &Candidate) -> bool {
    if !large.fit.converged {
        return true;
    }
    if !small.fit.converged {
        return false;
    }
    let (ks, kl) = (small.k(), large.k());
    match proc {
        SelectionProcedure::Aic => {
            small.fit.deviance + 2.0 * ks as f64 <= large.fit.deviance + 2.0 * kl as f64
        }
        SelectionProcedure::Lrt { alpha } => {
            if kl <= ks {
                return true;
            }
            let stat = (small.fit.deviance - large.fit.deviance).max(0.0);
            let p = ChiSquared::new((kl - ks) as f64).map(|d| d.sf(stat)).unwrap_or(1.0);
            p > alpha
        }
    }
}

/// Drops the terms of highest interaction order, intercepts excepted.
fn drop_highest(terms: &[RandomTerm]) -> Option<Vec<RandomTerm>> {
    let top = terms.iter().filter(|t| !t.is_intercept()).map(|t| t.order()).max()?;
    Some(terms.iter().filter(|t| t.is_intercept() || t.order() < top).cloned().collect())
}

/// Selects a structure starting from the maximal model of `spec`:
///
/// 1. fit the maximal structure;
/// 2. per participant and stimulus unit, estimate the dimensionality of
///    the random effects and drop terms of highest order until the unit's
///    column count does not exceed it;
/// 3. choose between the correlated and uncorrelated version;
/// 4. while the procedure prefers it, drop the highest-order terms;
/// 5. try adding or dropping the correlations once more.
///
/// Random intercepts are never dropped.
pub fn cs_pca_select(
    data: &Dataset,
    spec: &ModelSpec,
    procedure: SelectionProcedure,
    options: &FitOptions,
) -> Result<Selection, InferenceError> {
    let max_structure = realize(spec, CovFamily::new(FamilyTag::Max, spec.has_pair_unit())).map_err(FitError::from)?;
    let max_problem = FitProblem::new(spec, data, max_structure)?;
    let max_fit = fit(&max_problem, options);
    if !max_fit.converged {
        return Err(InferenceError::MaxFitFailed);
    }
    let ctx = Context { spec, max_problem: &max_problem, max_fit: &max_fit, options };

    let mut terms: Vec<RandomTerm> = Vec::new();
    let mut dimensions = Vec::new();
    for (ui, u) in max_problem.structure.units.iter().enumerate() {
        let mut kept: Vec<(RandomTerm, usize)> = u.terms.iter().map(|t| (t.term.clone(), t.width)).collect();
        if u.unit != UnitKind::ParticipantStimulus {
            let cov = max_problem.structure.relative_cov(ui, &max_fit.theta_hat);
            let r = pca_dimension(SymmetricEigen::new(cov).eigenvalues.as_slice(), PCA_VARIANCE_CUTOFF);
            dimensions.push((u.unit, r));
            loop {
                let dim: usize = kept.iter().map(|(_, w)| w).sum();
                if dim <= r {
                    break;
                }
                // Highest order first; among equals, the last in canonical order.
                let Some(pos) = kept
                    .iter()
                    .enumerate()
                    .filter(|(_, (t, _))| !t.is_intercept())
                    .max_by_key(|(i, (t, _))| (t.order(), *i))
                    .map(|(i, _)| i)
                else {
                    break;
                };
                kept.remove(pos);
            }
        }
        terms.extend(kept.into_iter().map(|(t, _)| t));
    }

    let plus = ctx.fit(terms.clone(), true)?;
    let minus = ctx.fit(terms, false)?;
    let mut reduced = if prefers_smaller(procedure, &minus, &plus) { minus } else { plus };
    let chosen_correlated = reduced.correlated;

    while let Some(smaller) = drop_highest(&reduced.terms) {
        let cand = ctx.fit(smaller, reduced.correlated)?;
        if prefers_smaller(procedure, &cand, &reduced) {
            reduced = cand;
        } else {
            break;
        }
    }

    let flipped = ctx.fit(reduced.terms.clone(), !chosen_correlated)?;
    let keep_flipped = if chosen_correlated {
        prefers_smaller(procedure, &flipped, &reduced)
    } else {
        !prefers_smaller(procedure, &reduced, &flipped)
    };
    let out = if keep_flipped { flipped } else { reduced };
    Ok(Selection {
        spec: out.problem.spec.clone(),
        structure: out.problem.structure.clone(),
        correlated: out.correlated,
        initial_correlated: chosen_correlated,
        problem: out.problem,
        fit: out.fit,
        dimensions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimension_cutoff() {
        assert_eq!(pca_dimension(&[0.0, 0.0], PCA_VARIANCE_CUTOFF), 0);
        assert_eq!(pca_dimension(&[1.0, 1e-6, 0.0], PCA_VARIANCE_CUTOFF), 1);
        assert_eq!(pca_dimension(&[1.0, 0.01, 0.0], PCA_VARIANCE_CUTOFF), 2);
        assert_eq!(pca_dimension(&[-1e-12, 2.0, 2.0], PCA_VARIANCE_CUTOFF), 2);
    }
}
