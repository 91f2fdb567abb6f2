//! Fixed-effect tests, the gANOVA to RI-L variance map and data-driven
//! structure selection.

mod pca;
mod quasi;
mod satterthwaite;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use thiserror::Error;

use crate::data::DataError;
use crate::reml::FitError;

pub use pca::{cs_pca_select, pca_dimension, Selection, SelectionProcedure, PCA_VARIANCE_CUTOFF};
pub use quasi::quasi_f;
pub use satterthwaite::{anova, contrast_test, type3_test, Satterthwaite};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("fit did not converge")]
    NonConvergedFit,
    #[error("unknown fixed effect {0}")]
    UnknownEffect(String),
    #[error("hypothesis matrix has rank zero")]
    DegenerateHypothesis,
    #[error("design is not balanced: {0}")]
    UnbalancedDesign(String),
    #[error("no combination of mean squares matches the expected mean square of {0}")]
    NoQuasiDenominator(String),
    #[error("the maximal model did not converge")]
    MaxFitFailed,
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub effect: String,
    #[serde(rename = "F")]
    pub f: f64,
    /// Integer-valued for type III tests; quasi-F numerators may be
    /// fractional.
    pub df_num: f64,
    pub df_den: f64,
    pub p_value: f64,
    /// Denominator df replaced by `n − p` because the delta-method variance
    /// was not positive.
    pub df_fallback: bool,
    /// The parameter Hessian was not positive definite and was pseudo-inverted.
    pub singular_hessian: bool,
}

/// Upper-tail probability of `F(df1, df2)` at `f`.
pub fn f_upper_tail(f: f64, df1: f64, df2: f64) -> f64 {
    if !(f > 0.0) {
        return 1.0;
    }
    match FisherSnedecor::new(df1, df2) {
        Ok(d) => d.sf(f).clamp(0.0, 1.0),
        Err(_) => f64::NAN,
    }
}

/// RI-L variances implied by a gANOVA fit of one unit and one factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceMap {
    pub sigma2_intercept_uc: f64,
    pub sigma2_f_uc: f64,
    pub sigma2_eps_uc: f64,
    /// The implied intercept variance is non-negative, so RI-L can express
    /// the same covariance.
    pub feasible: bool,
}

/// With orthonormal zero-sum contrasts `C`, `CCᵀ = I − 11ᵀ/n`, so the
/// gANOVA per-unit covariance `σ²_i·11ᵀ + σ²_F·CCᵀ` equals the RI-L one
/// `σ²_i'·11ᵀ + σ²_F'·I` iff `σ²_F' = σ²_F` and `σ²_i' = σ²_i − σ²_F/n`.
pub fn map_ganova_to_ril(sigma2_c_i: f64, sigma2_c_f: f64, sigma2_c_eps: f64, n_levels: usize) -> VarianceMap {
    let a = 1.0 / n_levels as f64;
    let i = sigma2_c_i - a * sigma2_c_f;
    VarianceMap { sigma2_intercept_uc: i, sigma2_f_uc: sigma2_c_f, sigma2_eps_uc: sigma2_c_eps, feasible: i >= 0.0 }
}

/// Inverse of [`map_ganova_to_ril`]; returns `(σ²_i, σ²_F, σ²_ε)` of gANOVA.
pub fn map_ril_to_ganova(map: &VarianceMap, n_levels: usize) -> (f64, f64, f64) {
    let a = 1.0 / n_levels as f64;
    (map.sigma2_intercept_uc + a * map.sigma2_f_uc, map.sigma2_f_uc, map.sigma2_eps_uc)
}
