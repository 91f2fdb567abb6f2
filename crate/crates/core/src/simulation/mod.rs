//! Data generation and simulation studies.

mod generator;
mod study;

use thiserror::Error;

use crate::covariance::CovError;
use crate::data::DataError;
use crate::design::DesignError;
use crate::formula::FormulaError;
use crate::reml::FitError;

pub use generator::{generate, generate_replicate, GenConfig, Generated, RePattern, UnitEffects};
pub use study::{
    agresti_coull_ci, convergence_study, power_study, report, run_replicates, run_study, ConvergenceReport,
    ConvergenceRow, Outcome, PowerPoint, PowerReport, SimReport, SimRow, StudyOptions, StudyRun,
    CONVERGENCE_SCHEMA, POWER_SCALES, POWER_SCHEMA, REPORT_SCHEMA,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Cov(#[from] CovError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fit(#[from] FitError),
}
