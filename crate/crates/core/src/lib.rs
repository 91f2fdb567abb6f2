//! Crossed random-effects mixed models for participant/stimulus designs:
//! formula parsing, correlation-structure families, REML fitting, type-III
//! tests with Satterthwaite degrees of freedom, and a simulation harness.

pub mod contrasts;
pub mod covariance;
pub mod data;
pub mod design;
pub mod formula;
pub mod optim;
pub mod reml;
pub mod inference;
pub mod report;
pub mod simulation;
