//! Reference oracles, data generators and property checks shared by the
//! integration and acceptance tests.

pub mod gen;
pub mod oracle;
pub mod props;
pub mod scenarios;

pub use gen::{one_factor, random_problem, OneFactor, RandomProblem};
pub use oracle::{dense_deviance, helmert, ranova};
