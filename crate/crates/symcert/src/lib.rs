//! Fresh-symbol generalization certificates for kernel logistic regression
//! on template tasks.
//!
//! The crate covers the full pipeline: template families and substitution
//! schemes ([`task`]), token-symmetric kernels and Gram bundles ([`kernel`]),
//! the entropy-dual solvers ([`klr`]), the colored collision graph
//! ([`graph`]), KL envelopes ([`kl`]), the five transfer budgets
//! ([`certify`]), the edge–wedge envelope ([`edge_wedge`]), the frozen-feature
//! transformer kernel ([`transformer`]) and the abstract-prompting margin
//! derivative ([`prompting`]).

pub mod certify;
pub mod edge_wedge;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod kernel;
pub mod kl;
pub mod klr;
pub mod linalg;
pub mod prompting;
pub mod task;
pub mod transformer;
pub mod worked_cases;

pub use error::{Error, Result};
