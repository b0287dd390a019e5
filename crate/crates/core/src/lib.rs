//! Numerical laboratory for the Dirichlet problem of the minimal surface
//! system in arbitrary dimension and codimension.

pub mod analytic;
pub mod barriers;
pub mod continuation;
pub mod criteria;
pub mod domain;
pub mod expr;
pub mod flow;
pub mod jetcalc;
pub mod lemma_lab;
pub mod linalg;
pub mod sampling;
