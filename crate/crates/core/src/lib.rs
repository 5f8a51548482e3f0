//! Monte Carlo estimators for Lions derivatives of McKean-Vlasov semigroups.

// Negated comparisons are deliberate: `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bismut;
pub mod error;
pub mod estimate;
pub mod flow;
pub mod functions;
pub mod grid;
pub mod hamiltonian;
pub mod initial;
pub mod linalg;
pub mod measure;
pub mod model;
pub mod models;
pub mod noise;
pub mod oracle;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use measure::{empirical_mean, wasserstein2, EmpiricalMeasure, ParticleEnsemble};
pub use model::CoefficientModel;
pub use sim::{clone_shifted, euler_step, simulate, ParticleSystem, TrajectoryBundle};

// The guide's code listings run as doctests so the book cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/flows.md")]
    mod flows {}
    #[doc = include_str!("../../../book/src/weighted.md")]
    mod weighted {}
    #[doc = include_str!("../../../book/src/degenerate.md")]
    mod degenerate {}
    #[doc = include_str!("../../../book/src/oracles.md")]
    mod oracles {}
}
