//! Geometrically robust least squares over chordal balls on the Grassmannian,
//! and its use as a data-driven receding-horizon tracking controller.
//!
//! * [`manifold`]: Stiefel representatives, projectors, subspace distances.
//! * [`behavior`]: Hankel matrices and subspace identification of restricted behaviors.
//! * [`solver`]: closed-form inner maximiser and gradient-descent outer loop.
//! * [`oracle`]: brute-force cross-checks for the closed-form claims.
//! * [`control`]: LTI plants, noise, and the closed-loop harness.
//! * [`io`]: CSV / JSON persistence.

pub mod behavior;
pub mod control;
pub mod error;
pub mod io;
pub mod manifold;
pub mod oracle;
pub mod solver;

pub use error::{Error, Result};
pub use manifold::{StiefelPoint, SubspaceBall};
pub use solver::{RobustLsqProblem, Selector, SolverOptions, SolverResult};
