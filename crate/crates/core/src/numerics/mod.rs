//! Self-contained dense numerical kernels.

pub mod adam;
pub mod autodiff;
pub mod dare;
pub mod linalg;
pub mod lp;
pub mod qp;

pub use adam::{adam_step, AdamMoments};
pub use autodiff::{Tape, Var};
pub use dare::{solve_dare, DareSolution};
pub use linalg::{pinv, rank_report, solve_least_squares, spectral_radius, LeastSquares, RankReport};
pub use qp::{solve_qp, solve_qp_from_feasible, KktResiduals, QpProblem, QpSolution, QpStatus};
