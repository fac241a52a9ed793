//! Parameter identification from pulse-test traces.
//!
//! [`lm_solve`] is a general damped Gauss-Newton solver. On top of it,
//! [`fit_relaxation`] recovers the two RC branches from a rest segment,
//! [`extract_r0`] takes the ohmic resistance from an instantaneous voltage
//! step, and [`fit_ocv_poly`] fits the degree-5 OCV polynomial. The [`hppc`]
//! module cuts a full pulse-test trace into segments and runs all of them.

pub mod hppc;
mod lm;
mod ocv_fit;
mod relax;

pub use hppc::{
    identify_hppc, segment_hppc, BreakpointFailure, BreakpointFit, HppcIdentification, HppcOptions,
    HppcSegment, SegmentKind,
};
pub use lm::{lm_solve, LmConfig, LmReport, Termination};
pub use ocv_fit::{fit_ocv_poly, OcvFit};
pub use relax::{extract_r0, fit_relaxation, relaxation_model, RelaxFit};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("solver did not converge within {iterations} iterations (cost {cost:e})")]
    FitDiverged { iterations: usize, cost: f64 },
    #[error("rank deficient: {distinct} distinct abscissae, need {needed}")]
    RankDeficient { distinct: usize, needed: usize },
    #[error("trace has no current edge above the threshold")]
    UnsegmentableTrace,
    #[error("pulse current is zero")]
    ZeroCurrent,
    #[error("invalid fit input: {0}")]
    InvalidInput(String),
}
