//! Lead-acid battery digital twin.
//!
//! The crate simulates a 12 V lead-acid battery as a second-order RC
//! equivalent circuit, identifies the circuit parameters from pulse tests,
//! estimates state of charge with an extended Kalman filter and regulates
//! constant-current charge and discharge with a duty-cycle PID loop.
//!
//! - [`ecm`]: circuit model, OCV curve, parameter tables, discrete dynamics.
//! - [`fit`]: Levenberg-Marquardt solver, relaxation and OCV fits, pulse-test
//!   segmentation and parameter identification.
//! - [`ekf`]: the SoC estimator.
//! - [`control`]: PID duty law, averaged converter relations, CC/CV modes.
//! - [`sim`]: sensors, scenarios and the closed-loop harness.
//! - [`trace`]: timestamped samples and the CSV trace formats.
//!
//! Current is positive when charging throughout.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod ecm;
pub mod ekf;
pub mod fit;
pub mod sim;
pub mod trace;

pub use ecm::{Direction, EcmModel, EcmParams, OcvCurve, ParamTable, Soc};
pub use trace::Sample;
