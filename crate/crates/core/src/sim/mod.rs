//! Scenario engine: scripted current profiles, sensor models and the closed
//! loop of plant, controller and estimator.

mod run;
mod scenario;
mod sensor;

pub use run::{
    plant_step, run_scenario, ControlRow, EkfSetup, PlantStep, RunArtifacts, RunConfig, TruthRow,
};
pub use scenario::{generate_hppc_scenario, HppcPlan, Phase, Scenario};
pub use sensor::{quantize, Channel, SensorModel, Sensors};

use thiserror::Error;

use crate::control::ControlError;
use crate::ecm::EcmError;
use crate::ekf::{EkfError, EkfStepRecord};
use crate::trace::fmt_f64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("battery empty at t = {t} s")]
    SocExhausted { t: f64 },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] EcmError),
    #[error(transparent)]
    Estimator(#[from] EkfError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

pub const EKF_TRACE_HEADER: &str = "t_s,soc_true,soc_est,v_meas,v_pred,k_soc";
pub const CONTROL_TRACE_HEADER: &str = "t_s,mode,i_ref_a,i_meas_a,duty,v_v";
pub const TRUTH_TRACE_HEADER: &str = "t_s,i_a,v_v,soc,v1_v,v2_v";

/// Estimator trace. `t`, `soc_true` and `v_meas` are aligned with `records`.
pub fn ekf_trace_csv(
    t: &[f64],
    soc_true: &[f64],
    v_meas: &[f64],
    records: &[EkfStepRecord],
) -> String {
    let mut out = String::from(EKF_TRACE_HEADER);
    out.push('\n');
    for (k, r) in records.iter().enumerate() {
        let row = [
            t[k],
            soc_true[k],
            r.x_post[0],
            v_meas[k],
            r.y_pred,
            r.gain[0],
        ];
        out.push_str(&row.map(fmt_f64).join(","));
        out.push('\n');
    }
    out
}

/// Estimator trace of a simulated run against the plant's SoC.
pub fn run_ekf_csv(run: &RunArtifacts) -> String {
    let t: Vec<f64> = run.truth.iter().map(|r| r.t).collect();
    let s: Vec<f64> = run.truth.iter().map(|r| r.soc).collect();
    let v: Vec<f64> = run.measured.iter().map(|r| r.v).collect();
    ekf_trace_csv(&t, &s, &v, &run.ekf)
}

pub fn controller_trace_csv(rows: &[ControlRow]) -> String {
    let mut out = String::from(CONTROL_TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_f64(r.t),
            r.mode.as_str(),
            fmt_f64(r.i_ref),
            fmt_f64(r.i_meas),
            fmt_f64(r.duty),
            fmt_f64(r.v)
        ));
    }
    out
}

pub fn truth_trace_csv(rows: &[TruthRow]) -> String {
    let mut out = String::from(TRUTH_TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let row = [r.t, r.i, r.v, r.soc, r.v1, r.v2];
        out.push_str(&row.map(fmt_f64).join(","));
        out.push('\n');
    }
    out
}
