use super::sensor::{SensorModel, Sensors};
use super::{Phase, Scenario, SimError};
use crate::control::{ControlMode, Controller, ControllerConfig};
use crate::ecm::{step_state, BatteryState, Direction, EcmModel, Soc};
use crate::ekf::{Ekf, EkfConfig, EkfStepRecord, EstimatorState};
use crate::trace::Sample;

/// Result of advancing the plant by one interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantStep {
    /// State at the end of the interval.
    pub next: BatteryState,
    /// Table direction used for the interval.
    pub direction: Direction,
    /// True current and terminal voltage at the start of the interval.
    pub truth: Sample,
    pub measured: Sample,
    pub saturated: bool,
}

/// Samples the plant at time `t` with current `i` and advances it by `dt`.
///
/// The direction follows the sign of `i`; zero current keeps `direction`.
pub fn plant_step(
    x: &BatteryState,
    direction: Direction,
    i: f64,
    t: f64,
    dt: f64,
    model: &EcmModel,
    sensors: &mut Sensors,
) -> Result<PlantStep, SimError> {
    let direction = Direction::update(direction, i, 0.0);
    let v = model.terminal_voltage(x, i, direction);
    let (im, vm) = sensors.measure(i, v);
    let m = model.discrete(x.soc, direction, i, dt)?;
    let out = step_state(x, i, &m);
    Ok(PlantStep {
        next: out.state,
        direction,
        truth: Sample::new(t, i, v),
        measured: Sample::new(t, im, vm),
        saturated: out.saturated,
    })
}

/// Filter model, tuning and starting SoC for an online estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfSetup {
    pub model: EcmModel,
    pub config: EkfConfig,
    pub initial_soc: Soc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Plant model. Capacity and efficiency come from the scenario.
    pub truth: EcmModel,
    pub sensors: SensorModel,
    /// Closed-loop current control; `None` applies phase currents directly.
    pub controller: Option<ControllerConfig>,
    pub ekf: Option<EkfSetup>,
    /// Abort with `SocExhausted` when a discharge empties the battery.
    pub halt_on_empty: bool,
    /// Control periods per plant interval.
    pub control_substeps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            truth: EcmModel::reference(),
            sensors: SensorModel::default(),
            controller: None,
            ekf: None,
            halt_on_empty: true,
            control_substeps: 100,
        }
    }
}

/// Plant state and true signals at one sample time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRow {
    pub t: f64,
    pub i: f64,
    pub v: f64,
    pub soc: f64,
    pub v1: f64,
    pub v2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlRow {
    pub t: f64,
    pub mode: ControlMode,
    pub i_ref: f64,
    pub i_meas: f64,
    pub duty: f64,
    pub v: f64,
}

/// Every trace of a run; all share the same timestamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunArtifacts {
    pub truth: Vec<TruthRow>,
    pub measured: Vec<Sample>,
    pub ekf: Vec<EkfStepRecord>,
    pub controller: Vec<ControlRow>,
    /// Duty extremes over every control period.
    pub duty_range: Option<(f64, f64)>,
    /// Final plant state.
    pub final_state: Option<BatteryState>,
}

impl RunArtifacts {
    pub fn truth_samples(&self) -> Vec<Sample> {
        self.truth
            .iter()
            .map(|r| Sample::new(r.t, r.i, r.v))
            .collect()
    }
}

struct Loop {
    ctl: Controller,
    sensors: Sensors,
    substeps: usize,
    i_cmd: f64,
}

impl Loop {
    /// Runs the control periods of one plant interval and returns the mean
    /// commanded current, which the plant then carries for the interval.
    fn interval(
        &mut self,
        x: &BatteryState,
        dir: Direction,
        i_ref: f64,
        model: &EcmModel,
        range: &mut Option<(f64, f64)>,
    ) -> Result<f64, SimError> {
        let mut sum = 0.0;
        for _ in 0..self.substeps {
            let d = Direction::update(dir, self.i_cmd, 0.0);
            let v = model.terminal_voltage(x, self.i_cmd, d);
            let (im, vm) = self.sensors.measure(self.i_cmd, v);
            self.i_cmd = self.ctl.step(i_ref, im, vm)?;
            let duty = self.ctl.pid().duty;
            let (lo, hi) = range.get_or_insert((duty, duty));
            *lo = lo.min(duty);
            *hi = hi.max(duty);
            sum += self.i_cmd;
        }
        Ok(sum / self.substeps as f64)
    }
}

/// Ideal constant-current/constant-voltage source used without a
/// controller: the phase current, cut back so the terminal voltage does not
/// exceed `float_v`.
fn open_loop_cccv(
    x: &BatteryState,
    dir: Direction,
    i_ref: f64,
    float_v: f64,
    model: &EcmModel,
) -> f64 {
    let d = Direction::update(dir, i_ref, 0.0);
    if model.terminal_voltage(x, i_ref, d) <= float_v {
        return i_ref;
    }
    let p = model.params(x.soc, Direction::Charging);
    let headroom = float_v - model.ocv.ocv(x.soc) - x.v1 - x.v2;
    (headroom / p.r0).clamp(0.0, i_ref)
}

fn steps_for(duration: f64, dt: f64) -> usize {
    ((duration / dt).round() as usize).max(1)
}

pub fn run_scenario(scenario: &Scenario, cfg: &RunConfig) -> Result<RunArtifacts, SimError> {
    scenario.validate()?;
    cfg.sensors.validate()?;
    if cfg.control_substeps == 0 {
        return Err(SimError::InvalidScenario(
            "control_substeps must be at least 1".into(),
        ));
    }
    let truth = EcmModel {
        capacity: scenario.capacity,
        efficiency: scenario.efficiency,
        ..cfg.truth.clone()
    };
    let dt = scenario.dt;
    let mut sensors = Sensors::new(&cfg.sensors, 0);
    let mut ctl = match &cfg.controller {
        Some(c) => Some(Loop {
            ctl: Controller::new(*c)?,
            sensors: Sensors::new(&cfg.sensors, 2),
            substeps: cfg.control_substeps,
            i_cmd: 0.0,
        }),
        None => None,
    };
    let base_float = cfg.controller.map(|c| c.float_voltage);
    let mut ekf = match &cfg.ekf {
        Some(e) => {
            let init = EstimatorState::new(e.initial_soc, Direction::Discharging, &e.config)?;
            Some(Ekf::new(e.model.clone(), init, e.config)?.with_dt(dt))
        }
        None => None,
    };

    let mut out = RunArtifacts::default();
    let mut x = BatteryState::relaxed(scenario.initial_soc);
    let mut dir = Direction::Discharging;
    let mut n: usize = 0;
    for phase in scenario.phases.iter().flat_map(Phase::expand) {
        let (i_ref, steps, cccv) = match phase {
            Phase::ConstantCurrent { i_ref, duration } => (i_ref, steps_for(duration, dt), None),
            Phase::Rest { duration } => (0.0, steps_for(duration, dt), None),
            Phase::CcCv {
                i_ref,
                float_v,
                max_duration,
            } => (i_ref, steps_for(max_duration, dt), Some(float_v)),
            Phase::HppcBlock { .. } => unreachable!("expanded"),
        };
        if let Some(l) = ctl.as_mut() {
            l.ctl.config.float_voltage = cccv.or(base_float).unwrap_or(l.ctl.config.float_voltage);
        }
        for _ in 0..steps {
            let t = n as f64 * dt;
            let i = match (ctl.as_mut(), cccv) {
                (Some(l), _) => l.interval(&x, dir, i_ref, &truth, &mut out.duty_range)?,
                (None, Some(fv)) => open_loop_cccv(&x, dir, i_ref, fv, &truth),
                (None, None) => i_ref,
            };
            let step = plant_step(&x, dir, i, t, dt, &truth, &mut sensors)?;
            out.truth.push(TruthRow {
                t,
                i,
                v: step.truth.v,
                soc: x.soc.value(),
                v1: x.v1,
                v2: x.v2,
            });
            out.measured.push(step.measured);
            if let Some(l) = ctl.as_ref() {
                out.controller.push(ControlRow {
                    t,
                    mode: l.ctl.mode(),
                    i_ref,
                    i_meas: step.measured.i,
                    duty: l.ctl.pid().duty,
                    v: step.measured.v,
                });
            }
            if let Some(f) = ekf.as_mut() {
                out.ekf.push(f.step(&step.measured)?);
            }
            x = step.next;
            dir = step.direction;
            n += 1;
            if step.saturated && i < 0.0 && x.soc == Soc::EMPTY && cfg.halt_on_empty {
                return Err(SimError::SocExhausted { t: t + dt });
            }
            if cccv.is_some() && x.soc == Soc::FULL {
                break;
            }
        }
    }
    out.final_state = Some(x);
    Ok(out)
}
