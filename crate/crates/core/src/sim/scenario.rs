use serde::{Deserialize, Serialize};

use super::SimError;
use crate::ecm::{ah_to_coulombs, CoulombicEfficiency, Soc};

/// One scripted segment of a run. Currents are positive when charging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Phase {
    #[serde(rename = "cc")]
    ConstantCurrent {
        i_ref: f64,
        duration: f64,
    },
    Rest {
        duration: f64,
    },
    /// Discharge pulse, rest, charge pulse, rest, all at `pulse_amps`.
    #[serde(rename = "hppc")]
    HppcBlock {
        pulse_amps: f64,
        pulse_s: f64,
        rest_s: f64,
    },
    /// Constant current until the float voltage, then constant voltage until
    /// full or `max_duration`.
    #[serde(rename = "cccv")]
    CcCv {
        i_ref: f64,
        float_v: f64,
        max_duration: f64,
    },
}

impl Phase {
    pub fn validate(&self) -> Result<(), SimError> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(SimError::InvalidScenario(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        match *self {
            Phase::ConstantCurrent { i_ref, duration } => {
                if !i_ref.is_finite() {
                    return Err(SimError::InvalidScenario(format!(
                        "i_ref {i_ref} is not finite"
                    )));
                }
                pos("duration", duration)
            }
            Phase::Rest { duration } => pos("duration", duration),
            Phase::HppcBlock {
                pulse_amps,
                pulse_s,
                rest_s,
            } => {
                pos("pulse_amps", pulse_amps)?;
                pos("pulse_s", pulse_s)?;
                pos("rest_s", rest_s)
            }
            Phase::CcCv {
                i_ref,
                float_v,
                max_duration,
            } => {
                pos("cccv i_ref", i_ref)?;
                pos("float_v", float_v)?;
                pos("max_duration", max_duration)
            }
        }
    }

    /// The phase as the simple segments it runs as.
    pub fn expand(&self) -> Vec<Phase> {
        match *self {
            Phase::HppcBlock {
                pulse_amps,
                pulse_s,
                rest_s,
            } => vec![
                Phase::ConstantCurrent {
                    i_ref: -pulse_amps,
                    duration: pulse_s,
                },
                Phase::Rest { duration: rest_s },
                Phase::ConstantCurrent {
                    i_ref: pulse_amps,
                    duration: pulse_s,
                },
                Phase::Rest { duration: rest_s },
            ],
            p => vec![p],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub phases: Vec<Phase>,
    pub dt: f64,
    pub initial_soc: Soc,
    pub efficiency: CoulombicEfficiency,
    /// Capacity in coulombs.
    pub capacity: f64,
}

impl Scenario {
    pub fn new(dt: f64, initial_soc: Soc, capacity: f64) -> Self {
        Scenario {
            phases: Vec::new(),
            dt,
            initial_soc,
            efficiency: CoulombicEfficiency::default(),
            capacity,
        }
    }

    pub fn with(mut self, phase: Phase) -> Self {
        self.phases.push(phase);
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(SimError::InvalidScenario(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.capacity.is_finite() && self.capacity > 0.0) {
            return Err(SimError::InvalidScenario(format!(
                "capacity must be positive, got {}",
                self.capacity
            )));
        }
        self.phases.iter().try_for_each(Phase::validate)
    }

    /// Total scripted duration; CC-CV phases count at their maximum.
    pub fn duration(&self) -> f64 {
        self.phases
            .iter()
            .flat_map(Phase::expand)
            .map(|p| match p {
                Phase::ConstantCurrent { duration, .. } | Phase::Rest { duration } => duration,
                Phase::CcCv { max_duration, .. } => max_duration,
                Phase::HppcBlock { .. } => unreachable!("expanded"),
            })
            .sum()
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        let initial_soc =
            Soc::new(file.initial_soc).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        let efficiency = CoulombicEfficiency::new(file.eta_charge, file.eta_discharge)
            .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        let s = Scenario {
            phases: file.phase,
            dt: file.dt,
            initial_soc,
            efficiency,
            capacity: ah_to_coulombs(file.capacity_ah),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        let file = ScenarioFile {
            dt: self.dt,
            initial_soc: self.initial_soc.value(),
            capacity_ah: self.capacity / 3600.0,
            eta_charge: self.efficiency.charge,
            eta_discharge: self.efficiency.discharge,
            phase: self.phases.clone(),
        };
        toml::to_string(&file).expect("scenario serializes")
    }
}

fn one() -> f64 {
    1.0
}

fn hundred() -> f64 {
    100.0
}

/// On-disk scenario schema. Units: seconds, amperes, volts, ampere-hours.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default = "one")]
    dt: f64,
    initial_soc: f64,
    #[serde(default = "hundred")]
    capacity_ah: f64,
    #[serde(default = "one")]
    eta_charge: f64,
    #[serde(default = "one")]
    eta_discharge: f64,
    #[serde(default)]
    phase: Vec<Phase>,
}

/// Pulse-test settings for [`generate_hppc_scenario`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HppcPlan {
    pub pulse_amps: f64,
    pub pulse_s: f64,
    pub rest_s: f64,
    /// Magnitude of the current that moves SoC between breakpoints.
    pub transfer_amps: f64,
    pub dt: f64,
    /// Capacity in coulombs.
    pub capacity: f64,
    pub efficiency: CoulombicEfficiency,
}

impl Default for HppcPlan {
    fn default() -> Self {
        HppcPlan {
            pulse_amps: 10.0,
            pulse_s: 10.0,
            rest_s: 3600.0,
            transfer_amps: 10.0,
            dt: 1.0,
            capacity: ah_to_coulombs(100.0),
            efficiency: CoulombicEfficiency::default(),
        }
    }
}

/// Pulse blocks at each grid SoC, joined by transfers that move the
/// coulomb-counted SoC to the next grid point and rest.
pub fn generate_hppc_scenario(grid: &[Soc], plan: &HppcPlan) -> Result<Scenario, SimError> {
    let block = Phase::HppcBlock {
        pulse_amps: plan.pulse_amps,
        pulse_s: plan.pulse_s,
        rest_s: plan.rest_s,
    };
    block.validate()?;
    let transfer_ok = plan.transfer_amps.is_finite() && plan.transfer_amps > 0.0;
    let mut sc = Scenario {
        efficiency: plan.efficiency,
        ..Scenario::new(
            plan.dt,
            grid.first().copied().unwrap_or(Soc::FULL),
            plan.capacity,
        )
    };
    sc.validate()?;
    let pulse_soc = plan.pulse_amps * plan.pulse_s / plan.capacity;
    for (k, s) in grid.iter().enumerate() {
        let s = s.value();
        // The discharge pulse comes first and must not run the cell empty.
        if s - pulse_soc * plan.efficiency.discharge < 0.0 {
            return Err(SimError::InvalidScenario(format!(
                "grid point {s} leaves no room for a {} A, {} s discharge pulse",
                plan.pulse_amps, plan.pulse_s
            )));
        }
        let after_pulses = (s - pulse_soc * plan.efficiency.discharge
            + pulse_soc * plan.efficiency.charge)
            .min(1.0);
        sc.phases.push(block);
        let Some(next) = grid.get(k + 1) else {
            continue;
        };
        let delta = next.value() - after_pulses;
        if delta == 0.0 {
            continue;
        }
        if !transfer_ok {
            return Err(SimError::InvalidScenario(format!(
                "transfer current must be positive, got {}",
                plan.transfer_amps
            )));
        }
        let (i, eta) = if delta > 0.0 {
            (plan.transfer_amps, plan.efficiency.charge)
        } else {
            (-plan.transfer_amps, plan.efficiency.discharge)
        };
        let duration = delta.abs() * plan.capacity / (eta * plan.transfer_amps);
        sc.phases
            .push(Phase::ConstantCurrent { i_ref: i, duration });
        sc.phases.push(Phase::Rest {
            duration: plan.rest_s,
        });
    }
    Ok(sc)
}
