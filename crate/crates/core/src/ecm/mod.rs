//! Second-order RC equivalent circuit of a lead-acid battery.
//!
//! The circuit is an SoC-dependent open-circuit voltage source in series with
//! an ohmic resistance `r0` and two parallel RC branches. Current is positive
//! when charging; the ohmic drop `i * r0` and both branch voltages add to the
//! open-circuit voltage, so a discharge pulls the terminal voltage down.

mod model;
mod ocv;
mod table;

pub use model::{
    ah_to_coulombs, coulomb_step, discretize, step_state, terminal_voltage, BatteryState,
    BranchSign, CoulombicEfficiency, DiscreteModel, EcmModel, StepOutcome,
};
pub use ocv::OcvCurve;
pub use table::{write_table_rows, Breakpoint, ParamTable, TableRow};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EcmError {
    #[error("state of charge {0} is outside [0, 1]")]
    SocOutOfRange(f64),
    #[error("{name} must be finite and strictly positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("coulombic efficiency must lie in (0, 1], got {0}")]
    Efficiency(f64),
    #[error("invalid parameter table: {0}")]
    Table(String),
    #[error("parameter table line {line}: {msg}")]
    TableParse { line: u64, msg: String },
}

/// What to do with a state of charge that falls outside `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SocPolicy {
    Reject,
    #[default]
    Clamp,
}

/// State of charge as a fraction of total capacity, always within `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Soc(f64);

impl Soc {
    pub const EMPTY: Soc = Soc(0.0);
    pub const FULL: Soc = Soc(1.0);

    pub fn new(value: f64) -> Result<Self, EcmError> {
        if (0.0..=1.0).contains(&value) {
            Ok(Soc(value))
        } else {
            Err(EcmError::SocOutOfRange(value))
        }
    }

    /// Clamps into `[0, 1]`. The flag is set when clamping changed the value.
    /// NaN maps to zero and is reported as saturated.
    pub fn clamped(value: f64) -> (Self, bool) {
        if value.is_nan() {
            return (Soc::EMPTY, true);
        }
        let c = value.clamp(0.0, 1.0);
        (Soc(c), c != value)
    }

    pub fn with_policy(value: f64, policy: SocPolicy) -> Result<(Self, bool), EcmError> {
        match policy {
            SocPolicy::Reject => Soc::new(value).map(|s| (s, false)),
            SocPolicy::Clamp => Ok(Soc::clamped(value)),
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Current direction selecting the charging or discharging parameter table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Charging,
    Discharging,
}

impl Direction {
    /// Hysteresis rule: a current within `deadband` of zero keeps the previous
    /// direction, otherwise the sign of the current decides.
    pub fn update(previous: Direction, current: f64, deadband: f64) -> Direction {
        if current > deadband {
            Direction::Charging
        } else if current < -deadband {
            Direction::Discharging
        } else {
            previous
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Charging => "charging",
            Direction::Discharging => "discharging",
        }
    }
}

/// Circuit parameters at one SoC breakpoint, in SI units (ohm, farad).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcmParams {
    pub r0: f64,
    pub r1: f64,
    pub c1: f64,
    pub r2: f64,
    pub c2: f64,
}

impl EcmParams {
    pub fn new(r0: f64, r1: f64, c1: f64, r2: f64, c2: f64) -> Result<Self, EcmError> {
        let p = EcmParams { r0, r1, c1, r2, c2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), EcmError> {
        let fields = [
            ("r0", self.r0),
            ("r1", self.r1),
            ("c1", self.c1),
            ("r2", self.r2),
            ("c2", self.c2),
            ("tau1", self.tau1()),
            ("tau2", self.tau2()),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(EcmError::NonPositive { name, value });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn tau1(&self) -> f64 {
        self.r1 * self.c1
    }

    #[inline]
    pub fn tau2(&self) -> f64 {
        self.r2 * self.c2
    }

    /// Same circuit with the RC branches ordered so that `tau1 <= tau2`.
    pub fn canonical(&self) -> EcmParams {
        if self.tau1() <= self.tau2() {
            *self
        } else {
            EcmParams {
                r0: self.r0,
                r1: self.r2,
                c1: self.c2,
                r2: self.r1,
                c2: self.c1,
            }
        }
    }
}
