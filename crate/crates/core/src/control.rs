//! Duty-cycle PID, averaged converter relations and CC/CV mode logic.
//!
//! The charger is a boost stage whose battery current is `i_source / d1`;
//! the discharger gives `i_load / (1 - d2)`. Both move the signed battery
//! current down as duty rises, so the current loop feeds the PID with
//! `i_meas - i_ref`.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("duty {duty} outside [{min}, {max}]")]
    DutyOutOfRange { duty: f64, min: f64, max: f64 },
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl PidGains {
    pub const CHARGING: PidGains = PidGains {
        kp: 0.18,
        ki: 0.0008,
        kd: 0.006,
    };
    pub const DISCHARGING: PidGains = PidGains {
        kp: 1.0,
        ki: 0.01,
        kd: 0.005,
    };

    pub fn validate(&self) -> Result<(), ControlError> {
        for (name, v) in [("kp", self.kp), ("ki", self.ki), ("kd", self.kd)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ControlError::InvalidConfig(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Allowed duty range, strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DutyBand {
    pub min: f64,
    pub max: f64,
}

impl Default for DutyBand {
    fn default() -> Self {
        DutyBand { min: 0.1, max: 0.9 }
    }
}

impl DutyBand {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.min > 0.0 && self.min < self.max && self.max < 1.0) {
            return Err(ControlError::InvalidConfig(format!(
                "duty band [{}, {}] must satisfy 0 < min < max < 1",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidState {
    pub duty: f64,
    pub error_sum: f64,
    pub prev_error: f64,
}

impl PidState {
    pub fn at(duty: f64) -> Self {
        PidState {
            duty,
            error_sum: 0.0,
            prev_error: 0.0,
        }
    }
}

/// One step of the incremental duty law
/// `d += kp*e + ki*sum(e) + kd*(e - e_prev)` with `e = reference - measured`.
///
/// When the new duty would leave the band it is clamped and the error sum is
/// left where it was.
pub fn pid_step(
    state: PidState,
    reference: f64,
    measured: f64,
    gains: &PidGains,
    band: &DutyBand,
) -> PidState {
    let e = reference - measured;
    let sum = state.error_sum + e;
    let raw = state.duty + gains.kp * e + gains.ki * sum + gains.kd * (e - state.prev_error);
    if raw > band.max || raw < band.min {
        PidState {
            duty: raw.clamp(band.min, band.max),
            error_sum: state.error_sum,
            prev_error: e,
        }
    } else {
        PidState {
            duty: raw,
            error_sum: sum,
            prev_error: e,
        }
    }
}

/// Boost charger: battery current from the source current and duty `d1`.
pub fn charging_battery_current(
    i_source: f64,
    d1: f64,
    band: &DutyBand,
) -> Result<f64, ControlError> {
    if !(d1 >= band.min && d1 <= 1.0) {
        return Err(ControlError::DutyOutOfRange {
            duty: d1,
            min: band.min,
            max: 1.0,
        });
    }
    Ok(i_source / d1)
}

/// Discharger: battery current magnitude from the load current and duty `d2`.
pub fn discharging_battery_current(
    i_load: f64,
    d2: f64,
    band: &DutyBand,
) -> Result<f64, ControlError> {
    if !(d2 >= 0.0 && d2 <= band.max) {
        return Err(ControlError::DutyOutOfRange {
            duty: d2,
            min: 0.0,
            max: band.max,
        });
    }
    Ok(i_load / (1.0 - d2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlMode {
    Charging,
    Discharging,
    FloatCV,
    Idle,
}

impl ControlMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlMode::Charging => "charging",
            ControlMode::Discharging => "discharging",
            ControlMode::FloatCV => "float_cv",
            ControlMode::Idle => "idle",
        }
    }

    fn from_reference(i_ref: f64) -> ControlMode {
        if i_ref > 0.0 {
            ControlMode::Charging
        } else if i_ref < 0.0 {
            ControlMode::Discharging
        } else {
            ControlMode::Idle
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub band: DutyBand,
    pub charging: PidGains,
    pub discharging: PidGains,
    /// Voltage loop used in float mode, duty per volt.
    pub cv: PidGains,
    pub float_voltage: f64,
    /// Multiplies the current error before it reaches the PID.
    pub error_scale: f64,
    /// Fixed source current of the charger; `None` sizes it to half the
    /// reference so the nominal duty is 0.5.
    pub i_source: Option<f64>,
    /// Fixed load current of the discharger, sized the same way when `None`.
    pub i_load: Option<f64>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            band: DutyBand::default(),
            charging: PidGains::CHARGING,
            discharging: PidGains::DISCHARGING,
            cv: PidGains {
                kp: 0.05,
                ki: 0.0005,
                kd: 0.0,
            },
            float_voltage: 13.8,
            error_scale: 0.01,
            i_source: None,
            i_load: None,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        self.band.validate()?;
        self.charging.validate()?;
        self.discharging.validate()?;
        self.cv.validate()?;
        let bad = |m: String| Err(ControlError::InvalidConfig(m));
        if !(self.float_voltage.is_finite() && self.float_voltage > 0.0) {
            return bad(format!(
                "float voltage must be positive, got {}",
                self.float_voltage
            ));
        }
        if !(self.error_scale.is_finite() && self.error_scale > 0.0) {
            return bad(format!(
                "error scale must be positive, got {}",
                self.error_scale
            ));
        }
        for (name, v) in [("source", self.i_source), ("load", self.i_load)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return bad(format!("{name} current must be positive, got {v}"));
                }
            }
        }
        Ok(())
    }

    /// Duty a mode starts from after a relay switch: the end of the band
    /// that gives the smallest battery current.
    pub fn initial_duty(&self, mode: ControlMode) -> f64 {
        match mode {
            ControlMode::Charging | ControlMode::FloatCV => self.band.max,
            ControlMode::Discharging | ControlMode::Idle => self.band.min,
        }
    }

    fn source_current(&self, i_ref: f64) -> f64 {
        self.i_source.unwrap_or(0.5 * i_ref.abs())
    }

    fn load_current(&self, i_ref: f64) -> f64 {
        self.i_load.unwrap_or(0.5 * i_ref.abs())
    }
}

/// Advances the mode machine and PID by one control period.
///
/// Returns the new mode, the new PID state and the commanded battery
/// current (positive when charging).
pub fn controller_step(
    mode: ControlMode,
    pid: PidState,
    i_ref: f64,
    i_meas: f64,
    v_meas: f64,
    config: &ControllerConfig,
) -> Result<(ControlMode, PidState, f64), ControlError> {
    let wanted = ControlMode::from_reference(i_ref);
    let same = match (mode, wanted) {
        (ControlMode::FloatCV, ControlMode::Charging) => true,
        (a, b) => a == b,
    };
    let (mut mode, mut pid) = if same {
        (mode, pid)
    } else {
        (wanted, PidState::at(config.initial_duty(wanted)))
    };
    if mode == ControlMode::Charging && v_meas >= config.float_voltage {
        mode = ControlMode::FloatCV;
        pid.error_sum = 0.0;
        pid.prev_error = 0.0;
    }
    let band = &config.band;
    let k = config.error_scale;
    match mode {
        ControlMode::Idle => Ok((mode, PidState::at(config.initial_duty(mode)), 0.0)),
        ControlMode::Charging => {
            pid = pid_step(pid, k * i_meas, k * i_ref, &config.charging, band);
            let i = charging_battery_current(config.source_current(i_ref), pid.duty, band)?;
            Ok((mode, pid, i))
        }
        ControlMode::FloatCV => {
            // Overvoltage raises d1, which lowers the charge current.
            pid = pid_step(pid, v_meas, config.float_voltage, &config.cv, band);
            let i = charging_battery_current(config.source_current(i_ref), pid.duty, band)?;
            Ok((mode, pid, i))
        }
        ControlMode::Discharging => {
            pid = pid_step(pid, k * i_meas, k * i_ref, &config.discharging, band);
            let i = discharging_battery_current(config.load_current(i_ref), pid.duty, band)?;
            Ok((mode, pid, -i))
        }
    }
}

/// Stateful wrapper around [`controller_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controller {
    pub config: ControllerConfig,
    mode: ControlMode,
    pid: PidState,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self, ControlError> {
        config.validate()?;
        Ok(Controller {
            config,
            mode: ControlMode::Idle,
            pid: PidState::at(config.initial_duty(ControlMode::Idle)),
        })
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    pub fn pid(&self) -> PidState {
        self.pid
    }

    pub fn step(&mut self, i_ref: f64, i_meas: f64, v_meas: f64) -> Result<f64, ControlError> {
        let (mode, pid, i) =
            controller_step(self.mode, self.pid, i_ref, i_meas, v_meas, &self.config)?;
        self.mode = mode;
        self.pid = pid;
        Ok(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BAND: DutyBand = DutyBand { min: 0.1, max: 0.9 };

    #[test]
    fn zero_error_keeps_duty() {
        let mut s = PidState::at(0.42);
        for _ in 0..100 {
            s = pid_step(s, 5.0, 5.0, &PidGains::DISCHARGING, &BAND);
        }
        assert_eq!(s, PidState::at(0.42));
    }

    #[test]
    fn first_step_hand_value() {
        let s = pid_step(PidState::at(0.5), 1.0, 0.0, &PidGains::CHARGING, &BAND);
        assert!((s.duty - 0.6868).abs() < 1e-12, "{}", s.duty);
        assert_eq!(s.error_sum, 1.0);
        assert_eq!(s.prev_error, 1.0);
    }

    #[test]
    fn upper_clamp_freezes_integral() {
        let s0 = PidState {
            duty: 0.9,
            error_sum: 3.0,
            prev_error: 0.5,
        };
        let s = pid_step(s0, 1.0, 0.0, &PidGains::CHARGING, &BAND);
        assert_eq!(s.duty, 0.9);
        assert_eq!(s.error_sum, 3.0);
    }

    #[test]
    fn steady_state_is_fixed_point() {
        let s0 = PidState {
            duty: 0.37,
            error_sum: 0.0,
            prev_error: 0.0,
        };
        assert_eq!(pid_step(s0, 2.0, 2.0, &PidGains::CHARGING, &BAND), s0);
    }

    #[test]
    fn converter_relations() {
        assert_eq!(charging_battery_current(5.0, 0.5, &BAND).unwrap(), 10.0);
        assert_eq!(charging_battery_current(5.0, 1.0, &BAND).unwrap(), 5.0);
        assert!(matches!(
            charging_battery_current(5.0, 0.05, &BAND),
            Err(ControlError::DutyOutOfRange { .. })
        ));
        assert_eq!(discharging_battery_current(5.0, 0.5, &BAND).unwrap(), 10.0);
        assert_eq!(discharging_battery_current(5.0, 0.0, &BAND).unwrap(), 5.0);
        assert!(matches!(
            discharging_battery_current(5.0, 0.95, &BAND),
            Err(ControlError::DutyOutOfRange { .. })
        ));
    }

    #[test]
    fn converter_monotone_over_band() {
        let mut prev_c = f64::INFINITY;
        let mut prev_d = 0.0;
        for k in 0..=800 {
            let d = 0.1 + k as f64 * 0.001;
            let c = charging_battery_current(5.0, d, &BAND).unwrap();
            let dd = discharging_battery_current(5.0, d, &BAND).unwrap();
            assert!(c < prev_c);
            assert!(dd > prev_d);
            prev_c = c;
            prev_d = dd;
        }
    }

    #[test]
    fn idle_on_zero_reference() {
        let cfg = ControllerConfig::default();
        let (m, _, i) = controller_step(
            ControlMode::Charging,
            PidState::at(0.3),
            0.0,
            1.0,
            12.5,
            &cfg,
        )
        .unwrap();
        assert_eq!(m, ControlMode::Idle);
        assert_eq!(i, 0.0);
    }

    #[test]
    fn float_voltage_cutover() {
        let cfg = ControllerConfig::default();
        let (m, _, _) = controller_step(
            ControlMode::Charging,
            PidState::at(0.5),
            10.0,
            10.0,
            13.9,
            &cfg,
        )
        .unwrap();
        assert_eq!(m, ControlMode::FloatCV);
        let (m, _, _) = controller_step(
            ControlMode::Charging,
            PidState::at(0.5),
            10.0,
            10.0,
            13.7,
            &cfg,
        )
        .unwrap();
        assert_eq!(m, ControlMode::Charging);
    }

    #[test]
    fn relay_switch_resets_pid() {
        let cfg = ControllerConfig::default();
        let s = PidState {
            duty: 0.6,
            error_sum: 4.0,
            prev_error: 1.0,
        };
        // Zero error after the switch so the reset state is observable.
        let (m, pid, _) =
            controller_step(ControlMode::Charging, s, -10.0, -10.0, 12.5, &cfg).unwrap();
        assert_eq!(m, ControlMode::Discharging);
        assert_eq!(pid.duty, cfg.initial_duty(ControlMode::Discharging));
        assert_eq!(pid.error_sum, 0.0);
    }

    /// Ideal converter: the measured current is last period's command.
    fn settle_step(i_ref: f64, steps: usize) -> (Option<usize>, f64, f64) {
        let mut ctl = Controller::new(ControllerConfig::default()).unwrap();
        let mut i = 0.0;
        let mut last_out = None;
        let (mut dmin, mut dmax) = (1.0f64, 0.0f64);
        for n in 0..steps {
            i = ctl.step(i_ref, i, 12.5).unwrap();
            dmin = dmin.min(ctl.pid().duty);
            dmax = dmax.max(ctl.pid().duty);
            if (i - i_ref).abs() > 0.02 * i_ref.abs() {
                last_out = Some(n);
            }
        }
        (
            last_out.map_or(Some(0), |n| (n + 1 < steps).then_some(n + 1)),
            dmin,
            dmax,
        )
    }

    #[test]
    fn current_loop_settles_both_directions() {
        for i_ref in [2.0, 5.0, 10.0, 20.0, -2.0, -5.0, -10.0, -20.0] {
            let (settle, dmin, dmax) = settle_step(i_ref, 30_000);
            let settle = settle.unwrap_or_else(|| panic!("{i_ref} A never settled"));
            assert!(settle < 2000, "{i_ref} A settled at {settle}");
            assert!(dmin >= 0.1 && dmax <= 0.9);
        }
    }

    proptest! {
        #[test]
        fn duty_never_leaves_band(
            refs in prop::collection::vec(-25.0f64..25.0, 1..50),
            meas in prop::collection::vec(-40.0f64..40.0, 200),
            volts in prop::collection::vec(11.0f64..15.0, 200),
        ) {
            let mut ctl = Controller::new(ControllerConfig::default()).unwrap();
            for (n, (&m, &v)) in meas.iter().zip(&volts).enumerate() {
                ctl.step(refs[n % refs.len()], m, v).unwrap();
                let d = ctl.pid().duty;
                prop_assert!((0.1..=0.9).contains(&d));
            }
        }
    }
}
