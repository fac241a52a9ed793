use nalgebra::{Matrix3, RowVector3, Vector3};

use super::{Direction, EcmError, EcmParams, OcvCurve, ParamTable, Soc};

pub fn ah_to_coulombs(ah: f64) -> f64 {
    ah * 3600.0
}

/// Sign applied to the RC branch input terms of the discrete model.
///
/// `Additive` makes the branch voltages grow with the same sign as the
/// current, consistent with the terminal-voltage equation. `Subtractive`
/// flips both branch input terms and exists only to compare against the
/// alternate sign convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BranchSign {
    #[default]
    Additive,
    Subtractive,
}

impl BranchSign {
    fn factor(self) -> f64 {
        match self {
            BranchSign::Additive => 1.0,
            BranchSign::Subtractive => -1.0,
        }
    }
}

/// Coulombic efficiency, chosen by the sign of the current.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoulombicEfficiency {
    pub charge: f64,
    pub discharge: f64,
}

impl CoulombicEfficiency {
    pub fn new(charge: f64, discharge: f64) -> Result<Self, EcmError> {
        for eta in [charge, discharge] {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(EcmError::Efficiency(eta));
            }
        }
        Ok(CoulombicEfficiency { charge, discharge })
    }

    pub fn for_current(&self, i: f64) -> f64 {
        if i > 0.0 {
            self.charge
        } else {
            self.discharge
        }
    }
}

impl Default for CoulombicEfficiency {
    fn default() -> Self {
        CoulombicEfficiency {
            charge: 1.0,
            discharge: 1.0,
        }
    }
}

/// Zero-order-hold discretization of the circuit over one sampling interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteModel {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    pub d: f64,
    pub dt: f64,
    pub eta: f64,
    pub q: f64,
}

impl DiscreteModel {
    /// Measurement row `[dOCV/ds, 1, 1]` linearized at `s`.
    pub fn output_row(&self, s: Soc, ocv: &OcvCurve) -> RowVector3<f64> {
        RowVector3::new(ocv.docv_ds(s), 1.0, 1.0)
    }
}

fn positive(name: &'static str, value: f64) -> Result<(), EcmError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(EcmError::NonPositive { name, value })
    }
}

pub fn discretize(
    params: &EcmParams,
    dt: f64,
    eta: f64,
    q: f64,
    sign: BranchSign,
) -> Result<DiscreteModel, EcmError> {
    positive("dt", dt)?;
    positive("q", q)?;
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(EcmError::Efficiency(eta));
    }
    params.validate()?;
    let a1 = (-dt / params.tau1()).exp();
    let a2 = (-dt / params.tau2()).exp();
    let k = sign.factor();
    Ok(DiscreteModel {
        a: Matrix3::from_diagonal(&Vector3::new(1.0, a1, a2)),
        b: Vector3::new(
            eta * dt / q,
            k * params.r1 * (1.0 - a1),
            k * params.r2 * (1.0 - a2),
        ),
        d: params.r0,
        dt,
        eta,
        q,
    })
}

/// True plant state: SoC and the two RC branch voltages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryState {
    pub soc: Soc,
    pub v1: f64,
    pub v2: f64,
}

impl BatteryState {
    pub fn relaxed(soc: Soc) -> Self {
        BatteryState {
            soc,
            v1: 0.0,
            v2: 0.0,
        }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.soc.value(), self.v1, self.v2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: BatteryState,
    /// SoC hit a bound and was clamped.
    pub saturated: bool,
}

/// Advances the state by one interval with constant current `i`.
pub fn step_state(x: &BatteryState, i: f64, m: &DiscreteModel) -> StepOutcome {
    let next = m.a * x.to_vector() + m.b * i;
    let (soc, saturated) = Soc::clamped(next[0]);
    StepOutcome {
        state: BatteryState {
            soc,
            v1: next[1],
            v2: next[2],
        },
        saturated,
    }
}

pub fn terminal_voltage(x: &BatteryState, i: f64, params: &EcmParams, ocv: &OcvCurve) -> f64 {
    ocv.ocv(x.soc) + x.v1 + x.v2 + i * params.r0
}

/// Coulomb-counting update. Returns the clamped SoC and a saturation flag.
pub fn coulomb_step(s: Soc, i: f64, eta: f64, q: f64, dt: f64) -> (Soc, bool) {
    Soc::clamped(s.value() + i * eta * dt / q)
}

/// Everything needed to evaluate the circuit at any SoC and direction.
#[derive(Debug, Clone, PartialEq)]
pub struct EcmModel {
    pub charging: ParamTable,
    pub discharging: ParamTable,
    pub ocv: OcvCurve,
    /// Total capacity in coulombs.
    pub capacity: f64,
    pub efficiency: CoulombicEfficiency,
    pub branch_sign: BranchSign,
}

impl EcmModel {
    /// The 100 Ah reference battery with its bundled tables and OCV curve.
    pub fn reference() -> Self {
        EcmModel {
            charging: ParamTable::reference_charging(),
            discharging: ParamTable::reference_discharging(),
            ocv: OcvCurve::reference(),
            capacity: ah_to_coulombs(100.0),
            efficiency: CoulombicEfficiency::default(),
            branch_sign: BranchSign::Additive,
        }
    }

    /// A model that uses one table for both directions.
    pub fn single_table(table: ParamTable) -> Self {
        EcmModel {
            charging: table.clone(),
            discharging: table,
            ..EcmModel::reference()
        }
    }

    pub fn table(&self, dir: Direction) -> &ParamTable {
        match dir {
            Direction::Charging => &self.charging,
            Direction::Discharging => &self.discharging,
        }
    }

    pub fn params(&self, s: Soc, dir: Direction) -> EcmParams {
        self.table(dir).lookup(s)
    }

    /// Discrete model at `s` for an interval carrying current `i`.
    pub fn discrete(
        &self,
        s: Soc,
        dir: Direction,
        i: f64,
        dt: f64,
    ) -> Result<DiscreteModel, EcmError> {
        discretize(
            &self.params(s, dir),
            dt,
            self.efficiency.for_current(i),
            self.capacity,
            self.branch_sign,
        )
    }

    pub fn terminal_voltage(&self, x: &BatteryState, i: f64, dir: Direction) -> f64 {
        terminal_voltage(x, i, &self.params(x.soc, dir), &self.ocv)
    }
}
