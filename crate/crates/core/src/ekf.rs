//! Extended Kalman filter over the discrete circuit model.
//!
//! The state is `[s, v1, v2]`. Each sample runs a time update with the
//! current of the previous interval followed by a measurement update with the
//! sample's current and voltage. The model matrices are rebuilt at every step
//! from the parameter table at the current SoC estimate.

use nalgebra::{Matrix3, RowVector3, Vector3};
use thiserror::Error;

use crate::ecm::{Direction, EcmError, EcmModel, Soc};
use crate::trace::Sample;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EkfError {
    #[error("sample {index}: interval {dt} s deviates from {expected} s by more than {tolerance}")]
    NonuniformSampling {
        index: usize,
        dt: f64,
        expected: f64,
        tolerance: f64,
    },
    #[error("innovation variance {0} is not positive")]
    DegenerateInnovationVariance(f64),
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] EcmError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfConfig {
    /// Process-noise covariance, diagonal.
    pub j: Matrix3<f64>,
    /// Measurement-noise variance, V^2.
    pub r: f64,
    pub p0: Matrix3<f64>,
    /// Use the Joseph form for the covariance update.
    pub joseph: bool,
    /// Current magnitude below which the table direction is held.
    pub deadband: f64,
    /// Allowed relative deviation of each sampling interval.
    pub dt_tolerance: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        EkfConfig {
            j: Matrix3::from_diagonal(&Vector3::new(1e-7, 1e-5, 1e-5)),
            r: 1e-2,
            p0: Matrix3::from_diagonal(&Vector3::new(1e-2, 1e-4, 1e-4)),
            joseph: false,
            deadband: 0.2,
            dt_tolerance: 0.01,
        }
    }
}

impl EkfConfig {
    /// Diagonal process noise and initial covariance, other settings default.
    pub fn diagonal(j: [f64; 3], r: f64, p0: [f64; 3]) -> Self {
        EkfConfig {
            j: Matrix3::from_diagonal(&Vector3::from(j)),
            r,
            p0: Matrix3::from_diagonal(&Vector3::from(p0)),
            ..EkfConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), EkfError> {
        let bad = |m: String| Err(EkfError::InvalidConfig(m));
        if !(self.r.is_finite() && self.r > 0.0) {
            return bad(format!("r must be positive, got {}", self.r));
        }
        for r in 0..3 {
            for c in 0..3 {
                let v = self.j[(r, c)];
                if r == c && !(v.is_finite() && v >= 0.0) {
                    return bad(format!("j[{r}][{r}] must be nonnegative, got {v}"));
                }
                if r != c && v != 0.0 {
                    return bad("j must be diagonal".into());
                }
                if self.p0[(r, c)] != self.p0[(c, r)] || !self.p0[(r, c)].is_finite() {
                    return bad("p0 must be finite and symmetric".into());
                }
            }
            if self.p0[(r, r)] < 0.0 {
                return bad("p0 diagonal must be nonnegative".into());
            }
        }
        if !(self.deadband >= 0.0) {
            return bad(format!(
                "deadband must be nonnegative, got {}",
                self.deadband
            ));
        }
        if !(self.dt_tolerance >= 0.0) {
            return bad(format!(
                "dt tolerance must be nonnegative, got {}",
                self.dt_tolerance
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorState {
    pub x: Vector3<f64>,
    pub p: Matrix3<f64>,
    pub j: Matrix3<f64>,
    pub r: f64,
    pub direction: Direction,
}

impl EstimatorState {
    /// Relaxed branches at `soc`, covariances from `cfg`.
    pub fn new(soc: Soc, direction: Direction, cfg: &EkfConfig) -> Result<Self, EkfError> {
        cfg.validate()?;
        Ok(EstimatorState {
            x: Vector3::new(soc.value(), 0.0, 0.0),
            p: cfg.p0,
            j: cfg.j,
            r: cfg.r,
            direction,
        })
    }

    pub fn soc(&self) -> Soc {
        Soc::clamped(self.x[0]).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfStepRecord {
    pub x_prior: Vector3<f64>,
    pub y_pred: f64,
    pub innovation: f64,
    pub gain: Vector3<f64>,
    pub x_post: Vector3<f64>,
    pub p_post: Matrix3<f64>,
    /// The corrected SoC left `[0, 1]` and was clamped.
    pub soc_clamped: bool,
}

fn symmetrize(p: &Matrix3<f64>) -> Matrix3<f64> {
    (p + p.transpose()) * 0.5
}

/// Time update over one interval of length `dt` carrying current `i`.
pub fn predict(
    est: &EstimatorState,
    i: f64,
    model: &EcmModel,
    dt: f64,
) -> Result<EstimatorState, EkfError> {
    let m = model.discrete(est.soc(), est.direction, i, dt)?;
    Ok(EstimatorState {
        x: m.a * est.x + m.b * i,
        p: symmetrize(&(m.a * est.p * m.a.transpose() + est.j)),
        ..*est
    })
}

/// Measurement update with a gain computed from an explicit output row.
///
/// `y_pred` is the predicted terminal voltage; `c` is its gradient with
/// respect to the state.
pub fn correct_with(
    prior: &EstimatorState,
    c: RowVector3<f64>,
    y_pred: f64,
    v_meas: f64,
    joseph: bool,
) -> Result<(EstimatorState, EkfStepRecord), EkfError> {
    let pct = prior.p * c.transpose();
    let s = (c * pct)[0] + prior.r;
    if !(s > 0.0 && s.is_finite()) {
        return Err(EkfError::DegenerateInnovationVariance(s));
    }
    let k = pct / s;
    let innovation = v_meas - y_pred;
    let mut x = prior.x + k * innovation;
    let (soc, soc_clamped) = Soc::clamped(x[0]);
    x[0] = soc.value();
    let ikc = Matrix3::identity() - k * c;
    let p = if joseph {
        ikc * prior.p * ikc.transpose() + k * prior.r * k.transpose()
    } else {
        ikc * prior.p
    };
    let p = symmetrize(&p);
    let post = EstimatorState { x, p, ..*prior };
    let rec = EkfStepRecord {
        x_prior: prior.x,
        y_pred,
        innovation,
        gain: k,
        x_post: x,
        p_post: p,
        soc_clamped,
    };
    Ok((post, rec))
}

/// Measurement update against the terminal voltage `v_meas` at current `i`.
///
/// The prediction is the full nonlinear output `ocv(s) + v1 + v2 + r0*i`;
/// the row `[dOCV/ds, 1, 1]` is used for the gain and covariance.
pub fn correct(
    prior: &EstimatorState,
    i: f64,
    v_meas: f64,
    model: &EcmModel,
    joseph: bool,
) -> Result<(EstimatorState, EkfStepRecord), EkfError> {
    let s = prior.soc();
    let r0 = model.params(s, prior.direction).r0;
    let y_pred = model.ocv.ocv(s) + prior.x[1] + prior.x[2] + r0 * i;
    let c = RowVector3::new(model.ocv.docv_ds(s), 1.0, 1.0);
    correct_with(prior, c, y_pred, v_meas, joseph)
}

/// Online filter fed one sample at a time.
#[derive(Debug, Clone)]
pub struct Ekf {
    pub model: EcmModel,
    pub config: EkfConfig,
    pub state: EstimatorState,
    last: Option<Sample>,
    expected_dt: Option<f64>,
    index: usize,
}

impl Ekf {
    pub fn new(model: EcmModel, init: EstimatorState, config: EkfConfig) -> Result<Self, EkfError> {
        config.validate()?;
        Ok(Ekf {
            model,
            config,
            state: init,
            last: None,
            expected_dt: None,
            index: 0,
        })
    }

    /// Fixes the expected sampling interval instead of taking it from the
    /// first two samples.
    pub fn with_dt(mut self, dt: f64) -> Self {
        self.expected_dt = Some(dt);
        self
    }

    pub fn step(&mut self, smp: &Sample) -> Result<EkfStepRecord, EkfError> {
        let mut prior = self.state;
        if let Some(prev) = self.last {
            let dt = smp.t - prev.t;
            let expected = *self.expected_dt.get_or_insert(dt);
            let tol = self.config.dt_tolerance;
            if !(dt > 0.0 && (dt - expected).abs() <= tol * expected) {
                return Err(EkfError::NonuniformSampling {
                    index: self.index,
                    dt,
                    expected,
                    tolerance: tol,
                });
            }
            prior = predict(&prior, prev.i, &self.model, dt)?;
        }
        prior.direction = Direction::update(prior.direction, smp.i, self.config.deadband);
        let (post, rec) = correct(&prior, smp.i, smp.v, &self.model, self.config.joseph)?;
        self.state = post;
        self.last = Some(*smp);
        self.index += 1;
        Ok(rec)
    }
}

/// Runs the filter over a uniformly sampled trace, one record per sample.
pub fn ekf_run(
    samples: &[Sample],
    init: EstimatorState,
    model: &EcmModel,
    config: &EkfConfig,
) -> Result<Vec<EkfStepRecord>, EkfError> {
    let mut ekf = Ekf::new(model.clone(), init, *config)?;
    samples.iter().map(|s| ekf.step(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecm::{step_state, BatteryState, ParamTable};
    use proptest::prelude::*;

    fn soc(v: f64) -> Soc {
        Soc::new(v).unwrap()
    }

    fn state(x: [f64; 3], p: Matrix3<f64>, j: Matrix3<f64>, r: f64) -> EstimatorState {
        EstimatorState {
            x: Vector3::from(x),
            p,
            j,
            r,
            direction: Direction::Discharging,
        }
    }

    /// Truth trace from the plant, current profile `amps` at 1 s steps.
    fn plant_trace(model: &EcmModel, s0: f64, amps: &[f64]) -> (Vec<Sample>, Vec<f64>) {
        let mut x = BatteryState::relaxed(soc(s0));
        let mut dir = Direction::Discharging;
        let mut samples = Vec::new();
        let mut truth = Vec::new();
        for (n, &i) in amps.iter().enumerate() {
            dir = Direction::update(dir, i, 0.0);
            samples.push(Sample::new(n as f64, i, model.terminal_voltage(&x, i, dir)));
            truth.push(x.soc.value());
            let m = model.discrete(x.soc, dir, i, 1.0).unwrap();
            x = step_state(&x, i, &m).state;
        }
        (samples, truth)
    }

    #[test]
    fn predict_zero_input_no_noise() {
        let model = EcmModel::reference();
        let p = Matrix3::new(2e-2, 1e-3, 0.0, 1e-3, 3e-4, 1e-5, 0.0, 1e-5, 5e-4);
        let est = state([0.6, 0.0, 0.0], p, Matrix3::zeros(), 1e-2);
        let prior = predict(&est, 0.0, &model, 1.0).unwrap();
        assert_eq!(prior.x, est.x);
        let m = model
            .discrete(soc(0.6), Direction::Discharging, 0.0, 1.0)
            .unwrap();
        let expect = m.a * p * m.a.transpose();
        assert!((prior.p - expect).abs().max() < 1e-18);
    }

    #[test]
    fn predict_coulomb_term() {
        let model = EcmModel::reference();
        let mut est = state([0.5, 0.0, 0.0], Matrix3::identity(), Matrix3::zeros(), 1e-2);
        est.direction = Direction::Charging;
        let prior = predict(&est, 10.0, &model, 3600.0).unwrap();
        assert!((prior.x[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn predict_diagonal_propagation() {
        let model = EcmModel::reference();
        let est = state([0.3, 0.0, 0.0], Matrix3::identity(), Matrix3::zeros(), 1e-2);
        let prior = predict(&est, 0.0, &model, 1.0).unwrap();
        let p = model.params(soc(0.3), Direction::Discharging);
        let a = (-1.0 / p.tau1()).exp();
        let b = (-1.0 / p.tau2()).exp();
        let expect = Matrix3::from_diagonal(&Vector3::new(1.0, a * a, b * b));
        assert!((prior.p - expect).abs().max() < 1e-15);
    }

    #[test]
    fn zero_innovation_keeps_state() {
        let model = EcmModel::reference();
        let cfg = EkfConfig::default();
        let prior = state([0.42, 0.01, -0.02], cfg.p0, cfg.j, cfg.r);
        let s = soc(0.42);
        let r0 = model.params(s, Direction::Discharging).r0;
        let v = model.ocv.ocv(s) + 0.01 - 0.02 + r0 * -5.0;
        let (post, rec) = correct(&prior, -5.0, v, &model, false).unwrap();
        assert_eq!(rec.innovation, 0.0);
        assert_eq!(post.x, prior.x);
    }

    #[test]
    fn huge_r_trusts_prior() {
        let model = EcmModel::reference();
        let cfg = EkfConfig::default();
        let prior = state([0.42, 0.01, -0.02], cfg.p0, cfg.j, 1e12);
        let (post, rec) = correct(&prior, -5.0, 14.0, &model, false).unwrap();
        assert!(rec.gain.abs().max() < 1e-9);
        assert!((post.x - prior.x).abs().max() < 1e-9);
        assert!((post.p - prior.p).abs().max() < 1e-9);
    }

    #[test]
    fn gain_matches_hand_arithmetic() {
        let p = [[1e-2, 0.0, 0.0], [0.0, 1e-4, 0.0], [0.0, 0.0, 1e-4]];
        let c = [0.928, 1.0, 1.0];
        let r = 1e-2;
        // Oracle: plain loops, no linear algebra library.
        let mut pc = [0.0; 3];
        for row in 0..3 {
            for col in 0..3 {
                pc[row] += p[row][col] * c[col];
            }
        }
        let mut s = r;
        for row in 0..3 {
            s += c[row] * pc[row];
        }
        let k_hand: Vec<f64> = pc.iter().map(|v| v / s).collect();
        // 0.928^2*1e-2 + 2e-4 + 1e-2
        assert!((s - 0.01881184).abs() < 1e-15);

        let pm = Matrix3::from_fn(|r, c| p[r][c]);
        let prior = state([0.0, 0.0, 0.0], pm, Matrix3::zeros(), r);
        let y_pred = 12.33;
        let (post, rec) =
            correct_with(&prior, RowVector3::from(c), y_pred, y_pred + 0.1, false).unwrap();
        for k in 0..3 {
            assert!((rec.gain[k] - k_hand[k]).abs() < 1e-15);
        }
        assert!((post.x[0] - k_hand[0] * 0.1).abs() < 1e-15);
        assert!((post.x[1] - k_hand[1] * 0.1).abs() < 1e-15);
        assert!((post.x[2] - k_hand[2] * 0.1).abs() < 1e-15);
    }

    #[test]
    fn soc_is_clamped_and_flagged() {
        let model = EcmModel::reference();
        let cfg = EkfConfig::default();
        let prior = state([0.999, 0.0, 0.0], cfg.p0, cfg.j, cfg.r);
        let (post, rec) = correct(&prior, 0.0, 14.5, &model, false).unwrap();
        assert!(rec.soc_clamped);
        assert_eq!(post.x[0], 1.0);
    }

    #[test]
    fn empty_trace_gives_no_records() {
        let model = EcmModel::reference();
        let cfg = EkfConfig::default();
        let init = EstimatorState::new(soc(0.5), Direction::Discharging, &cfg).unwrap();
        assert!(ekf_run(&[], init, &model, &cfg).unwrap().is_empty());
    }

    #[test]
    fn nonuniform_sampling_rejected() {
        let model = EcmModel::reference();
        let cfg = EkfConfig::default();
        let init = EstimatorState::new(soc(0.5), Direction::Discharging, &cfg).unwrap();
        let samples = [
            Sample::new(0.0, 0.0, 12.5),
            Sample::new(1.0, 0.0, 12.5),
            Sample::new(2.005, 0.0, 12.5),
            Sample::new(3.1, 0.0, 12.5),
        ];
        let err = ekf_run(&samples, init, &model, &cfg).unwrap_err();
        assert!(
            matches!(err, EkfError::NonuniformSampling { index: 3, .. }),
            "{err:?}"
        );
    }

    #[test]
    fn exact_model_exact_init_tracks_truth() {
        let model = EcmModel::reference();
        let amps: Vec<f64> = (0..1000)
            .map(|n| match n % 200 {
                0..=119 => -10.0,
                _ => 0.0,
            })
            .collect();
        let (samples, truth) = plant_trace(&model, 0.8, &amps);
        let cfg = EkfConfig::default();
        let init = EstimatorState::new(soc(0.8), Direction::Discharging, &cfg).unwrap();
        let recs = ekf_run(&samples, init, &model, &cfg).unwrap();
        let worst = recs
            .iter()
            .zip(&truth)
            .map(|(r, s)| (r.x_post[0] - s).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn converges_from_wrong_init() {
        let model = EcmModel::reference();
        let amps = vec![-10.0; 1200];
        let (samples, truth) = plant_trace(&model, 0.5, &amps);
        let cfg = EkfConfig::default();
        let init = EstimatorState::new(soc(0.7), Direction::Discharging, &cfg).unwrap();
        let recs = ekf_run(&samples, init, &model, &cfg).unwrap();
        let first_in = recs
            .iter()
            .zip(&truth)
            .position(|(r, s)| (r.x_post[0] - s).abs() < 0.02)
            .unwrap();
        assert!(first_in < 600, "entered band at step {first_in}");
        for (r, s) in recs.iter().zip(&truth).skip(600) {
            assert!((r.x_post[0] - s).abs() < 0.02);
        }
    }

    #[test]
    fn noiseless_discharge_tracks_for_any_init() {
        let model = EcmModel::reference();
        let amps = vec![-10.0; 7200];
        let (samples, truth) = plant_trace(&model, 0.7, &amps);
        let cfg = EkfConfig::default();
        for k in 0..=7 {
            let s0 = 0.2 + 0.1 * k as f64;
            let init = EstimatorState::new(soc(s0), Direction::Discharging, &cfg).unwrap();
            let recs = ekf_run(&samples, init, &model, &cfg).unwrap();
            // Starting high in the flat part of the OCV curve is the slowest
            // case, about 2700 s to reach the band.
            for (r, s) in recs.iter().zip(&truth).skip(3600) {
                assert!(
                    (r.x_post[0] - s).abs() < 0.01,
                    "init {s0}: {} vs {s}",
                    r.x_post[0]
                );
            }
        }
    }

    #[test]
    fn trace_of_p_non_increasing_without_process_noise() {
        let model = EcmModel::single_table(ParamTable::reference_charging());
        let cfg = EkfConfig {
            j: Matrix3::zeros(),
            ..EkfConfig::default()
        };
        let s = soc(0.6);
        let v = model.ocv.ocv(s);
        let samples: Vec<Sample> = (0..500).map(|n| Sample::new(n as f64, 0.0, v)).collect();
        let init = EstimatorState::new(s, Direction::Charging, &cfg).unwrap();
        let recs = ekf_run(&samples, init, &model, &cfg).unwrap();
        let mut last = cfg.p0.trace();
        for r in &recs {
            let tr = r.p_post.trace();
            assert!(tr <= last + 1e-18, "{tr} > {last}");
            last = tr;
        }
    }

    #[test]
    fn joseph_form_agrees_with_short_form() {
        let model = EcmModel::reference();
        let cfg = EkfConfig::default();
        let prior = state([0.5, 0.0, 0.0], cfg.p0, cfg.j, cfg.r);
        let (a, _) = correct(&prior, -10.0, 12.2, &model, false).unwrap();
        let (b, _) = correct(&prior, -10.0, 12.2, &model, true).unwrap();
        assert_eq!(a.x, b.x);
        assert!((a.p - b.p).abs().max() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EkfConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.r = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = EkfConfig::default();
        cfg.j[(0, 1)] = 1e-9;
        assert!(cfg.validate().is_err());
    }

    fn spd(d: [f64; 3], off: [f64; 3]) -> Matrix3<f64> {
        let l = Matrix3::new(d[0], 0.0, 0.0, off[0], d[1], 0.0, off[1], off[2], d[2]);
        l * l.transpose()
    }

    proptest! {
        #[test]
        fn larger_r_shrinks_every_gain_component(
            d in prop::array::uniform3(1e-3f64..0.2),
            off in prop::array::uniform3(-0.05f64..0.05),
            slope in 0.08f64..3.6,
            r in 1e-4f64..1.0,
            factor in 1.01f64..100.0,
        ) {
            let p = spd(d, off);
            let c = RowVector3::new(slope, 1.0, 1.0);
            let lo = state([0.5, 0.0, 0.0], p, Matrix3::zeros(), r);
            let hi = EstimatorState { r: r * factor, ..lo };
            let (_, a) = correct_with(&lo, c, 12.0, 12.1, false).unwrap();
            let (_, b) = correct_with(&hi, c, 12.0, 12.1, false).unwrap();
            for k in 0..3 {
                if a.gain[k] != 0.0 {
                    prop_assert!(b.gain[k].abs() < a.gain[k].abs());
                }
            }
        }

        #[test]
        fn covariance_stays_symmetric_psd(
            amps in prop::collection::vec(-20.0f64..20.0, 50..200),
            noise in prop::collection::vec(-0.05f64..0.05, 200),
        ) {
            let model = EcmModel::reference();
            let (mut samples, _) = plant_trace(&model, 0.6, &amps);
            for (s, n) in samples.iter_mut().zip(&noise) {
                s.v += n;
            }
            let cfg = EkfConfig::default();
            let init = EstimatorState::new(soc(0.5), Direction::Discharging, &cfg).unwrap();
            for r in ekf_run(&samples, init, &model, &cfg).unwrap() {
                prop_assert!((r.p_post - r.p_post.transpose()).abs().max() < 1e-12);
                let ev = r.p_post.symmetric_eigenvalues();
                prop_assert!(ev.min() >= -1e-10);
            }
        }
    }
}
