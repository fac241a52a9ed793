//! Command bodies. Each returns its artifacts in memory together with the
//! structured results they were rendered from.

use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};

use leadtwin::control::{ControlMode, ControllerConfig, DutyBand, PidGains};
use leadtwin::ecm::{
    ah_to_coulombs, coulomb_step, write_table_rows, Breakpoint, CoulombicEfficiency, EcmError,
    TableRow,
};
use leadtwin::ekf::{ekf_run, EkfConfig, EstimatorState};
use leadtwin::fit::{
    identify_hppc, BreakpointFit, FitError, HppcIdentification, HppcOptions, LmConfig,
};
use leadtwin::sim::{
    controller_trace_csv, ekf_trace_csv, generate_hppc_scenario, run_ekf_csv, run_scenario,
    truth_trace_csv, EkfSetup, HppcPlan, Phase, RunArtifacts, RunConfig, Scenario, SensorModel,
    TruthRow,
};
use leadtwin::trace::{fmt_f64, load_trace, trace_to_csv, Sample};
use leadtwin::{Direction, EcmModel, OcvCurve, ParamTable, Soc};

use crate::args::*;
use crate::error::io_err;
use crate::{Artifacts, CliError};

pub const OCV_HEADER: &str = "power,coefficient";

/// Float voltage used for plain constant-current runs, high enough that the
/// controller never leaves current regulation.
pub const FLOAT_DISABLED_V: f64 = 1e6;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn soc_arg(flag: &str, v: f64) -> Result<Soc, CliError> {
    Soc::new(v).map_err(|e| CliError::Usage(format!("--{flag}: {e}")))
}

fn positive(flag: &str, v: f64) -> Result<f64, CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(CliError::Usage(format!(
            "--{flag} must be positive, got {v}"
        )))
    }
}

fn capacity(b: &BatteryArgs) -> Result<f64, CliError> {
    positive("capacity", b.capacity).map(ah_to_coulombs)
}

fn efficiency(b: &BatteryArgs) -> Result<CoulombicEfficiency, CliError> {
    CoulombicEfficiency::new(b.eta_charge, b.eta_discharge).map_err(usage)
}

pub fn sensor_model(s: &SensorArgs) -> Result<SensorModel, CliError> {
    let m = if s.ideal_sensors {
        SensorModel {
            seed: s.seed,
            ..SensorModel::ideal()
        }
    } else {
        SensorModel {
            i_noise_sigma: s.i_noise,
            v_noise_sigma: s.v_noise,
            i_quant: s.i_quant,
            v_quant: s.v_quant,
            seed: s.seed,
        }
    };
    m.validate().map_err(usage)?;
    Ok(m)
}

/// Reads a parameter table file. Rows need not reach SoC 0 or 1; the end
/// rows are held constant out to the ends.
pub fn load_table(path: &Path, direction: Direction) -> Result<ParamTable, CliError> {
    let input = |source: EcmError| CliError::Input {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err(path))?;
    let rows = ParamTable::read_rows(file).map_err(input)?;
    let bps = rows
        .iter()
        .map(TableRow::to_breakpoint)
        .collect::<Result<Vec<_>, _>>()
        .map_err(input)?;
    ParamTable::padded(direction, bps).map_err(input)
}

fn table_or_reference(
    path: &Option<PathBuf>,
    direction: Direction,
) -> Result<ParamTable, CliError> {
    match path {
        Some(p) => load_table(p, direction),
        None => Ok(ParamTable::reference(direction)),
    }
}

pub fn ocv_csv(curve: &OcvCurve) -> String {
    let mut out = format!("{OCV_HEADER}\n");
    for (k, c) in curve.coeffs.iter().enumerate() {
        let _ = writeln!(out, "{},{}", 5 - k, fmt_f64(*c));
    }
    out
}

/// Reads a curve written by [`ocv_csv`]: one row per power, 5 down to 0.
pub fn load_ocv(path: &Path) -> Result<OcvCurve, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: u64, msg: String| CliError::Input {
        path: path.to_path_buf(),
        source: EcmError::TableParse { line, msg },
    };
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some(OCV_HEADER) {
        return Err(bad(1, format!("expected header `{OCV_HEADER}`")));
    }
    let mut coeffs = [0.0; 6];
    let mut n = 0;
    for (k, line) in lines.enumerate() {
        let lineno = k as u64 + 2;
        let (p, c) = line
            .split_once(',')
            .ok_or_else(|| bad(lineno, "expected two columns".into()))?;
        let p: usize = p
            .trim()
            .parse()
            .map_err(|_| bad(lineno, format!("bad power `{p}`")))?;
        let c: f64 = c
            .trim()
            .parse()
            .map_err(|_| bad(lineno, format!("bad coefficient `{c}`")))?;
        if k >= 6 || p != 5 - k || !c.is_finite() {
            return Err(bad(
                lineno,
                "powers must run 5 down to 0 with finite coefficients".into(),
            ));
        }
        coeffs[k] = c;
        n += 1;
    }
    if n != 6 {
        return Err(bad(
            n as u64 + 1,
            format!("expected 6 coefficients, got {n}"),
        ));
    }
    Ok(OcvCurve::new(coeffs))
}

pub fn truth_model(t: &TruthArgs, b: &BatteryArgs) -> Result<EcmModel, CliError> {
    Ok(EcmModel {
        charging: table_or_reference(&t.truth_charging, Direction::Charging)?,
        discharging: table_or_reference(&t.truth_discharging, Direction::Discharging)?,
        capacity: capacity(b)?,
        efficiency: efficiency(b)?,
        ..EcmModel::reference()
    })
}

pub fn filter_model(f: &FilterArgs, b: &BatteryArgs) -> Result<EcmModel, CliError> {
    Ok(EcmModel {
        charging: table_or_reference(&f.filter_charging, Direction::Charging)?,
        discharging: table_or_reference(&f.filter_discharging, Direction::Discharging)?,
        ocv: match &f.filter_ocv {
            Some(p) => load_ocv(p)?,
            None => OcvCurve::reference(),
        },
        capacity: capacity(b)?,
        efficiency: efficiency(b)?,
        ..EcmModel::reference()
    })
}

pub fn ekf_config(e: &EkfArgs) -> Result<EkfConfig, CliError> {
    let mut c = EkfConfig::diagonal([e.j_soc, e.j_v, e.j_v], e.r_var, [e.p0_soc, e.p0_v, e.p0_v]);
    c.joseph = e.joseph;
    c.deadband = e.deadband;
    c.validate().map_err(usage)?;
    Ok(c)
}

pub fn controller_config(g: &GainArgs) -> Result<ControllerConfig, CliError> {
    let c = ControllerConfig {
        band: DutyBand {
            min: g.duty_min,
            max: g.duty_max,
        },
        charging: PidGains {
            kp: g.kp_charge,
            ki: g.ki_charge,
            kd: g.kd_charge,
        },
        discharging: PidGains {
            kp: g.kp_discharge,
            ki: g.ki_discharge,
            kd: g.kd_discharge,
        },
        error_scale: g.error_scale,
        i_source: g.source_current,
        i_load: g.load_current,
        ..ControllerConfig::default()
    };
    c.validate().map_err(usage)?;
    Ok(c)
}

/// Repeated constant-current discharge and rest.
pub fn discharge_scenario(
    d: &DischargeArgs,
    dt: f64,
    b: &BatteryArgs,
) -> Result<Scenario, CliError> {
    if d.cycles == 0 {
        return Err(usage("--cycles must be at least 1"));
    }
    positive("discharge", d.discharge)?;
    let mut sc = Scenario {
        efficiency: efficiency(b)?,
        ..Scenario::new(
            positive("dt", dt)?,
            soc_arg("initial-soc", d.initial_soc)?,
            capacity(b)?,
        )
    };
    for _ in 0..d.cycles {
        sc.phases.push(Phase::ConstantCurrent {
            i_ref: -d.discharge,
            duration: d.discharge_len,
        });
        sc.phases.push(Phase::Rest {
            duration: d.rest_len,
        });
    }
    sc.validate().map_err(usage)?;
    Ok(sc)
}

/// SoC by integrating measured current from `s0`, one value per sample.
pub fn coulomb_count(samples: &[Sample], s0: Soc, q: f64, eff: CoulombicEfficiency) -> Vec<f64> {
    let mut s = s0;
    let mut out = Vec::with_capacity(samples.len());
    for (k, smp) in samples.iter().enumerate() {
        out.push(s.value());
        if let Some(next) = samples.get(k + 1) {
            s = coulomb_step(s, smp.i, eff.for_current(smp.i), q, next.t - smp.t).0;
        }
    }
    out
}

/// Error statistics of an estimate against a reference SoC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocErrorSummary {
    pub samples: usize,
    pub max_abs: f64,
    pub rms: f64,
    pub final_abs: f64,
    /// Largest error from t = 900 s on.
    pub max_abs_after_900s: f64,
    /// Time from which the error stays below 0.02 to the end.
    pub settled_2pct: Option<f64>,
    pub final_reference: f64,
    pub final_estimate: f64,
}

pub fn soc_errors(t: &[f64], reference: &[f64], estimate: &[f64]) -> SocErrorSummary {
    let err: Vec<f64> = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| (e - r).abs())
        .collect();
    let n = err.len();
    let max = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0_f64, f64::max);
    let settled_2pct = match err.iter().rposition(|&e| e >= 0.02) {
        None => t.first().copied(),
        Some(k) => t.get(k + 1).copied(),
    };
    SocErrorSummary {
        samples: n,
        max_abs: max(&mut err.iter().copied()),
        rms: if n == 0 {
            0.0
        } else {
            (err.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt()
        },
        final_abs: err.last().copied().unwrap_or(0.0),
        max_abs_after_900s: max(&mut t
            .iter()
            .zip(&err)
            .filter(|(t, _)| **t >= 900.0)
            .map(|(_, e)| *e)),
        settled_2pct,
        final_reference: reference.last().copied().unwrap_or(f64::NAN),
        final_estimate: estimate.last().copied().unwrap_or(f64::NAN),
    }
}

fn opt_secs(v: Option<f64>) -> String {
    v.map_or_else(|| "never".to_string(), |t| format!("{t}"))
}

fn write_soc_errors(out: &mut String, prefix: &str, s: &SocErrorSummary) {
    let _ = writeln!(out, "{prefix}max_soc_error = {:e}", s.max_abs);
    let _ = writeln!(out, "{prefix}rms_soc_error = {:e}", s.rms);
    let _ = writeln!(out, "{prefix}final_soc_error = {:e}", s.final_abs);
    let _ = writeln!(
        out,
        "{prefix}max_soc_error_after_900s = {:e}",
        s.max_abs_after_900s
    );
    let _ = writeln!(
        out,
        "{prefix}settled_within_0.02_s = {}",
        opt_secs(s.settled_2pct)
    );
}

pub fn ekf_summary_text(reference: &str, s: &SocErrorSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "samples = {}", s.samples);
    let _ = writeln!(out, "reference = {reference}");
    let _ = writeln!(out, "final_soc_reference = {}", s.final_reference);
    let _ = writeln!(out, "final_soc_estimate = {}", s.final_estimate);
    write_soc_errors(&mut out, "", s);
    out
}

// ---------------------------------------------------------------- sim-hppc

pub struct HppcOutcome {
    pub artifacts: Artifacts,
    pub scenario: Scenario,
    pub run: RunArtifacts,
    pub truth: EcmModel,
}

pub fn sim_hppc(a: &SimHppcArgs) -> Result<HppcOutcome, CliError> {
    simulate_hppc(
        &a.hppc,
        a.dt,
        &a.battery,
        &sensor_model(&a.sensors)?,
        &a.truth,
    )
}

fn hppc_scenario(h: &HppcArgs, dt: f64, truth: &EcmModel) -> Result<Scenario, CliError> {
    let grid = h
        .grid
        .iter()
        .map(|&g| soc_arg("grid", g))
        .collect::<Result<Vec<_>, _>>()?;
    if grid.is_empty() {
        return Err(usage("--grid needs at least one SoC"));
    }
    if !(h.pre_rest >= 0.0) {
        return Err(usage(format!(
            "--pre-rest must be >= 0, got {}",
            h.pre_rest
        )));
    }
    let plan = HppcPlan {
        pulse_amps: h.pulse,
        pulse_s: h.pulse_len,
        rest_s: h.rest,
        transfer_amps: h.transfer,
        dt: positive("dt", dt)?,
        capacity: truth.capacity,
        efficiency: truth.efficiency,
    };
    let mut sc = generate_hppc_scenario(&grid, &plan).map_err(usage)?;
    if h.pre_rest > 0.0 {
        sc.phases.insert(
            0,
            Phase::Rest {
                duration: h.pre_rest,
            },
        );
    }
    sc.validate().map_err(usage)?;
    Ok(sc)
}

fn simulate_hppc(
    h: &HppcArgs,
    dt: f64,
    b: &BatteryArgs,
    sensors: &SensorModel,
    t: &TruthArgs,
) -> Result<HppcOutcome, CliError> {
    let truth = truth_model(t, b)?;
    let scenario = hppc_scenario(h, dt, &truth)?;
    let run = run_scenario(
        &scenario,
        &RunConfig {
            truth: truth.clone(),
            sensors: *sensors,
            ..RunConfig::default()
        },
    )?;
    let mut artifacts = Artifacts::default();
    artifacts.add("hppc_trace.csv", trace_to_csv(&run.measured));
    artifacts.add("hppc_truth.csv", truth_trace_csv(&run.truth));
    artifacts.add("hppc_scenario.toml", scenario.to_toml());
    Ok(HppcOutcome {
        artifacts,
        scenario,
        run,
        truth,
    })
}

// -------------------------------------------------------------- fit-params

pub struct FitOutcome {
    pub artifacts: Artifacts,
    pub identification: HppcIdentification,
    /// Fitted breakpoints as tables, held constant beyond the fitted range.
    pub charging: ParamTable,
    pub discharging: ParamTable,
    pub charging_rows: Vec<Breakpoint>,
    pub discharging_rows: Vec<Breakpoint>,
    pub ocv: Option<OcvCurve>,
}

pub fn fit_params(a: &FitParamsArgs) -> Result<FitOutcome, CliError> {
    let opts = hppc_options(&a.fit, soc_arg("initial-soc", a.initial_soc)?, &a.battery)?;
    let samples = load_trace(&a.trace).map_err(|source| CliError::Trace {
        path: a.trace.clone(),
        source,
    })?;
    fit_samples(&samples, &opts)
}

pub fn hppc_options(
    f: &FitArgs,
    initial_soc: Soc,
    b: &BatteryArgs,
) -> Result<HppcOptions, CliError> {
    let lm = LmConfig {
        max_iters: f.max_iters,
        multistart_count: f.starts,
        ..LmConfig::default()
    };
    lm.validate().map_err(usage)?;
    Ok(HppcOptions {
        current_threshold: positive("threshold", f.threshold)?,
        initial_soc,
        capacity: capacity(b)?,
        efficiency: efficiency(b)?,
        max_pulse_s: positive("max-pulse", f.max_pulse)?,
        soc_step: positive("soc-step", f.soc_step)?,
        lm,
    })
}

/// One breakpoint per grid SoC; the lowest-residual fit wins a tie.
fn breakpoints(fits: &[BreakpointFit]) -> Vec<Breakpoint> {
    let mut sorted: Vec<&BreakpointFit> = fits.iter().collect();
    sorted.sort_by(|a, b| {
        a.soc_grid
            .total_cmp(&b.soc_grid)
            .then(a.relax.residual_rms.total_cmp(&b.relax.residual_rms))
    });
    sorted.dedup_by(|b, a| a.soc_grid == b.soc_grid);
    sorted
        .iter()
        .map(|f| Breakpoint {
            soc: f.soc_grid,
            params: f.params,
        })
        .collect()
}

fn rows_csv(rows: &[Breakpoint]) -> String {
    write_table_rows(
        &rows
            .iter()
            .map(TableRow::from_breakpoint)
            .collect::<Vec<_>>(),
    )
}

pub fn fit_samples(samples: &[Sample], opts: &HppcOptions) -> Result<FitOutcome, CliError> {
    let id = identify_hppc(samples, opts)?;
    let charging_rows = breakpoints(&id.charging);
    let discharging_rows = breakpoints(&id.discharging);
    for (dir, rows) in [
        (Direction::Charging, &charging_rows),
        (Direction::Discharging, &discharging_rows),
    ] {
        if rows.is_empty() {
            return Err(FitError::InvalidInput(format!(
                "no {} breakpoint could be identified",
                dir.as_str()
            ))
            .into());
        }
    }
    let charging = ParamTable::padded(Direction::Charging, charging_rows.clone())?;
    let discharging = ParamTable::padded(Direction::Discharging, discharging_rows.clone())?;
    let ocv = id.ocv_fit.map(|f| f.curve);

    let mut artifacts = Artifacts::default();
    artifacts.add("params_charging.csv", rows_csv(&charging_rows));
    artifacts.add("params_discharging.csv", rows_csv(&discharging_rows));
    if let Some(c) = &ocv {
        artifacts.add("ocv_fit.csv", ocv_csv(c));
    }
    artifacts.add("fit_report.txt", fit_report(&id));
    Ok(FitOutcome {
        artifacts,
        identification: id,
        charging,
        discharging,
        charging_rows,
        discharging_rows,
        ocv,
    })
}

fn fit_report(id: &HppcIdentification) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "breakpoints_charging = {}", id.charging.len());
    let _ = writeln!(out, "breakpoints_discharging = {}", id.discharging.len());
    let _ = writeln!(out, "failures = {}", id.failures.len());
    let _ = writeln!(out, "ocv_points = {}", id.ocv_points.len());
    match &id.ocv_fit {
        Some(f) => {
            let _ = writeln!(out, "ocv_fit_rms_v = {:e}", f.rms);
        }
        None => {
            let _ = writeln!(out, "ocv_fit_rms_v = none");
        }
    }
    out.push('\n');
    out.push_str(
        "direction soc soc_grid pulse_a r0_ohm r1_ohm c1_f r2_ohm c2_f tau1_s tau2_s rms_v iterations termination ill_conditioned\n",
    );
    for f in id.charging.iter().chain(&id.discharging) {
        let p = &f.params;
        let _ = writeln!(
            out,
            "{} {:.6} {} {} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e} {:.3e} {} {} {}",
            f.direction.as_str(),
            f.soc,
            f.soc_grid,
            f.pulse_current,
            p.r0,
            p.r1,
            p.c1,
            p.r2,
            p.c2,
            p.tau1(),
            p.tau2(),
            f.relax.residual_rms,
            f.relax.iterations,
            f.relax.termination.as_str(),
            f.relax.ill_conditioned
        );
    }
    for fail in &id.failures {
        let _ = writeln!(
            out,
            "failed {} {:.6} {}",
            fail.direction.as_str(),
            fail.soc,
            fail.error.to_string().replace('\n', " ")
        );
    }
    out
}

// ----------------------------------------------------------------- run-ekf

pub struct EkfOutcome {
    pub artifacts: Artifacts,
    pub summary: SocErrorSummary,
    pub t: Vec<f64>,
    pub reference: Vec<f64>,
    pub estimate: Vec<f64>,
}

fn ekf_outcome(
    label: &str,
    csv: String,
    t: Vec<f64>,
    reference: Vec<f64>,
    estimate: Vec<f64>,
) -> EkfOutcome {
    let summary = soc_errors(&t, &reference, &estimate);
    let mut artifacts = Artifacts::default();
    artifacts.add("ekf_trace.csv", csv);
    artifacts.add("ekf_summary.txt", ekf_summary_text(label, &summary));
    EkfOutcome {
        artifacts,
        summary,
        t,
        reference,
        estimate,
    }
}

pub fn run_ekf(a: &RunEkfArgs) -> Result<EkfOutcome, CliError> {
    let cfg = ekf_config(&a.ekf)?;
    let mut filter = filter_model(&a.filter, &a.battery)?;
    let true_init = soc_arg("initial-soc", a.discharge.initial_soc)?;
    let ekf_init = a
        .discharge
        .ekf_init
        .map(|s| soc_arg("ekf-init", s))
        .transpose()?;

    if let Some(path) = &a.trace {
        let samples = load_trace(path).map_err(|source| CliError::Trace {
            path: path.clone(),
            source,
        })?;
        if samples.is_empty() {
            return Err(usage(format!("{}: trace has no samples", path.display())));
        }
        let init =
            EstimatorState::new(ekf_init.unwrap_or(true_init), Direction::Discharging, &cfg)?;
        let records = ekf_run(&samples, init, &filter, &cfg)?;
        let reference = coulomb_count(&samples, true_init, filter.capacity, filter.efficiency);
        let t: Vec<f64> = samples.iter().map(|s| s.t).collect();
        let v: Vec<f64> = samples.iter().map(|s| s.v).collect();
        let csv = ekf_trace_csv(&t, &reference, &v, &records);
        let est = records.iter().map(|r| r.x_post[0]).collect();
        return Ok(ekf_outcome("coulomb_count", csv, t, reference, est));
    }

    let scenario = match &a.scenario {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            Scenario::from_toml(&text)?
        }
        None => discharge_scenario(&a.discharge, a.dt, &a.battery)?,
    };
    // The filter is given the same nominal capacity as the simulated battery.
    filter.capacity = scenario.capacity;
    filter.efficiency = scenario.efficiency;
    let truth = truth_model(&a.truth, &a.battery)?;
    let sensors = sensor_model(&a.sensors)?;
    let init = match (&a.scenario, ekf_init) {
        (_, Some(s)) => s,
        (Some(_), None) => scenario.initial_soc,
        (None, None) => true_init,
    };
    let run = run_scenario(
        &scenario,
        &RunConfig {
            truth,
            sensors,
            ekf: Some(EkfSetup {
                model: filter,
                config: cfg,
                initial_soc: init,
            }),
            ..RunConfig::default()
        },
    )?;
    let t = run.truth.iter().map(|r| r.t).collect();
    let reference = run.truth.iter().map(|r| r.soc).collect();
    let est = run.ekf.iter().map(|r| r.x_post[0]).collect();
    Ok(ekf_outcome("plant", run_ekf_csv(&run), t, reference, est))
}

// ------------------------------------------------------------------ run-cc

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcSummary {
    pub i_ref: f64,
    /// First entry of the plant current into ±2 % of `i_ref` that is never
    /// left again.
    pub settle_time: Option<f64>,
    pub duty_range: Option<(f64, f64)>,
    pub v_max: f64,
    pub final_mode: Option<ControlMode>,
    pub float_entry: Option<f64>,
    pub soc_initial: f64,
    pub soc_final: f64,
    /// Mean measured current over the last 300 s.
    pub mean_i_meas_tail: f64,
}

pub struct CcOutcome {
    pub artifacts: Artifacts,
    pub run: RunArtifacts,
    pub summary: CcSummary,
}

pub fn settle_time(rows: &[TruthRow], i_ref: f64, band: f64) -> Option<f64> {
    let tol = band * i_ref.abs();
    if tol == 0.0 {
        return None;
    }
    match rows.iter().rposition(|r| (r.i - i_ref).abs() > tol) {
        None => rows.first().map(|r| r.t),
        Some(k) => rows.get(k + 1).map(|r| r.t),
    }
}

pub fn run_cc(a: &RunCcArgs) -> Result<CcOutcome, CliError> {
    let mut ctl = controller_config(&a.gains)?;
    let duration = positive("duration", a.duration)?;
    if !a.i_ref.is_finite() {
        return Err(usage("--i-ref must be finite"));
    }
    let phase = match a.float_v {
        Some(float_v) => {
            if a.i_ref <= 0.0 {
                return Err(usage("a CC-CV run needs a positive (charging) --i-ref"));
            }
            Phase::CcCv {
                i_ref: a.i_ref,
                float_v: positive("float-v", float_v)?,
                max_duration: duration,
            }
        }
        None => {
            ctl.float_voltage = FLOAT_DISABLED_V;
            Phase::ConstantCurrent {
                i_ref: a.i_ref,
                duration,
            }
        }
    };
    if a.substeps == 0 {
        return Err(usage("--substeps must be at least 1"));
    }
    let scenario = Scenario {
        efficiency: efficiency(&a.battery)?,
        ..Scenario::new(
            positive("dt", a.dt)?,
            soc_arg("initial-soc", a.initial_soc)?,
            capacity(&a.battery)?,
        )
    }
    .with(phase);
    scenario.validate().map_err(usage)?;
    let truth = truth_model(&a.truth, &a.battery)?;
    let sensors = sensor_model(&a.sensors)?;
    let run = run_scenario(
        &scenario,
        &RunConfig {
            truth,
            sensors,
            controller: Some(ctl),
            control_substeps: a.substeps,
            ..RunConfig::default()
        },
    )?;

    let end = run.truth.last().map_or(0.0, |r| r.t);
    let tail: Vec<f64> = run
        .controller
        .iter()
        .filter(|r| r.t > end - 300.0)
        .map(|r| r.i_meas)
        .collect();
    let summary = CcSummary {
        i_ref: a.i_ref,
        settle_time: settle_time(&run.truth, a.i_ref, 0.02),
        duty_range: run.duty_range,
        v_max: run
            .truth
            .iter()
            .map(|r| r.v)
            .fold(f64::NEG_INFINITY, f64::max),
        final_mode: run.controller.last().map(|r| r.mode),
        float_entry: run
            .controller
            .iter()
            .find(|r| r.mode == ControlMode::FloatCV)
            .map(|r| r.t),
        soc_initial: scenario.initial_soc.value(),
        soc_final: run.final_state.map_or(f64::NAN, |x| x.soc.value()),
        mean_i_meas_tail: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
    };
    let mut artifacts = Artifacts::default();
    artifacts.add(
        "controller_trace.csv",
        controller_trace_csv(&run.controller),
    );
    artifacts.add("cc_truth.csv", truth_trace_csv(&run.truth));
    artifacts.add("cc_summary.txt", cc_summary_text(&summary));
    Ok(CcOutcome {
        artifacts,
        run,
        summary,
    })
}

fn cc_summary_text(s: &CcSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "i_ref_a = {}", s.i_ref);
    let _ = writeln!(out, "settle_time_s = {}", opt_secs(s.settle_time));
    match s.duty_range {
        Some((lo, hi)) => {
            let _ = writeln!(out, "duty_min = {lo}\nduty_max = {hi}");
        }
        None => {
            let _ = writeln!(out, "duty_min = none\nduty_max = none");
        }
    }
    let _ = writeln!(out, "v_max_v = {}", s.v_max);
    let _ = writeln!(out, "float_entry_s = {}", opt_secs(s.float_entry));
    let _ = writeln!(
        out,
        "final_mode = {}",
        s.final_mode.map_or("none", ControlMode::as_str)
    );
    let _ = writeln!(out, "soc_initial = {}", s.soc_initial);
    let _ = writeln!(out, "soc_final = {}", s.soc_final);
    let _ = writeln!(out, "mean_i_meas_last_300s_a = {}", s.mean_i_meas_tail);
    out
}

// ---------------------------------------------------------------- pipeline

pub struct PipelineOutcome {
    pub artifacts: Artifacts,
    pub hppc: HppcOutcome,
    pub fit: FitOutcome,
    pub discharge: RunArtifacts,
    /// Estimate against the plant SoC.
    pub vs_plant: SocErrorSummary,
    /// Estimate against coulomb counting of the measured current.
    pub vs_coulomb: SocErrorSummary,
}

pub fn pipeline(a: &PipelineArgs) -> Result<PipelineOutcome, CliError> {
    // Every setting is checked before the first simulation.
    let cfg = ekf_config(&a.ekf)?;
    let sensors = sensor_model(&a.sensors)?;
    let first = *a
        .hppc
        .grid
        .first()
        .ok_or_else(|| usage("--grid needs at least one SoC"))?;
    let opts = hppc_options(&a.fit, soc_arg("grid", first)?, &a.battery)?;
    let scenario = discharge_scenario(&a.discharge, a.dt, &a.battery)?;
    let ekf_init = match a.discharge.ekf_init {
        Some(s) => soc_arg("ekf-init", s)?,
        None => scenario.initial_soc,
    };

    let hppc = simulate_hppc(&a.hppc, a.dt, &a.battery, &sensors, &a.truth)?;
    let fit = fit_samples(&hppc.run.measured, &opts)?;
    let filter = EcmModel {
        charging: fit.charging.clone(),
        discharging: fit.discharging.clone(),
        ocv: fit.ocv.unwrap_or_else(OcvCurve::reference),
        capacity: scenario.capacity,
        efficiency: scenario.efficiency,
        ..EcmModel::reference()
    };
    // A fresh noise realization for the tracking run.
    let run_sensors = SensorModel {
        seed: sensors.seed.wrapping_add(1),
        ..sensors
    };
    let run = run_scenario(
        &scenario,
        &RunConfig {
            truth: hppc.truth.clone(),
            sensors: run_sensors,
            ekf: Some(EkfSetup {
                model: filter,
                config: cfg,
                initial_soc: ekf_init,
            }),
            ..RunConfig::default()
        },
    )?;

    let t: Vec<f64> = run.truth.iter().map(|r| r.t).collect();
    let plant: Vec<f64> = run.truth.iter().map(|r| r.soc).collect();
    let est: Vec<f64> = run.ekf.iter().map(|r| r.x_post[0]).collect();
    let counted = coulomb_count(
        &run.measured,
        scenario.initial_soc,
        scenario.capacity,
        scenario.efficiency,
    );
    let vs_plant = soc_errors(&t, &plant, &est);
    let vs_coulomb = soc_errors(&t, &counted, &est);

    let mut artifacts = Artifacts::default();
    artifacts.extend(hppc.artifacts.clone());
    artifacts.extend(fit.artifacts.clone());
    artifacts.add("discharge_trace.csv", trace_to_csv(&run.measured));
    artifacts.add("discharge_truth.csv", truth_trace_csv(&run.truth));
    artifacts.add("ekf_trace.csv", run_ekf_csv(&run));
    artifacts.add("ekf_summary.txt", ekf_summary_text("plant", &vs_plant));
    artifacts.add(
        "pipeline_report.txt",
        pipeline_report(&hppc.truth, &fit, &vs_plant, &vs_coulomb),
    );
    Ok(PipelineOutcome {
        artifacts,
        hppc,
        fit,
        discharge: run,
        vs_plant,
        vs_coulomb,
    })
}

fn rel(fitted: f64, truth: f64) -> f64 {
    (fitted - truth) / truth
}

fn pipeline_report(
    truth: &EcmModel,
    fit: &FitOutcome,
    vs_plant: &SocErrorSummary,
    vs_coulomb: &SocErrorSummary,
) -> String {
    let mut out = String::new();
    out.push_str(
        "# fitted against truth parameters (relative error, branches ordered by time constant)\n",
    );
    out.push_str(
        "direction soc r0_fit r0_rel r1_fit r1_rel c1_fit c1_rel r2_fit r2_rel c2_fit c2_rel\n",
    );
    for (dir, rows) in [
        (Direction::Charging, &fit.charging_rows),
        (Direction::Discharging, &fit.discharging_rows),
    ] {
        let mut worst = [0.0_f64; 5];
        for bp in rows.iter() {
            let f = bp.params;
            let tr = truth.table(dir).lookup(Soc::clamped(bp.soc).0).canonical();
            let pairs = [
                (f.r0, tr.r0),
                (f.r1, tr.r1),
                (f.c1, tr.c1),
                (f.r2, tr.r2),
                (f.c2, tr.c2),
            ];
            let _ = write!(out, "{} {}", dir.as_str(), bp.soc);
            for (k, (a, b)) in pairs.iter().enumerate() {
                let e = rel(*a, *b);
                worst[k] = worst[k].max(e.abs());
                let _ = write!(out, " {a:.6e} {e:+.4e}");
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "max_abs_rel_{} r0={:.4e} r1={:.4e} c1={:.4e} r2={:.4e} c2={:.4e}",
            dir.as_str(),
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            worst[4]
        );
    }
    let failed = fit.identification.failures.len();
    let _ = writeln!(out, "failed_breakpoints = {failed}");

    out.push_str("\n# open-circuit voltage\n");
    match &fit.ocv {
        Some(c) => {
            let dev = (0..=100)
                .map(|k| {
                    let s = k as f64 / 100.0;
                    (c.eval(s) - truth.ocv.eval(s)).abs()
                })
                .fold(0.0, f64::max);
            let _ = writeln!(out, "ocv_source = fitted");
            let _ = writeln!(out, "ocv_max_abs_deviation_v = {dev:e}");
        }
        None => {
            let _ = writeln!(out, "ocv_source = reference (too few breakpoints to fit)");
        }
    }

    out.push_str("\n# estimator with the fitted model\n");
    let _ = writeln!(out, "samples = {}", vs_plant.samples);
    let _ = writeln!(out, "final_soc_plant = {}", vs_plant.final_reference);
    let _ = writeln!(
        out,
        "final_soc_coulomb_count = {}",
        vs_coulomb.final_reference
    );
    let _ = writeln!(out, "final_soc_estimate = {}", vs_plant.final_estimate);
    write_soc_errors(&mut out, "vs_coulomb_count.", vs_coulomb);
    write_soc_errors(&mut out, "vs_plant.", vs_plant);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ocv_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ocv.csv");
        let c = OcvCurve::new([1.0 / 3.0, -2.5, 0.1, 7.0, -1e-9, 12.0]);
        std::fs::write(&p, ocv_csv(&c)).unwrap();
        assert_eq!(load_ocv(&p).unwrap(), c);
    }

    #[test]
    fn ocv_file_rejects_wrong_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ocv.csv");
        std::fs::write(&p, "power,coefficient\n0,1\n1,2\n2,3\n3,4\n4,5\n5,6\n").unwrap();
        assert_eq!(load_ocv(&p).unwrap_err().code(), "E_INPUT");
    }

    #[test]
    fn coulomb_count_integrates_current() {
        let samples: Vec<Sample> = (0..3601)
            .map(|k| Sample::new(k as f64, -10.0, 12.0))
            .collect();
        let s = coulomb_count(
            &samples,
            Soc::new(0.9).unwrap(),
            360_000.0,
            CoulombicEfficiency::default(),
        );
        assert!((s[3600] - 0.8).abs() < 1e-12);
        assert_eq!(s[0], 0.9);
    }

    #[test]
    fn settle_time_is_last_exit() {
        let row = |t: f64, i: f64| TruthRow {
            t,
            i,
            v: 0.0,
            soc: 0.5,
            v1: 0.0,
            v2: 0.0,
        };
        let rows = [
            row(0.0, 0.0),
            row(1.0, 9.9),
            row(2.0, 9.0),
            row(3.0, 10.1),
            row(4.0, 10.0),
        ];
        assert_eq!(settle_time(&rows, 10.0, 0.02), Some(3.0));
        assert_eq!(settle_time(&rows[..3], 10.0, 0.02), None);
    }

    #[test]
    fn soc_error_settling() {
        let t = [0.0, 1.0, 2.0, 3.0];
        let r = [0.5; 4];
        let e = [0.7, 0.51, 0.6, 0.5];
        let s = soc_errors(&t, &r, &e);
        assert_eq!(s.settled_2pct, Some(3.0));
        assert!((s.max_abs - 0.2).abs() < 1e-15);
        assert_eq!(s.final_abs, 0.0);
    }
}
