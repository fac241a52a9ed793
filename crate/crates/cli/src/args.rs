//! Command-line surface. Numeric flags take SI-suffixed values.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::units::{amp_hours, amps, seconds, volts};

#[derive(Debug, Clone, Parser)]
#[command(name = "leadtwin", version, about = "Lead-acid battery digital twin")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Simulate a pulse test on the truth battery and write its trace.
    SimHppc(SimHppcArgs),
    /// Identify circuit parameters from a pulse-test trace.
    FitParams(FitParamsArgs),
    /// Track state of charge with the Kalman filter.
    RunEkf(RunEkfArgs),
    /// Run the closed-loop constant-current (or CC-CV) controller.
    RunCc(RunCcArgs),
    /// sim-hppc, fit-params, then run-ekf with the fitted model.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory, created if missing.
    #[arg(long, short, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BatteryArgs {
    #[arg(long, default_value = "100Ah", value_parser = amp_hours)]
    pub capacity: f64,
    #[arg(long, default_value_t = 1.0)]
    pub eta_charge: f64,
    #[arg(long, default_value_t = 1.0)]
    pub eta_discharge: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SensorArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Current noise standard deviation.
    #[arg(long, default_value = "50mA", value_parser = amps)]
    pub i_noise: f64,
    /// Voltage noise standard deviation.
    #[arg(long, default_value = "10mV", value_parser = volts)]
    pub v_noise: f64,
    /// Current LSB; 0 disables quantization.
    #[arg(long, default_value = "29.3mA", value_parser = amps)]
    pub i_quant: f64,
    /// Voltage LSB; 0 disables quantization.
    #[arg(long, default_value = "4mV", value_parser = volts)]
    pub v_quant: f64,
    /// Noise-free, unquantized sensors (overrides the four settings above).
    #[arg(long)]
    pub ideal_sensors: bool,
}

/// Parameter tables of the simulated battery. Defaults are the bundled ones.
#[derive(Debug, Clone, Args)]
pub struct TruthArgs {
    #[arg(long)]
    pub truth_charging: Option<PathBuf>,
    #[arg(long)]
    pub truth_discharging: Option<PathBuf>,
}

/// Model inside the estimator. Defaults are the bundled tables and curve.
#[derive(Debug, Clone, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub filter_charging: Option<PathBuf>,
    #[arg(long)]
    pub filter_discharging: Option<PathBuf>,
    /// OCV coefficient file as written by fit-params.
    #[arg(long)]
    pub filter_ocv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EkfArgs {
    /// Process noise on SoC.
    #[arg(long, default_value_t = 1e-7)]
    pub j_soc: f64,
    /// Process noise on each RC voltage, V^2.
    #[arg(long, default_value_t = 1e-5)]
    pub j_v: f64,
    /// Measurement noise variance, V^2.
    #[arg(long, default_value_t = 1e-2)]
    pub r_var: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub p0_soc: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub p0_v: f64,
    #[arg(long)]
    pub joseph: bool,
    /// Current below which the filter keeps its table direction.
    #[arg(long, default_value = "200mA", value_parser = amps)]
    pub deadband: f64,
}

#[derive(Debug, Clone, Args)]
pub struct GainArgs {
    #[arg(long, default_value_t = 0.18)]
    pub kp_charge: f64,
    #[arg(long, default_value_t = 0.0008)]
    pub ki_charge: f64,
    #[arg(long, default_value_t = 0.006)]
    pub kd_charge: f64,
    #[arg(long, default_value_t = 1.0)]
    pub kp_discharge: f64,
    #[arg(long, default_value_t = 0.01)]
    pub ki_discharge: f64,
    #[arg(long, default_value_t = 0.005)]
    pub kd_discharge: f64,
    /// Factor applied to the current error before the PID.
    #[arg(long, default_value_t = 0.01)]
    pub error_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    pub duty_min: f64,
    #[arg(long, default_value_t = 0.9)]
    pub duty_max: f64,
    /// Charger source current; default half the reference.
    #[arg(long, value_parser = amps)]
    pub source_current: Option<f64>,
    /// Discharger load current; default half the reference.
    #[arg(long, value_parser = amps)]
    pub load_current: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct HppcArgs {
    /// Breakpoint SoC values, in test order.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1])]
    pub grid: Vec<f64>,
    #[arg(long, default_value = "10A", value_parser = amps)]
    pub pulse: f64,
    #[arg(long, default_value = "10s", value_parser = seconds)]
    pub pulse_len: f64,
    #[arg(long, default_value = "1h", value_parser = seconds)]
    pub rest: f64,
    /// Current that moves the battery between breakpoints.
    #[arg(long, default_value = "10A", value_parser = amps)]
    pub transfer: f64,
    /// Rest before the first pulse.
    #[arg(long, default_value = "60s", value_parser = seconds)]
    pub pre_rest: f64,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Current magnitude that separates pulses from rests.
    #[arg(long, default_value = "1A", value_parser = amps)]
    pub threshold: f64,
    /// Longer impulses are treated as SoC transfers.
    #[arg(long, default_value = "600s", value_parser = seconds)]
    pub max_pulse: f64,
    #[arg(long, default_value_t = 0.01)]
    pub soc_step: f64,
    #[arg(long, default_value_t = 400)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 8)]
    pub starts: usize,
}

/// The constant-current discharge with rests used for estimator runs.
#[derive(Debug, Clone, Args)]
pub struct DischargeArgs {
    /// True SoC at the start of the run.
    #[arg(long, default_value_t = 0.9)]
    pub initial_soc: f64,
    /// Filter SoC at the start; defaults to the true value.
    #[arg(long)]
    pub ekf_init: Option<f64>,
    #[arg(long, default_value = "10A", value_parser = amps)]
    pub discharge: f64,
    #[arg(long, default_value = "20min", value_parser = seconds)]
    pub discharge_len: f64,
    #[arg(long, default_value = "10min", value_parser = seconds)]
    pub rest_len: f64,
    #[arg(long, default_value_t = 4)]
    pub cycles: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SimHppcArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value = "1s", value_parser = seconds)]
    pub dt: f64,
    #[command(flatten)]
    pub hppc: HppcArgs,
    #[command(flatten)]
    pub battery: BatteryArgs,
    #[command(flatten)]
    pub sensors: SensorArgs,
    #[command(flatten)]
    pub truth: TruthArgs,
}

#[derive(Debug, Clone, Args)]
pub struct FitParamsArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Pulse-test trace (`t_s,i_a,v_v`).
    #[arg(long)]
    pub trace: PathBuf,
    /// SoC at the first sample of the trace.
    #[arg(long, default_value_t = 1.0)]
    pub initial_soc: f64,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub battery: BatteryArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RunEkfArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Measured trace to filter; the reference SoC is coulomb-counted from
    /// --initial-soc.
    #[arg(long, conflicts_with = "scenario")]
    pub trace: Option<PathBuf>,
    /// Scenario file to simulate instead of the default discharge.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value = "1s", value_parser = seconds)]
    pub dt: f64,
    #[command(flatten)]
    pub discharge: DischargeArgs,
    #[command(flatten)]
    pub battery: BatteryArgs,
    #[command(flatten)]
    pub sensors: SensorArgs,
    #[command(flatten)]
    pub truth: TruthArgs,
    #[command(flatten)]
    pub filter: FilterArgs,
    #[command(flatten)]
    pub ekf: EkfArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RunCcArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Reference current, positive to charge.
    #[arg(long, allow_hyphen_values = true, value_parser = amps)]
    pub i_ref: f64,
    #[arg(long, default_value = "1h", value_parser = seconds)]
    pub duration: f64,
    #[arg(long, default_value_t = 0.5)]
    pub initial_soc: f64,
    /// Float voltage; when given the run is a CC-CV charge.
    #[arg(long, value_parser = volts)]
    pub float_v: Option<f64>,
    #[arg(long, default_value = "1s", value_parser = seconds)]
    pub dt: f64,
    /// Control periods per plant step.
    #[arg(long, default_value_t = 100)]
    pub substeps: usize,
    #[command(flatten)]
    pub gains: GainArgs,
    #[command(flatten)]
    pub battery: BatteryArgs,
    #[command(flatten)]
    pub sensors: SensorArgs,
    #[command(flatten)]
    pub truth: TruthArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value = "1s", value_parser = seconds)]
    pub dt: f64,
    #[command(flatten)]
    pub hppc: HppcArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub discharge: DischargeArgs,
    #[command(flatten)]
    pub battery: BatteryArgs,
    #[command(flatten)]
    pub sensors: SensorArgs,
    #[command(flatten)]
    pub truth: TruthArgs,
    #[command(flatten)]
    pub ekf: EkfArgs,
}
