//! Pulse-test (HPPC) traces: segmentation and per-breakpoint identification.
//!
//! A block at one SoC is a discharge pulse, a rest, a charge pulse and a
//! second rest. Following the usual plot of such a test, the discharge pulse
//! is labelled [`SegmentKind::ImpulseRise`] and the charge pulse
//! [`SegmentKind::ImpulseDrop`].

use crate::ecm::{CoulombicEfficiency, Direction, EcmParams, Soc};
use crate::trace::Sample;

use super::{extract_r0, fit_ocv_poly, fit_relaxation, FitError, LmConfig, OcvFit, RelaxFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    /// Discharge pulse.
    ImpulseRise,
    /// Charge pulse.
    ImpulseDrop,
    Rest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HppcSegment {
    pub kind: SegmentKind,
    pub samples: Vec<Sample>,
    /// Mean current of this pulse, or of the pulse right before this rest.
    pub pulse_current: f64,
    /// Length of that pulse in seconds; `INFINITY` means the branches are
    /// taken as fully charged.
    pub pulse_duration: f64,
    pub soc_at_segment: Option<Soc>,
    /// Voltage and current of the last sample before the segment, NaN for
    /// the first segment of a trace.
    pub v_before_edge: f64,
    pub i_before_edge: f64,
}

impl HppcSegment {
    pub fn mean_current(&self) -> f64 {
        self.samples.iter().map(|s| s.i).sum::<f64>() / self.samples.len() as f64
    }
}

/// Splits a trace at current edges (`|Δi| > current_threshold`).
///
/// Segments whose mean current is within the threshold are rests; the rest
/// are pulses, labelled by current sign.
pub fn segment_hppc(
    samples: &[Sample],
    current_threshold: f64,
) -> Result<Vec<HppcSegment>, FitError> {
    if samples.len() < 4 {
        return Err(FitError::InvalidInput(format!(
            "need at least 4 samples, got {}",
            samples.len()
        )));
    }
    if samples.windows(2).any(|w| !(w[1].t > w[0].t)) {
        return Err(FitError::InvalidInput(
            "sample times must be strictly increasing".into(),
        ));
    }
    let mut bounds = vec![0];
    bounds.extend(
        (1..samples.len()).filter(|&k| (samples[k].i - samples[k - 1].i).abs() > current_threshold),
    );
    if bounds.len() == 1 {
        return Err(FitError::UnsegmentableTrace);
    }
    bounds.push(samples.len());

    let mut segments: Vec<HppcSegment> = Vec::with_capacity(bounds.len() - 1);
    for w in bounds.windows(2) {
        let (a, b) = (w[0], w[1]);
        let slice = &samples[a..b];
        let mean = slice.iter().map(|s| s.i).sum::<f64>() / slice.len() as f64;
        let kind = if mean.abs() <= current_threshold {
            SegmentKind::Rest
        } else if mean < 0.0 {
            SegmentKind::ImpulseRise
        } else {
            SegmentKind::ImpulseDrop
        };
        // A pulse lasts until the next edge; the final segment ends one
        // sample interval after its last sample.
        let end_t = if b < samples.len() {
            samples[b].t
        } else if slice.len() > 1 {
            slice[slice.len() - 1].t + (slice[slice.len() - 1].t - slice[slice.len() - 2].t)
        } else {
            slice[0].t
        };
        let (pulse_current, pulse_duration) = match (kind, segments.last()) {
            (SegmentKind::Rest, Some(prev)) if prev.kind != SegmentKind::Rest => {
                (prev.pulse_current, prev.pulse_duration)
            }
            (SegmentKind::Rest, _) => (0.0, 0.0),
            _ => (mean, end_t - slice[0].t),
        };
        let (v_before_edge, i_before_edge) = if a > 0 {
            (samples[a - 1].v, samples[a - 1].i)
        } else {
            (f64::NAN, f64::NAN)
        };
        segments.push(HppcSegment {
            kind,
            samples: slice.to_vec(),
            pulse_current,
            pulse_duration,
            soc_at_segment: None,
            v_before_edge,
            i_before_edge,
        });
    }
    Ok(segments)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HppcOptions {
    pub current_threshold: f64,
    pub initial_soc: Soc,
    /// Capacity in coulombs.
    pub capacity: f64,
    pub efficiency: CoulombicEfficiency,
    /// Impulses longer than this are SoC transfers, not pulses.
    pub max_pulse_s: f64,
    /// Breakpoint SoC is rounded to a multiple of this.
    pub soc_step: f64,
    pub lm: LmConfig,
}

impl Default for HppcOptions {
    fn default() -> Self {
        HppcOptions {
            current_threshold: 1.0,
            initial_soc: Soc::FULL,
            capacity: crate::ecm::ah_to_coulombs(100.0),
            efficiency: CoulombicEfficiency::default(),
            max_pulse_s: 600.0,
            soc_step: 0.01,
            lm: LmConfig::default(),
        }
    }
}

/// Identified parameters for one pulse and its rest.
#[derive(Debug, Clone, PartialEq)]
pub struct BreakpointFit {
    pub direction: Direction,
    /// Coulomb-counted SoC during the rest.
    pub soc: f64,
    /// `soc` rounded to the breakpoint grid.
    pub soc_grid: f64,
    pub pulse_current: f64,
    pub pulse_duration: f64,
    pub r0: f64,
    pub relax: RelaxFit,
    pub params: EcmParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BreakpointFailure {
    pub direction: Direction,
    pub soc: f64,
    pub error: FitError,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HppcIdentification {
    pub charging: Vec<BreakpointFit>,
    pub discharging: Vec<BreakpointFit>,
    pub failures: Vec<BreakpointFailure>,
    /// Settled voltage after each charge pulse, against SoC.
    pub ocv_points: Vec<(Soc, f64)>,
    pub ocv_fit: Option<OcvFit>,
}

fn coulomb_counted(samples: &[Sample], opts: &HppcOptions) -> Vec<f64> {
    let mut soc = Vec::with_capacity(samples.len());
    let mut s = opts.initial_soc.value();
    for (k, smp) in samples.iter().enumerate() {
        soc.push(s);
        if let Some(next) = samples.get(k + 1) {
            let eta = opts.efficiency.for_current(smp.i);
            s = (s + smp.i * eta * (next.t - smp.t) / opts.capacity).clamp(0.0, 1.0);
        }
    }
    soc
}

/// Runs R0 extraction and relaxation fits on every pulse/rest pair.
///
/// A pair whose fit fails is recorded in `failures` and skipped. The OCV
/// polynomial is fitted when at least six distinct breakpoints are present.
pub fn identify_hppc(
    samples: &[Sample],
    opts: &HppcOptions,
) -> Result<HppcIdentification, FitError> {
    let mut segments = segment_hppc(samples, opts.current_threshold)?;
    let soc = coulomb_counted(samples, opts);
    let mut start = 0;
    for seg in &mut segments {
        seg.soc_at_segment = Some(Soc::clamped(soc[start]).0);
        start += seg.samples.len();
    }

    let mut out = HppcIdentification::default();
    for pair in segments.windows(2) {
        let (pulse, rest) = (&pair[0], &pair[1]);
        if pulse.kind == SegmentKind::Rest || rest.kind != SegmentKind::Rest {
            continue;
        }
        if pulse.pulse_duration > opts.max_pulse_s {
            continue;
        }
        let direction = if pulse.kind == SegmentKind::ImpulseRise {
            Direction::Discharging
        } else {
            Direction::Charging
        };
        let rest_soc = rest.soc_at_segment.map_or(f64::NAN, Soc::value);
        let fail = |error| BreakpointFailure {
            direction,
            soc: rest_soc,
            error,
        };
        if pulse.v_before_edge.is_nan() {
            out.failures.push(fail(FitError::InvalidInput(
                "pulse has no sample before its leading edge".into(),
            )));
            continue;
        }
        let first = pulse.samples[0];
        let r0 = match extract_r0(pulse.v_before_edge, first.v, first.i - pulse.i_before_edge) {
            Ok(r0) => r0,
            Err(e) => {
                out.failures.push(fail(e));
                continue;
            }
        };
        let relax = match fit_relaxation(rest, pulse.pulse_current, &opts.lm) {
            Ok(f) => f,
            Err(e) => {
                out.failures.push(fail(e));
                continue;
            }
        };
        let params = EcmParams {
            r0,
            r1: relax.r1(),
            c1: relax.c1(),
            r2: relax.r2(),
            c2: relax.c2(),
        };
        if let Err(e) = params.validate() {
            out.failures
                .push(fail(FitError::InvalidInput(e.to_string())));
            continue;
        }
        let soc_grid = ((rest_soc / opts.soc_step).round() * opts.soc_step).clamp(0.0, 1.0);
        let fit = BreakpointFit {
            direction,
            soc: rest_soc,
            soc_grid,
            pulse_current: pulse.pulse_current,
            pulse_duration: pulse.pulse_duration,
            r0,
            relax,
            params,
        };
        match direction {
            Direction::Charging => {
                out.ocv_points.push((Soc::clamped(rest_soc).0, relax.ocv));
                out.charging.push(fit);
            }
            Direction::Discharging => out.discharging.push(fit),
        }
    }
    out.ocv_fit = fit_ocv_poly(&out.ocv_points).ok();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(profile: &[(f64, usize)]) -> Vec<Sample> {
        let mut out = Vec::new();
        let mut t = 0.0;
        for &(i, n) in profile {
            for _ in 0..n {
                // Voltage follows the current sign so edges are visible.
                out.push(Sample::new(t, i, 12.5 + 0.1 * i));
                t += 1.0;
            }
        }
        out
    }

    #[test]
    fn pulse_then_rest() {
        let segs = segment_hppc(&trace(&[(-10.0, 10), (0.0, 3600)]), 1.0).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].kind, SegmentKind::ImpulseRise);
        assert_eq!(segs[0].samples.len(), 10);
        assert_eq!(segs[0].pulse_duration, 10.0);
        assert_eq!(segs[1].kind, SegmentKind::Rest);
        assert_eq!(segs[1].pulse_current, -10.0);
        assert_eq!(segs[1].pulse_duration, 10.0);
        assert_eq!(segs[1].samples.len(), 3600);
        assert!(segs[0].v_before_edge.is_nan());
        assert_eq!(segs[1].v_before_edge, 11.5);
    }

    #[test]
    fn zero_current_is_unsegmentable() {
        assert_eq!(
            segment_hppc(&trace(&[(0.0, 100)]), 1.0).unwrap_err(),
            FitError::UnsegmentableTrace
        );
    }

    #[test]
    fn full_block_gives_four_segments() {
        let segs = segment_hppc(
            &trace(&[(-10.0, 10), (0.0, 600), (10.0, 10), (0.0, 600)]),
            1.0,
        )
        .unwrap();
        let kinds: Vec<_> = segs.iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            [
                SegmentKind::ImpulseRise,
                SegmentKind::Rest,
                SegmentKind::ImpulseDrop,
                SegmentKind::Rest
            ]
        );
        assert_eq!(segs[3].pulse_current, 10.0);
    }

    #[test]
    fn small_ripple_does_not_split() {
        let mut t = trace(&[(0.0, 20), (-10.0, 10), (0.0, 20)]);
        for (k, s) in t.iter_mut().enumerate() {
            s.i += if k % 2 == 0 { 0.05 } else { -0.05 };
        }
        assert_eq!(segment_hppc(&t, 1.0).unwrap().len(), 3);
    }

    #[test]
    fn too_short_or_non_monotone() {
        assert!(matches!(
            segment_hppc(&trace(&[(0.0, 3)]), 1.0),
            Err(FitError::InvalidInput(_))
        ));
        let mut t = trace(&[(0.0, 5), (-5.0, 5)]);
        t[3].t = t[2].t;
        assert!(matches!(
            segment_hppc(&t, 1.0),
            Err(FitError::InvalidInput(_))
        ));
    }
}
