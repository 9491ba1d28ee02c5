use serde::{Deserialize, Serialize};

use super::{BenchError, Scenario, Trace};
use crate::env::THD_MAX_HARMONIC;
use crate::nn::{estimated_time_us, inference_flops, param_count, MlpSpec};
use crate::signal;

/// Length of the post-event window searched for the peak deviation (s).
pub const OVERSHOOT_WINDOW: f64 = 0.1;
/// Settling band as a fraction of the reference magnitude.
pub const SETTLE_BAND: f64 = 0.01;
/// Steady-state window length in fundamental cycles.
const STEADY_CYCLES: usize = 2;

/// Waveform-quality summary of one rollout. Optional fields are absent when
/// the quantity is undefined (no fundamental, or never settled).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenario: String,
    pub controller: String,
    /// Volts.
    pub sse: f64,
    /// Percent.
    pub thd_voltage: Option<f64>,
    pub thd_current: Option<f64>,
    pub relative_overshoot: f64,
    pub unbalance: Option<f64>,
    /// Seconds after the load event.
    pub settle_time: Option<f64>,
    pub diverged: bool,
}

impl MetricReport {
    fn diverged(trace: &Trace) -> Self {
        Self {
            scenario: trace.scenario.clone(),
            controller: trace.controller.clone(),
            sse: f64::INFINITY,
            thd_voltage: None,
            thd_current: None,
            relative_overshoot: f64::INFINITY,
            unbalance: None,
            settle_time: None,
            diverged: true,
        }
    }
}

pub fn metrics(trace: &Trace, scenario: &Scenario) -> Result<MetricReport, BenchError> {
    if trace.diverged() {
        return Ok(MetricReport::diverged(trace));
    }
    let f1 = trace.fundamental_hz();
    let fs = 1.0 / trace.ts;
    let window = (STEADY_CYCLES as f64 * fs / f1).round() as usize;
    let n = trace.samples.len();
    if n < window {
        return Err(BenchError::TraceTooShort { have: n, need: window });
    }
    let r_mag = trace.reference[0].hypot(trace.reference[1]);
    let tail = &trace.samples[n - window..];

    let sse = (tail.iter().map(|s| r_mag - s.bus_magnitude()).sum::<f64>() / window as f64).abs();

    let event = scenario.event_time();
    let eps = 1e-9;
    let post: Vec<_> = trace.samples.iter().filter(|s| s.t > event + eps).collect();
    let relative_overshoot = 100.0
        * post
            .iter()
            .filter(|s| s.t <= event + OVERSHOOT_WINDOW + eps)
            .map(|s| (s.bus_magnitude() - r_mag).abs())
            .fold(0.0, f64::max)
        / r_mag;

    let band = SETTLE_BAND * r_mag;
    let settle_time = match post.iter().rposition(|s| (s.bus_magnitude() - r_mag).abs() >= band) {
        None => Some(0.0),
        Some(j) if j + 1 == post.len() => None,
        Some(j) => Some(post[j].t - event),
    };

    let theta = |t: f64| trace.omega * t;
    let ua: Vec<f64> = tail.iter().map(|s| signal::phase_a(s.u_bus_d, s.u_bus_q, theta(s.t))).collect();
    let ia: Vec<f64> = tail.iter().map(|s| signal::phase_a(s.i_od, s.i_oq, theta(s.t))).collect();
    let thd_voltage = signal::thd(&ua, f1, fs, THD_MAX_HARMONIC).ok();
    let thd_current = signal::thd(&ia, f1, fs, THD_MAX_HARMONIC).ok();
    let abc: Vec<_> = tail.iter().map(|s| signal::inverse_park(s.u_bus_d, s.u_bus_q, theta(s.t))).collect();
    let (a, b, c): (Vec<f64>, Vec<f64>, Vec<f64>) = (
        abc.iter().map(|x| x.a).collect(),
        abc.iter().map(|x| x.b).collect(),
        abc.iter().map(|x| x.c).collect(),
    );
    let unbalance = signal::unbalance(&a, &b, &c, f1, fs).ok();

    Ok(MetricReport {
        scenario: trace.scenario.clone(),
        controller: trace.controller.clone(),
        sse,
        thd_voltage,
        thd_current,
        relative_overshoot,
        unbalance,
        settle_time,
        diverged: false,
    })
}

/// Deployment cost of one network relative to the first (reference) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    pub est_time_us: f64,
    pub compression_ratio: f64,
}

pub fn ablation_table(specs: &[(String, MlpSpec)], throughput_mflops: f64) -> Vec<AblationRow> {
    let Some((_, reference)) = specs.first() else {
        return Vec::new();
    };
    let ref_params = param_count(reference) as f64;
    specs
        .iter()
        .map(|(name, spec)| {
            let params = param_count(spec);
            let flops = inference_flops(spec);
            AblationRow {
                name: name.clone(),
                params,
                flops,
                est_time_us: estimated_time_us(flops, throughput_mflops),
                compression_ratio: ref_params / params as f64,
            }
        })
        .collect()
}
