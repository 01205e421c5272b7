//! Frequency-stability metrics and system constraint checks.
//!
//! Traces are parallel slices of sample times (s) and frequencies (Hz),
//! sorted by time. All metrics look only at samples at or after the
//! disturbance time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voltstab::LineIndexReport;

pub const F_NOM_MIN_HZ: f64 = 59.5;
pub const F_NOM_MAX_HZ: f64 = 60.1;
pub const ROCOF_LIMIT_HZPS: f64 = 1.0;
pub const LINE_INDEX_LIMIT: f64 = 1.0;
pub const DEFAULT_ROCOF_WINDOW_S: f64 = 0.5;
pub const DEFAULT_SETTLING_BAND_HZ: f64 = 0.02;
/// Length of the trailing window used to decide that a trace has reached steady state.
pub const STEADY_WINDOW_S: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no samples at or after t = {0} s")]
    EmptyWindow(f64),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("settling band must be positive, got {0}")]
    DegenerateBand(f64),
    #[error("time and frequency series differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

fn window_start(t: &[f64], f: &[f64], t_dist: f64) -> Result<usize, MetricsError> {
    if t.len() != f.len() {
        return Err(MetricsError::LengthMismatch(t.len(), f.len()));
    }
    let i0 = t.partition_point(|&x| x < t_dist);
    if i0 >= t.len() {
        return Err(MetricsError::EmptyWindow(t_dist));
    }
    Ok(i0)
}

pub fn frequency_nadir(t: &[f64], f: &[f64], t_dist: f64) -> Result<f64, MetricsError> {
    let i0 = window_start(t, f, t_dist)?;
    Ok(f[i0..].iter().copied().fold(f64::INFINITY, f64::min))
}

/// Largest-magnitude average slope over any `window`-long span starting at
/// or after `t_dist`. Signed: negative for falling frequency.
pub fn rocof(t: &[f64], f: &[f64], t_dist: f64, window: f64) -> Result<f64, MetricsError> {
    if !(window > 0.0) {
        return Err(MetricsError::InsufficientSamples(format!("window must be positive, got {window}")));
    }
    let i0 = window_start(t, f, t_dist)?;
    let max_step = t[i0..].windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    if max_step > window / 5.0 + 1e-12 {
        return Err(MetricsError::InsufficientSamples(format!(
            "sample spacing {max_step} s exceeds window/5 = {} s",
            window / 5.0
        )));
    }
    let tol = 1e-9 * window;
    let mut best: Option<f64> = None;
    let mut j = i0;
    for i in i0..t.len() {
        j = j.max(i + 1);
        while j < t.len() && t[j] - t[i] < window - tol {
            j += 1;
        }
        if j >= t.len() {
            break;
        }
        let slope = (f[j] - f[i]) / (t[j] - t[i]);
        if best.is_none_or(|b| slope.abs() > b.abs()) {
            best = Some(slope);
        }
    }
    best.ok_or_else(|| MetricsError::InsufficientSamples(format!("trace after t = {t_dist} s is shorter than the {window} s window")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Settling {
    /// Absolute simulation time after which frequency stays in band.
    Settled(f64),
    /// Leaves the band again before the trace ends, or never reaches steady state.
    Unsettled,
}

impl Settling {
    pub fn time(self) -> Option<f64> {
        match self {
            Settling::Settled(t) => Some(t),
            Settling::Unsettled => None,
        }
    }

    /// Ordering key with `Unsettled` after every finite time.
    pub fn key(self) -> f64 {
        self.time().unwrap_or(f64::INFINITY)
    }
}

/// Earliest time after which frequency stays within `band` of its final
/// value, linearly interpolated between the last outside sample and the next.
pub fn settling_time(t: &[f64], f: &[f64], t_dist: f64, band: f64) -> Result<Settling, MetricsError> {
    if !(band > 0.0) {
        return Err(MetricsError::DegenerateBand(band));
    }
    let i0 = window_start(t, f, t_dist)?;
    let n = t.len();
    let f_final = f[n - 1];
    let t_end = t[n - 1];
    let tail = t.partition_point(|&x| x < t_end - STEADY_WINDOW_S);
    let (lo, hi) = f[tail..].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if hi - lo >= band / 10.0 {
        return Ok(Settling::Unsettled);
    }
    let dev = |k: usize| (f[k] - f_final).abs();
    let last_out = (i0..n).rev().find(|&k| dev(k) > band);
    Ok(match last_out {
        None => Settling::Settled(t_dist),
        Some(k) if k + 1 >= n => Settling::Unsettled,
        Some(k) => {
            let (d0, d1) = (dev(k), dev(k + 1));
            let frac = if d0 > d1 { (d0 - band) / (d0 - d1) } else { 1.0 };
            Settling::Settled(t[k] + frac * (t[k + 1] - t[k]))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyMetrics {
    pub generator: usize,
    pub f_nadir: f64,
    pub rocof_max: f64,
    pub settle: Settling,
    pub f_steady: f64,
}

/// Nadir, ROCOF, settling time and final frequency of one generator trace.
pub fn frequency_metrics(
    generator: usize,
    t: &[f64],
    f: &[f64],
    t_dist: f64,
    rocof_window: f64,
    band: f64,
) -> Result<FrequencyMetrics, MetricsError> {
    Ok(FrequencyMetrics {
        generator,
        f_nadir: frequency_nadir(t, f, t_dist)?,
        rocof_max: rocof(t, f, t_dist, rocof_window)?,
        settle: settling_time(t, f, t_dist, band)?,
        f_steady: *f.last().ok_or(MetricsError::EmptyWindow(t_dist))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub name: String,
    pub bound: String,
    pub observed: f64,
    pub pass: bool,
}

impl ConstraintCheck {
    pub fn within(name: impl Into<String>, bound: impl Into<String>, observed: f64, lo: f64, hi: f64) -> Self {
        Self { name: name.into(), bound: bound.into(), observed, pass: observed >= lo && observed <= hi }
    }

    pub fn at_most(name: impl Into<String>, bound: impl Into<String>, observed: f64, hi: f64) -> Self {
        Self { name: name.into(), bound: bound.into(), observed, pass: observed <= hi }
    }

    pub fn below(name: impl Into<String>, bound: impl Into<String>, observed: f64, limit: f64) -> Self {
        Self { name: name.into(), bound: bound.into(), observed, pass: observed < limit }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub checks: Vec<ConstraintCheck>,
    pub pass: bool,
}

impl ConstraintReport {
    pub fn new(checks: Vec<ConstraintCheck>) -> Self {
        let pass = checks.iter().all(|c| c.pass);
        Self { checks, pass }
    }

    pub fn failures(&self) -> impl Iterator<Item = &ConstraintCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

/// Line-index, steady-frequency and ROCOF limits, one entry per element.
pub fn check_system_constraints(metrics: &[FrequencyMetrics], indices: &[LineIndexReport]) -> ConstraintReport {
    let mut checks = Vec::new();
    for line in indices {
        let (i, j) = line.branch;
        checks.push(ConstraintCheck::below(format!("FVSI line {i}-{j}"), "< 1", line.fvsi, LINE_INDEX_LIMIT));
        checks.push(ConstraintCheck::below(format!("NLSI line {i}-{j}"), "< 1", line.nlsi, LINE_INDEX_LIMIT));
    }
    for m in metrics {
        checks.push(ConstraintCheck::within(
            format!("f_nom generator {}", m.generator),
            "[59.5, 60.1] Hz",
            m.f_steady,
            F_NOM_MIN_HZ,
            F_NOM_MAX_HZ,
        ));
        checks.push(ConstraintCheck::below(
            format!("ROCOF generator {}", m.generator),
            "|df/dt| < 1 Hz/s",
            m.rocof_max.abs(),
            ROCOF_LIMIT_HZPS,
        ));
    }
    ConstraintReport::new(checks)
}

/// Rank of each value, 1 for the smallest; ties share the earlier position.
pub fn ascending_ranks(values: &[f64]) -> Vec<usize> {
    values.iter().map(|v| 1 + values.iter().filter(|w| *w < v).count()).collect()
}
