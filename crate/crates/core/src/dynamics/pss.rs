//! Multi-band power system stabilizer.
//!
//! Three bands (low, intermediate, high), each a washout followed by two
//! lead-lag stages and a gain, clipped per band; the band sum is clipped to
//! a global limit and added to the exciter voltage reference.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::filters::FirstOrderStage;

pub const CENTER_FREQUENCIES_HZ: [f64; 3] = [0.2, 1.25, 12.0];
pub const DEFAULT_GAINS: [f64; 3] = [30.0, 40.0, 160.0];
pub const DEFAULT_BAND_LIMITS: [f64; 3] = [0.075, 0.15, 0.15];
pub const DEFAULT_GLOBAL_LIMIT: f64 = 0.15;
/// Lead/lag time-constant ratio used by the tuning rule.
pub const DEFAULT_LEAD_LAG_RATIO: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PssBand {
    pub gain: f64,
    pub t_w: f64,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub t4: f64,
    pub limit: f64,
}

impl PssBand {
    /// Washout at `1/(2π f_c)`; lead and lag placed symmetrically about the
    /// center frequency with lead/lag ratio `ratio`.
    pub fn tuned(f_c: f64, gain: f64, limit: f64, ratio: f64) -> Self {
        let t = 1.0 / (2.0 * PI * f_c);
        let s = ratio.sqrt();
        Self { gain, t_w: t, t1: t * s, t2: t / s, t3: t * s, t4: t / s, limit }
    }

    pub fn stages(&self) -> [FirstOrderStage; 3] {
        [
            FirstOrderStage::washout(self.t_w),
            FirstOrderStage::lead_lag(self.t1, self.t2),
            FirstOrderStage::lead_lag(self.t3, self.t4),
        ]
    }

    /// Unclipped transfer function including the gain.
    pub fn response(&self, s: Complex64) -> Complex64 {
        self.stages().iter().fold(Complex64::new(self.gain, 0.0), |acc, st| acc * st.response(s))
    }

    /// Output before the gain for stage states `x` and input `u`.
    pub fn chain_output(&self, u: f64, x: &[f64; 3]) -> f64 {
        let st = self.stages();
        let y1 = st[0].output(u, x[0]);
        let y2 = st[1].output(y1, x[1]);
        st[2].output(y2, x[2])
    }

    /// Derivatives of the stage states.
    pub fn derivatives(&self, u: f64, x: &[f64; 3]) -> [f64; 3] {
        let st = self.stages();
        let y1 = st[0].output(u, x[0]);
        let y2 = st[1].output(y1, x[1]);
        [st[0].derivative(u, x[0]), st[1].derivative(y1, x[1]), st[2].derivative(y2, x[2])]
    }

    pub fn clipped(&self, chain: f64) -> f64 {
        (self.gain * chain).clamp(-self.limit, self.limit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MbPssParams {
    pub bands: [PssBand; 3],
    pub global_limit: f64,
}

impl Default for MbPssParams {
    fn default() -> Self {
        Self::tuned(CENTER_FREQUENCIES_HZ, DEFAULT_GAINS, DEFAULT_BAND_LIMITS, DEFAULT_GLOBAL_LIMIT, DEFAULT_LEAD_LAG_RATIO)
    }
}

impl MbPssParams {
    pub fn tuned(f_c: [f64; 3], gains: [f64; 3], limits: [f64; 3], global_limit: f64, ratio: f64) -> Self {
        let band = |k: usize| PssBand::tuned(f_c[k], gains[k], limits[k], ratio);
        Self { bands: [band(0), band(1), band(2)], global_limit }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (k, b) in self.bands.iter().enumerate() {
            for t in [b.t_w, b.t1, b.t2, b.t3, b.t4] {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(format!("band {k}: time constants must be positive"));
                }
            }
            if !(b.limit > 0.0) {
                return Err(format!("band {k}: limit must be positive"));
            }
        }
        if !(self.global_limit > 0.0) {
            return Err("global limit must be positive".into());
        }
        Ok(())
    }

    pub fn response(&self, s: Complex64) -> Complex64 {
        self.bands.iter().map(|b| b.response(s)).sum()
    }

    /// Stabilizer output for input `u` and per-band stage states.
    pub fn output(&self, u: f64, x: &[[f64; 3]; 3]) -> f64 {
        let sum: f64 = self.bands.iter().zip(x).map(|(b, xb)| b.clipped(b.chain_output(u, xb))).sum();
        sum.clamp(-self.global_limit, self.global_limit)
    }
}

/// Discrete stabilizer state: stage states per band and the last input.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MbPssState {
    pub x: [[f64; 3]; 3],
    pub u_prev: Option<f64>,
}

/// Advances the stabilizer by `dt` under input `dw` with the trapezoidal rule
/// applied stage by stage; returns the clipped output.
pub fn mbpss_output(dw: f64, state: &MbPssState, dt: f64, params: &MbPssParams) -> (f64, MbPssState) {
    let mut next = *state;
    let u0 = state.u_prev.unwrap_or(dw);
    if state.u_prev.is_some() && dt > 0.0 {
        for (b, xb) in params.bands.iter().zip(next.x.iter_mut()) {
            let st = b.stages();
            let (mut in0, mut in1) = (u0, dw);
            for (k, stage) in st.iter().enumerate() {
                let x0 = xb[k];
                let x1 = stage.trapezoidal_step(x0, in0, in1, dt);
                in0 = stage.output(in0, x0);
                in1 = stage.output(in1, x1);
                xb[k] = x1;
            }
        }
    } else {
        // First call: start in steady state for the present input.
        for (b, xb) in params.bands.iter().zip(next.x.iter_mut()) {
            let st = b.stages();
            let mut u = dw;
            for (k, stage) in st.iter().enumerate() {
                xb[k] = stage.steady_state(u);
                u = stage.output(u, xb[k]);
            }
        }
    }
    next.u_prev = Some(dw);
    (params.output(dw, &next.x), next)
}
