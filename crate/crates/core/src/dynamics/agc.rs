//! Automatic generation control: one integrator on the frequency error,
//! split among generators by participation factors.

use serde::{Deserialize, Serialize};

pub const DEFAULT_K_I: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgcParams {
    /// Integral gain, per-unit power per (Hz·s).
    pub k_i: f64,
    /// Relative shares; normalized to sum to one when used.
    pub participation: Vec<f64>,
}

impl AgcParams {
    pub fn equal(n: usize, k_i: f64) -> Self {
        Self { k_i, participation: vec![1.0; n] }
    }

    pub fn validate(&self, n_gen: usize) -> Result<(), String> {
        if !(self.k_i >= 0.0 && self.k_i.is_finite()) {
            return Err(format!("k_i must be non-negative, got {}", self.k_i));
        }
        if self.participation.len() != n_gen {
            return Err(format!("{} participation factors for {} generators", self.participation.len(), n_gen));
        }
        if self.participation.iter().any(|&a| !(a >= 0.0)) || self.participation.iter().sum::<f64>() <= 0.0 {
            return Err("participation factors must be non-negative with a positive sum".into());
        }
        Ok(())
    }

    pub fn shares(&self) -> Vec<f64> {
        let total: f64 = self.participation.iter().sum();
        self.participation.iter().map(|a| a / total).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AgcState {
    /// Total setpoint correction, per-unit.
    pub integral: f64,
    pub df_prev: Option<f64>,
}

/// Integrates `-k_i Δf` over `dt` (trapezoidal) and returns the setpoint
/// change for each generator.
pub fn agc_update(df_hz: f64, state: &AgcState, dt: f64, params: &AgcParams) -> (Vec<f64>, AgcState) {
    let prev = state.df_prev.unwrap_or(df_hz);
    let integral = state.integral - params.k_i * dt * 0.5 * (prev + df_hz);
    let next = AgcState { integral, df_prev: Some(df_hz) };
    (params.shares().iter().map(|a| a * integral).collect(), next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_error_zero_output() {
        let p = AgcParams::equal(3, DEFAULT_K_I);
        let mut st = AgcState::default();
        for _ in 0..100 {
            let (dp, s) = agc_update(0.0, &st, 0.01, &p);
            assert!(dp.iter().all(|&x| x == 0.0));
            st = s;
        }
    }

    #[test]
    fn sustained_error_ramps() {
        let p = AgcParams::equal(2, DEFAULT_K_I);
        let mut st = AgcState::default();
        let mut last = 0.0;
        for k in 1..=100 {
            let (dp, s) = agc_update(-0.5, &st, 0.01, &p);
            assert!(dp[0] > last);
            last = dp[0];
            st = s;
            assert!((st.integral - 0.3 * 0.5 * 0.01 * k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn single_participant() {
        let p = AgcParams { k_i: 0.3, participation: vec![1.0, 0.0, 0.0] };
        let (dp, _) = agc_update(-0.5, &AgcState { integral: 0.1, df_prev: Some(-0.5) }, 0.01, &p);
        assert!(dp[0] > 0.0 && dp[1] == 0.0 && dp[2] == 0.0);
    }

    #[test]
    fn validation() {
        assert!(AgcParams::equal(3, 0.3).validate(3).is_ok());
        assert!(AgcParams::equal(2, 0.3).validate(3).is_err());
        assert!(AgcParams { k_i: 0.3, participation: vec![0.0, 0.0] }.validate(2).is_err());
    }
}
