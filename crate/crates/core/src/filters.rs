//! First-order transfer-function stages shared by the EV load lag and the
//! stabilizer bands.
//!
//! Every stage has one state `x` obeying `dx/dt = (u - x) / t` and an output
//! `y = c_u * u + c_x * x`:
//!
//! | stage                      | c_u       | c_x           |
//! |----------------------------|-----------|---------------|
//! | washout `sT / (1 + sT)`    | 1         | -1            |
//! | lead-lag `(1+sT1)/(1+sT2)` | T1 / T2   | 1 - T1 / T2   |

use num_complex::Complex64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstOrderStage {
    pub t: f64,
    c_u: f64,
    c_x: f64,
}

impl FirstOrderStage {
    pub fn washout(t_w: f64) -> Self {
        Self { t: t_w, c_u: 1.0, c_x: -1.0 }
    }

    pub fn lead_lag(t_lead: f64, t_lag: f64) -> Self {
        let r = t_lead / t_lag;
        Self { t: t_lag, c_u: r, c_x: 1.0 - r }
    }

    pub fn derivative(&self, u: f64, x: f64) -> f64 {
        (u - x) / self.t
    }

    pub fn output(&self, u: f64, x: f64) -> f64 {
        self.c_u * u + self.c_x * x
    }

    /// State that holds the output constant for a constant input.
    pub fn steady_state(&self, u: f64) -> f64 {
        u
    }

    /// One trapezoidal step of the state from input `u0` to `u1`.
    pub fn trapezoidal_step(&self, x0: f64, u0: f64, u1: f64, dt: f64) -> f64 {
        let h = dt / (2.0 * self.t);
        (x0 * (1.0 - h) + h * (u0 + u1)) / (1.0 + h)
    }

    /// Continuous-time frequency response at `s`.
    pub fn response(&self, s: Complex64) -> Complex64 {
        // y/u = c_u + c_x / (1 + s t)
        Complex64::new(self.c_u, 0.0) + self.c_x / (1.0 + s * self.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn washout_blocks_dc_and_passes_hf() {
        let w = FirstOrderStage::washout(2.0);
        assert!(w.response(Complex64::new(0.0, 0.0)).norm() < 1e-15);
        assert!((w.response(Complex64::new(0.0, 1e6)).norm() - 1.0).abs() < 1e-6);
        assert_eq!(w.output(3.0, w.steady_state(3.0)), 0.0);
    }

    #[test]
    fn lead_lag_matches_rational_form() {
        let ll = FirstOrderStage::lead_lag(0.3, 0.1);
        for w in [0.1, 1.0, 10.0, 100.0] {
            let s = Complex64::new(0.0, w);
            let expected = (1.0 + s * 0.3) / (1.0 + s * 0.1);
            assert!((ll.response(s) - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn trapezoidal_step_tracks_exponential() {
        let st = FirstOrderStage::lead_lag(0.0, 1.0);
        let dt = 1e-3;
        let mut x = 0.0;
        for _ in 0..1000 {
            x = st.trapezoidal_step(x, 1.0, 1.0, dt);
        }
        assert!((x - (1.0 - (-1.0f64).exp())).abs() < 1e-7);
    }
}
