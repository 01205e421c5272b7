//! Stochastic PV farm injection.
//!
//! Irradiance is gated and scaled by one uniform draw `u`: zero when
//! `u <= 0.6`, otherwise `600 + u (G_rated - 500)`. With a 1000 W/m² rating
//! the nonzero samples therefore lie in (900, 1100]. A two-draw mode uses
//! independent draws for gate and magnitude.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::netmodel::BusId;
use crate::powerflow::BusLoad;

pub const G_RATED_WM2: f64 = 1000.0;
pub const GATE_THRESHOLD: f64 = 0.6;
pub const Q_TO_P_RATIO: f64 = 0.2;
/// Identifier written into run metadata for reproducibility.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng (rand_chacha 0.9), f64 via rand::Rng::random";

#[derive(Debug, Clone, PartialEq)]
pub struct PvFarm {
    pub bus: BusId,
    /// Rated active power, per-unit.
    pub p_b: f64,
    pub g_rated: f64,
    pub seed: u64,
    pub spur_km: f64,
    pub two_draw: bool,
}

impl PvFarm {
    pub fn new(bus: BusId, p_b: f64, seed: u64) -> Self {
        Self { bus, p_b, g_rated: G_RATED_WM2, seed, spur_km: 1.0, two_draw: false }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Irradiance for a gate draw `u` and magnitude draw `m` (equal in single-draw mode).
pub fn irradiance_from_draws(u: f64, m: f64, g_rated: f64) -> f64 {
    if u > GATE_THRESHOLD {
        600.0 + m * (g_rated - 500.0)
    } else {
        0.0
    }
}

pub fn sample_irradiance(farm: &PvFarm, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random();
    let m = if farm.two_draw { rng.random() } else { u };
    irradiance_from_draws(u, m, farm.g_rated)
}

pub fn pv_injection(farm: &PvFarm, g_actual: f64) -> (f64, f64) {
    let p = farm.p_b * g_actual / farm.g_rated;
    (p, Q_TO_P_RATIO * p)
}

/// Sample log `t,g_wm2,p_mw,q_mvar` for `n` draws spaced `resample_s` apart.
pub fn sample_log(farm: &PvFarm, n: usize, resample_s: f64, s_base: f64) -> String {
    let mut rng = farm.rng();
    let mut out = String::from("t,g_wm2,p_mw,q_mvar\n");
    for k in 0..n {
        let g = sample_irradiance(farm, &mut rng);
        let (p, q) = pv_injection(farm, g);
        out.push_str(&format!("{},{},{},{}\n", k as f64 * resample_s, g, p * s_base, q * s_base));
    }
    out
}

/// Farm injecting a fixed irradiance, as a negative load for the power flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvInjection {
    pub bus: BusId,
    pub p: f64,
    pub q: f64,
}

impl PvInjection {
    pub fn at(farm: &PvFarm, bus: BusId, g_actual: f64) -> Self {
        let (p, q) = pv_injection(farm, g_actual);
        Self { bus, p, q }
    }
}

impl BusLoad for PvInjection {
    fn bus(&self) -> BusId {
        self.bus
    }
    fn demand(&self, _v: f64) -> (f64, f64) {
        (-self.p, -self.q)
    }
}
