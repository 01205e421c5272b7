//! Synchronous machine, governor and exciter parameters.
//!
//! Parameters are given on the machine's own MVA base and converted to the
//! system base once, when the dynamic model is built.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GovernorParams {
    /// Speed droop on the machine base.
    pub droop: f64,
    pub t_g_s: f64,
    pub t_t_s: f64,
}

impl Default for GovernorParams {
    fn default() -> Self {
        Self { droop: 0.05, t_g_s: 0.2, t_t_s: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExciterParams {
    pub k_a: f64,
    pub t_a_s: f64,
    pub efd_max: f64,
    pub efd_min: f64,
}

impl Default for ExciterParams {
    fn default() -> Self {
        Self { k_a: 200.0, t_a_s: 0.02, efd_max: 5.0, efd_min: -5.0 }
    }
}

/// One-axis machine: inertia, damping, synchronous and transient reactances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineParams {
    pub h_s: f64,
    pub d_pu: f64,
    pub xd_pu: f64,
    pub xd_t_pu: f64,
    pub xq_pu: f64,
    pub td0_t_s: f64,
    #[serde(default)]
    pub governor: GovernorParams,
    #[serde(default)]
    pub exciter: ExciterParams,
}

impl Default for MachineParams {
    fn default() -> Self {
        Self {
            h_s: 5.0,
            d_pu: 2.0,
            xd_pu: 1.8,
            xd_t_pu: 0.3,
            xq_pu: 1.7,
            td0_t_s: 8.0,
            governor: GovernorParams::default(),
            exciter: ExciterParams::default(),
        }
    }
}

impl MachineParams {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("h_s", self.h_s),
            ("xd_pu", self.xd_pu),
            ("xd_t_pu", self.xd_t_pu),
            ("xq_pu", self.xq_pu),
            ("td0_t_s", self.td0_t_s),
            ("droop", self.governor.droop),
            ("t_g_s", self.governor.t_g_s),
            ("t_t_s", self.governor.t_t_s),
            ("k_a", self.exciter.k_a),
            ("t_a_s", self.exciter.t_a_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.d_pu < 0.0 {
            return Err(format!("d_pu must be non-negative, got {}", self.d_pu));
        }
        if self.xd_t_pu > self.xd_pu {
            return Err("xd_t_pu exceeds xd_pu".into());
        }
        if self.exciter.efd_min >= self.exciter.efd_max {
            return Err("efd_min must be below efd_max".into());
        }
        Ok(())
    }

    /// Same machine expressed on the system base.
    pub fn on_system_base(&self, mva_base: f64, s_base: f64) -> MachineSys {
        let k = mva_base / s_base;
        MachineSys {
            h: self.h_s * k,
            d: self.d_pu * k,
            xd: self.xd_pu / k,
            xd_t: self.xd_t_pu / k,
            xq: self.xq_pu / k,
            td0_t: self.td0_t_s,
            inv_droop: k / self.governor.droop,
            t_g: self.governor.t_g_s,
            t_t: self.governor.t_t_s,
            k_a: self.exciter.k_a,
            t_a: self.exciter.t_a_s,
            efd_max: self.exciter.efd_max,
            efd_min: self.exciter.efd_min,
        }
    }
}

/// Machine constants on the system base.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MachineSys {
    pub h: f64,
    pub d: f64,
    pub xd: f64,
    pub xd_t: f64,
    pub xq: f64,
    pub td0_t: f64,
    /// `1/R` on the system base.
    pub inv_droop: f64,
    pub t_g: f64,
    pub t_t: f64,
    pub k_a: f64,
    pub t_a: f64,
    pub efd_max: f64,
    pub efd_min: f64,
}
