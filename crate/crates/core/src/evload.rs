//! EV charging-station load models.
//!
//! Three station variants share one parameter set:
//!
//! * [`EvVariant::ChargingModule`]: exponential load capped at rated power,
//!   SoC-limited charging and saturated reactive support.
//! * [`EvVariant::DynamicPqControl`]: externally scheduled P with Q at a
//!   fixed 0.95 power factor.
//! * [`EvVariant::ExponentialOnly`]: uncontrolled exponential P and Q.
//!
//! The voltage-dependent variants pass their static characteristic through
//! the dynamic-load lead-lag `(1 + s T_p) / (1 + s T_s)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::FirstOrderStage;
use crate::metrics::ConstraintCheck;
use crate::netmodel::{units, BusId};
use crate::powerflow::BusLoad;

/// Minimum power factor for EV reactive exchange.
pub const PF_MIN: f64 = 0.95;
pub const SOC_MAX: f64 = 0.90;
pub const SOC_MIN: f64 = 0.10;
pub const CHARGE_EFFICIENCY: f64 = 0.96;
pub const R_LEAD_MIN_OHM: f64 = 0.01;
pub const R_LEAD_MAX_OHM: f64 = 0.09;

/// tan(acos(0.95)): reactive-to-active ratio at the minimum power factor.
pub fn q_per_p() -> f64 {
    PF_MIN.acos().tan()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvError {
    #[error("voltage collapsed at EV bus (v = {0})")]
    VoltageCollapse(f64),
    #[error("invalid time step {0}")]
    InvalidStep(f64),
    #[error("invalid lag time constant t_s = {0}")]
    InvalidLag(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvVariant {
    ChargingModule,
    DynamicPqControl,
    ExponentialOnly,
}

impl EvVariant {
    pub const ALL: [EvVariant; 3] = [EvVariant::ChargingModule, EvVariant::DynamicPqControl, EvVariant::ExponentialOnly];

    pub fn label(self) -> &'static str {
        match self {
            EvVariant::ChargingModule => "charging_module",
            EvVariant::DynamicPqControl => "dynamic_pq_control",
            EvVariant::ExponentialOnly => "exponential_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvExponentialParams {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub p0: f64,
    pub v0: f64,
}

impl EvExponentialParams {
    /// Normalized characteristic `a (v/v0)^alpha + b`.
    pub fn shape(&self, v: f64) -> Result<f64, EvError> {
        if !(v > 0.0) {
            return Err(EvError::VoltageCollapse(v));
        }
        Ok(self.a * (v / self.v0).powf(self.alpha) + self.b)
    }
}

pub fn ev_power_exponential(v: f64, p: &EvExponentialParams) -> Result<f64, EvError> {
    Ok(p.p0 * p.shape(v)?)
}

/// Dynamic-load lag with voltage exponent `n_p`. `state` is `(x, u_prev)`,
/// unset until the first update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicLoadLag {
    pub n_p: f64,
    pub t_p: f64,
    pub t_s: f64,
    pub state: Option<(f64, f64)>,
}

impl DynamicLoadLag {
    pub fn new(n_p: f64, t_p: f64, t_s: f64) -> Self {
        Self { n_p, t_p, t_s, state: None }
    }

    pub fn stage(&self) -> FirstOrderStage {
        FirstOrderStage::lead_lag(self.t_p, self.t_s)
    }
}

/// Advances the lead-lag by `dt` with the bus at voltage `v`; returns the
/// active power and the updated lag. An unset lag starts in steady state.
pub fn ev_dynamic_response(
    v: f64,
    v0: f64,
    dt: f64,
    lag: &DynamicLoadLag,
    p0: f64,
) -> Result<(f64, DynamicLoadLag), EvError> {
    if !(dt > 0.0) {
        return Err(EvError::InvalidStep(dt));
    }
    if !(lag.t_s > 0.0) {
        return Err(EvError::InvalidLag(lag.t_s));
    }
    if !(v > 0.0) {
        return Err(EvError::VoltageCollapse(v));
    }
    let u = (v / v0).powf(lag.n_p);
    let stage = lag.stage();
    let (x0, u0) = lag.state.unwrap_or((stage.steady_state(u), u));
    let x1 = stage.trapezoidal_step(x0, u0, u, dt);
    let y = stage.output(u, x1);
    let mut next = *lag;
    next.state = Some((x1, u));
    Ok((p0 * y, next))
}

/// Reactive power a station can exchange at active loading `p_now`: the
/// apparent-power headroom, capped so the power factor stays at or above 0.95.
pub fn reactive_capability(p_now: f64, s_rated: f64) -> f64 {
    let p = p_now.max(0.0);
    let headroom = (s_rated * s_rated - p * p).max(0.0).sqrt();
    headroom.min(p * q_per_p())
}

/// Piecewise-constant schedule, right-continuous at each switching instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub initial: f64,
    /// `(time_s, level)` pairs in increasing time order.
    pub steps: Vec<(f64, f64)>,
}

impl StepSchedule {
    pub fn constant(level: f64) -> Self {
        Self { initial: level, steps: Vec::new() }
    }

    pub fn step_at(t: f64, from: f64, to: f64) -> Self {
        Self { initial: from, steps: vec![(t, to)] }
    }

    pub fn level(&self, t: f64) -> f64 {
        self.steps.iter().take_while(|(ts, _)| *ts <= t).last().map_or(self.initial, |&(_, l)| l)
    }
}

pub fn pq_step_control(p_rated: f64, t: f64, schedule: &StepSchedule) -> (f64, f64) {
    let p = schedule.level(t) * p_rated;
    (p, p * q_per_p())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvStation {
    pub variant: EvVariant,
    /// Bus the station draws from (the spur leaf bus once attached).
    pub bus: BusId,
    pub r_lead_ohm: f64,
    pub rated_kv: f64,
    pub s_rated_kva: f64,
    pub soc: f64,
    pub soc_max: f64,
    pub soc_min: f64,
    pub efficiency: f64,
    pub pf_min: f64,
    pub capacity_kwh: f64,
    pub v2g_enabled: bool,
    pub exp_params: EvExponentialParams,
    pub lag: DynamicLoadLag,
}

impl EvStation {
    /// Station with the fixed SoC window, efficiency and power-factor limit.
    /// `p0` is set from the rating at 0.95 power factor on system base `s_base`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        variant: EvVariant,
        bus: BusId,
        s_rated_kva: f64,
        rated_kv: f64,
        r_lead_ohm: f64,
        a: f64,
        b: f64,
        alpha: f64,
        lag: DynamicLoadLag,
        soc0: f64,
        capacity_kwh: f64,
        s_base: f64,
    ) -> Self {
        let s_rated_pu = units::mw_to_pu(s_rated_kva / 1000.0, s_base);
        Self {
            variant,
            bus,
            r_lead_ohm,
            rated_kv,
            s_rated_kva,
            soc: soc0.clamp(SOC_MIN, SOC_MAX),
            soc_max: SOC_MAX,
            soc_min: SOC_MIN,
            efficiency: CHARGE_EFFICIENCY,
            pf_min: PF_MIN,
            capacity_kwh,
            v2g_enabled: false,
            exp_params: EvExponentialParams { a, b, alpha, p0: PF_MIN * s_rated_pu, v0: 1.0 },
            lag,
        }
    }

    pub fn s_rated_pu(&self, s_base: f64) -> f64 {
        units::mw_to_pu(self.s_rated_kva / 1000.0, s_base)
    }

    pub fn p_rated(&self) -> f64 {
        self.exp_params.p0
    }

    /// Lead resistance on the system base at the station's rated voltage.
    pub fn r_lead_pu(&self, s_base: f64) -> f64 {
        units::ohm_to_pu(self.r_lead_ohm, self.rated_kv, s_base)
    }

    /// Voltage-dependent gain fed to the lag: `(v/v0)^n_p (a (v/v0)^alpha + b)`.
    pub fn static_gain(&self, v: f64) -> Result<f64, EvError> {
        let shape = self.exp_params.shape(v)?;
        Ok((v / self.exp_params.v0).powf(self.lag.n_p) * shape)
    }

    /// Demand `(P, Q)` for a filtered gain `y` (or the scheduled level for
    /// the PQ-controlled variant), before lead losses.
    pub fn demand_from_gain(&self, y: f64, s_base: f64) -> (f64, f64) {
        let p0 = self.p_rated();
        match self.variant {
            EvVariant::ChargingModule => {
                if self.soc >= self.soc_max {
                    return (0.0, 0.0);
                }
                let p = (p0 * y).clamp(0.0, p0);
                (p, -reactive_capability(p, self.s_rated_pu(s_base)))
            }
            EvVariant::DynamicPqControl => {
                let p = p0 * y;
                (p, p * q_per_p())
            }
            EvVariant::ExponentialOnly => {
                let p = p0 * y;
                (p, p * q_per_p())
            }
        }
    }

    /// Adds the I^2 R loss in the lead resistance at bus voltage `v`.
    pub fn with_lead_loss(&self, (p, q): (f64, f64), v: f64, s_base: f64) -> (f64, f64) {
        let v = v.max(1e-6);
        (p + self.r_lead_pu(s_base) * (p * p + q * q) / (v * v), q)
    }

    /// Steady-state demand at voltage `v` with the PQ schedule at `level`.
    pub fn static_demand(&self, v: f64, level: f64, s_base: f64) -> Result<(f64, f64), EvError> {
        let y = match self.variant {
            EvVariant::DynamicPqControl => level,
            _ => self.static_gain(v)? * level,
        };
        Ok(self.with_lead_loss(self.demand_from_gain(y, s_base), v, s_base))
    }
}

/// Station seen by the power-flow solver at full schedule.
pub struct StationLoad<'a> {
    pub station: &'a EvStation,
    pub s_base: f64,
}

impl BusLoad for StationLoad<'_> {
    fn bus(&self) -> BusId {
        self.station.bus
    }
    fn demand(&self, v: f64) -> (f64, f64) {
        // Below zero voltage the exponential term is undefined; let the
        // solver see a huge demand so it reports divergence.
        self.station.static_demand(v, 1.0, self.s_base).unwrap_or((1e12, 1e12))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SocStep {
    pub station: EvStation,
    /// Power actually exchanged, kW (positive = charging).
    pub p_effective_kw: f64,
}

/// Integrates stored energy over `dt_s` at requested power `p_kw`
/// (positive charges, negative discharges), keeping SoC inside its window.
pub fn soc_update(station: &EvStation, p_kw: f64, dt_s: f64) -> SocStep {
    let mut st = station.clone();
    if dt_s <= 0.0 || p_kw == 0.0 || st.capacity_kwh <= 0.0 {
        return SocStep { station: st, p_effective_kw: 0.0 };
    }
    let hours = dt_s / 3600.0;
    let p_eff = if p_kw > 0.0 {
        let room = (st.soc_max - st.soc).max(0.0) * st.capacity_kwh / st.efficiency;
        let e = (p_kw * hours).min(room);
        st.soc = (st.soc + st.efficiency * e / st.capacity_kwh).min(st.soc_max);
        e / hours
    } else if st.v2g_enabled {
        let avail = (st.soc - st.soc_min).max(0.0) * st.capacity_kwh * st.efficiency;
        let e = (-p_kw * hours).min(avail);
        st.soc = (st.soc - e / (st.efficiency * st.capacity_kwh)).max(st.soc_min);
        -e / hours
    } else {
        0.0
    };
    SocStep { station: st, p_effective_kw: p_eff }
}

/// Parameter-range checks on the exponential coefficients and lead resistance.
pub fn validate_ev_params(station: &EvStation) -> Vec<ConstraintCheck> {
    let p = &station.exp_params;
    vec![
        ConstraintCheck::at_most("alpha <= -1", "<= -1", p.alpha, -1.0),
        ConstraintCheck::within("0.05 <= a <= 0.07", "[0.05, 0.07]", p.a, 0.05, 0.07),
        ConstraintCheck::within("0.93 <= b <= 0.95", "[0.93, 0.95]", p.b, 0.93, 0.95),
        ConstraintCheck::within(
            "0.01 ohm <= R_L <= 0.09 ohm",
            "[0.01, 0.09] ohm",
            station.r_lead_ohm,
            R_LEAD_MIN_OHM,
            R_LEAD_MAX_OHM,
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(a: f64, b: f64, alpha: f64) -> EvExponentialParams {
        EvExponentialParams { a, b, alpha, p0: 1.0, v0: 1.0 }
    }

    fn station(variant: EvVariant) -> EvStation {
        EvStation::new(variant, 10, 20_000.0, 5.0, 0.05, 0.06, 0.94, -1.0, DynamicLoadLag::new(0.0, 0.0, 0.2), 0.5, 100.0, 100.0)
    }

    #[test]
    fn exponential_hand_values() {
        assert_eq!(ev_power_exponential(1.0, &params(0.06, 0.94, -3.0)).unwrap(), 1.0);
        let p = ev_power_exponential(0.95, &params(0.05, 0.95, -1.0)).unwrap();
        assert!((p - (0.05 / 0.95 + 0.95)).abs() < 1e-12);
        assert!((p - 1.00263).abs() < 1e-5);
        let p = ev_power_exponential(0.9, &params(0.07, 0.93, -2.0)).unwrap();
        assert!((p - (0.07 / 0.81 + 0.93)).abs() < 1e-12);
        assert!((p - 1.01642).abs() < 1e-5);
    }

    #[test]
    fn exponential_rejects_collapsed_voltage() {
        assert_eq!(ev_power_exponential(0.0, &params(0.06, 0.94, -1.0)), Err(EvError::VoltageCollapse(0.0)));
    }

    #[test]
    fn exponential_decreasing_in_voltage() {
        let p = params(0.06, 0.94, -1.5);
        let grid: Vec<f64> = (1..=300).map(|k| k as f64 * 0.005).collect();
        for w in grid.windows(2) {
            assert!(ev_power_exponential(w[1], &p).unwrap() < ev_power_exponential(w[0], &p).unwrap());
        }
    }

    #[test]
    fn dynamic_response_steady_state_unity() {
        let mut lag = DynamicLoadLag { state: Some((0.0, 0.0)), ..DynamicLoadLag::new(2.0, 0.0, 0.5) };
        let mut p = 0.0;
        for _ in 0..10_000 {
            (p, lag) = ev_dynamic_response(1.0, 1.0, 1e-3, &lag, 3.0).unwrap();
        }
        assert!((p - 3.0).abs() < 1e-6);
    }

    #[test]
    fn dynamic_response_pole_zero_cancellation() {
        let mut lag = DynamicLoadLag { state: Some((0.3, 0.3)), ..DynamicLoadLag::new(2.0, 0.7, 0.7) };
        for k in 0..100 {
            let v = 1.0 - 0.001 * k as f64;
            let (p, next) = ev_dynamic_response(v, 1.0, 1e-2, &lag, 1.0).unwrap();
            assert!((p - v * v).abs() < 1e-12);
            lag = next;
        }
    }

    #[test]
    fn dynamic_response_step_relaxes_with_time_constant() {
        // Start in steady state at v = 1, then hold v = 0.95.
        let (_, mut lag) = ev_dynamic_response(1.0, 1.0, 1e-3, &DynamicLoadLag::new(2.0, 0.0, 1.0), 1.0).unwrap();
        let dt = 1e-3;
        for k in 1..=3000 {
            let (p, next) = ev_dynamic_response(0.95, 1.0, dt, &lag, 1.0).unwrap();
            lag = next;
            let t = k as f64 * dt;
            let expected = 0.9025 + (1.0 - 0.9025) * (-t).exp();
            assert!((p - expected).abs() < 1e-4, "t={t}: {p} vs {expected}");
        }
    }

    #[test]
    fn dynamic_response_rejects_bad_inputs() {
        let lag = DynamicLoadLag::new(1.0, 0.0, 1.0);
        assert!(ev_dynamic_response(1.0, 1.0, 0.0, &lag, 1.0).is_err());
        assert!(ev_dynamic_response(1.0, 1.0, 1e-3, &DynamicLoadLag::new(1.0, 0.0, 0.0), 1.0).is_err());
    }

    #[test]
    fn reactive_capability_cases() {
        assert_eq!(reactive_capability(1.0, 1.0), 0.0);
        assert!((reactive_capability(0.95, 1.0) - (1.0f64 - 0.9025).sqrt()).abs() < 1e-12);
        assert!((reactive_capability(0.95, 1.0) - 0.3122).abs() < 1e-4);
        // No active loading: the power-factor cap is zero.
        assert_eq!(reactive_capability(0.0, 1.0), 1.0f64.min(0.0));
        assert!(reactive_capability(0.5, 1.0) <= 0.5 * q_per_p() + 1e-15);
    }

    #[test]
    fn pq_control_cases() {
        let (p, q) = pq_step_control(1.0, 0.0, &StepSchedule::constant(1.0));
        assert_eq!(p, 1.0);
        assert!((q - 0.32868).abs() < 1e-5);
        assert_eq!(pq_step_control(1.0, 5.0, &StepSchedule::constant(0.0)), (0.0, 0.0));
        let sched = StepSchedule::step_at(16.0, 0.0, 1.0);
        assert_eq!(pq_step_control(2.0, 15.999_999, &sched).0, 0.0);
        assert_eq!(pq_step_control(2.0, 16.0, &sched).0, 2.0);
    }

    #[test]
    fn soc_clamps_at_upper_limit() {
        let mut st = station(EvVariant::ChargingModule);
        st.soc = 0.90;
        let step = soc_update(&st, 50.0, 60.0);
        assert_eq!(step.station.soc, 0.90);
        assert_eq!(step.p_effective_kw, 0.0);
    }

    #[test]
    fn soc_zero_dt_is_identity() {
        let st = station(EvVariant::ChargingModule);
        assert_eq!(soc_update(&st, 50.0, 0.0).station, st);
    }

    #[test]
    fn soc_energy_balance_single_step() {
        let st = station(EvVariant::ChargingModule);
        // Oracle: 0.50 + 0.96 * 96 kW * 1 h / 100 kWh = 1.4216, clamped.
        let raw: f64 = 0.50 + 0.96 * 96.0 * 1.0 / 100.0;
        assert!((raw - 1.4216).abs() < 1e-12);
        let step = soc_update(&st, 96.0, 3600.0);
        assert_eq!(step.station.soc, 0.90);
        // Only the energy that fits is drawn: 0.4 * 100 / 0.96 kWh over one hour.
        assert!((step.p_effective_kw - 40.0 / 0.96).abs() < 1e-9);
        let small = soc_update(&st, 96.0, 60.0);
        assert!((small.station.soc - (0.5 + 0.96 * 96.0 / 60.0 / 100.0)).abs() < 1e-12);
    }

    #[test]
    fn discharge_disabled_by_default() {
        let st = station(EvVariant::ChargingModule);
        let step = soc_update(&st, -50.0, 600.0);
        assert_eq!(step.station.soc, st.soc);
        assert_eq!(step.p_effective_kw, 0.0);
    }

    #[test]
    fn validation_reports() {
        let st = station(EvVariant::ExponentialOnly);
        assert!(validate_ev_params(&st).iter().all(|c| c.pass));
        let mut bad = st.clone();
        bad.exp_params.alpha = 0.0;
        let rep = validate_ev_params(&bad);
        assert!(!rep[0].pass && rep[0].observed == 0.0);
        assert!(rep[1..].iter().all(|c| c.pass));
        let mut bad = st;
        bad.r_lead_ohm = 0.5;
        let rep = validate_ev_params(&bad);
        assert!(!rep[3].pass && rep[3].observed == 0.5);
    }

    #[test]
    fn charging_module_injects_reactive_power() {
        let st = station(EvVariant::ChargingModule);
        let (p, q) = st.demand_from_gain(1.0, 100.0);
        assert!((p - 0.19).abs() < 1e-12);
        assert!(q < 0.0 && (-q - reactive_capability(0.19, 0.2)).abs() < 1e-15);
        let full = EvStation { soc: 0.9, ..st };
        assert_eq!(full.demand_from_gain(1.0, 100.0), (0.0, 0.0));
    }

    proptest! {
        #[test]
        fn soc_window_holds(steps in proptest::collection::vec((-500.0f64..500.0, 0.0f64..7200.0), 1..60), v2g in any::<bool>(), soc0 in 0.1f64..0.9) {
            let mut st = station(EvVariant::ChargingModule);
            st.v2g_enabled = v2g;
            st.soc = soc0;
            for (p, dt) in steps {
                st = soc_update(&st, p, dt).station;
                prop_assert!(st.soc >= SOC_MIN && st.soc <= SOC_MAX);
            }
        }

        #[test]
        fn pq_power_factor_exact(p_rated in 1e-3f64..10.0, level in 1e-3f64..2.0) {
            let (p, q) = pq_step_control(p_rated, 0.0, &StepSchedule::constant(level));
            prop_assert!((p / p.hypot(q) - PF_MIN).abs() < 1e-12);
        }
    }
}
