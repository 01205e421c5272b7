//! Multi-machine time-domain simulation.
//!
//! Differential states are integrated with the implicit trapezoidal rule; the
//! network is re-solved at every function evaluation. Static loads become
//! constant admittances at the initial voltages; EV stations, PV farms and
//! load steps stay as voltage-dependent power injections.
//!
//! Generators use a one-axis model with saliency (`x_q` on the q-axis, `x'_d`
//! behind `E'_q` on the d-axis) in a frame rotating at nominal speed, with
//! `δ` measured to the q-axis.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use super::agc::AgcParams;
use super::events::{EventAction, EventSchedule};
use super::machine::MachineSys;
use super::pss::MbPssParams;
use crate::evload::{soc_update, EvStation, EvVariant, StationLoad};
use crate::netmodel::{BusId, Network};
use crate::powerflow::{build_ybus, solve_with_loads, BusLoad, PfOptions, PowerFlowSolution};
use crate::pvfarm::PvInjection;

pub const DEFAULT_DT_S: f64 = 1e-3;
/// Power-flow tolerance used when building the initial equilibrium.
pub const INIT_PF_TOL: f64 = 1e-10;

const NG: usize = 15;
const DELTA: usize = 0;
const DW: usize = 1;
const EQ: usize = 2;
const EFD: usize = 3;
const PGV: usize = 4;
const PM: usize = 5;
const PSS0: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("initialization failed: {0}")]
    Init(String),
    #[error("network solution failed at t = {t:.4} s: {reason}")]
    NetworkSolve { t: f64, reason: String },
    #[error("integrator did not converge at t = {t:.4} s")]
    NoConvergence { t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Controls {
    pub pss_on: bool,
    pub agc_on: bool,
}

impl Default for Controls {
    fn default() -> Self {
        Self { pss_on: true, agc_on: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MachineModel {
    #[default]
    OneAxis,
    /// Constant EMF behind transient reactance, no exciter or stabilizer.
    Classical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicConfig {
    pub pss: MbPssParams,
    pub agc: AgcParams,
    pub controls: Controls,
    pub model: MachineModel,
    /// Infinity-norm tolerance on the implicit-step Newton update.
    pub newton_tol: f64,
}

impl DynamicConfig {
    pub fn new(n_gen: usize) -> Self {
        Self {
            pss: MbPssParams::default(),
            agc: AgcParams::equal(n_gen, super::agc::DEFAULT_K_I),
            controls: Controls::default(),
            model: MachineModel::OneAxis,
            newton_tol: 1e-11,
        }
    }
}

#[derive(Debug, Clone)]
struct Gen {
    bus: BusId,
    idx: usize,
    m: MachineSys,
    p_ref: f64,
    v_ref: f64,
    share: f64,
}

/// Everything that stays fixed during a run.
#[derive(Debug, Clone)]
pub struct DynamicModel {
    bus_ids: Vec<BusId>,
    /// Network plus constant-admittance loads, real 2n form `[G -B; B G]`.
    y_real: DMatrix<f64>,
    gens: Vec<Gen>,
    stations: Vec<(EvStation, usize)>,
    /// Host bus of each station's spur, if it sits on one.
    hosts: Vec<Option<BusId>>,
    fixed: Vec<(usize, f64, f64)>,
    s_base: f64,
    omega_s: f64,
    f_sys: f64,
    k_i_sys: f64,
    h_total: f64,
    config: DynamicConfig,
}

/// Full simulation state: differential states, the network voltages that go
/// with them, and the switchable configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicState {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<Complex64>,
    pub ev_on: Vec<bool>,
    pub stations: Vec<EvStation>,
    /// Constant-power load steps `(bus index, p, q)`.
    pub steps: Vec<(usize, f64, f64)>,
    pub deriv: Vec<f64>,
    /// Per machine: `1` while the field voltage sits on its upper limit,
    /// `-1` on the lower one, `0` otherwise.
    pub efd_limit: Vec<i8>,
}

impl DynamicState {
    pub fn delta(&self, g: usize) -> f64 {
        self.x[g * NG + DELTA]
    }
    pub fn dw(&self, g: usize) -> f64 {
        self.x[g * NG + DW]
    }
    pub fn eq(&self, g: usize) -> f64 {
        self.x[g * NG + EQ]
    }
    pub fn efd(&self, g: usize) -> f64 {
        self.x[g * NG + EFD]
    }
    pub fn pm(&self, g: usize) -> f64 {
        self.x[g * NG + PM]
    }
    pub fn pss_states(&self, g: usize) -> [[f64; 3]; 3] {
        let s = &self.x[g * NG + PSS0..g * NG + PSS0 + 9];
        [[s[0], s[1], s[2]], [s[3], s[4], s[5]], [s[6], s[7], s[8]]]
    }
    pub fn agc_integral(&self, n_gen: usize) -> f64 {
        self.x[n_gen * NG]
    }
}

/// Algebraic quantities for one machine at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenOutputs {
    pub p_e: f64,
    pub q_e: f64,
    pub v_t: f64,
    pub u_pss: f64,
}

fn rot(theta: f64) -> (f64, f64) {
    (theta.cos(), theta.sin())
}

impl DynamicModel {
    /// Solves the initial power flow (EVs in `ev_on` connected, PV farms
    /// injecting) and builds the model and its equilibrium state.
    pub fn initialize(
        net: &Network,
        stations: Vec<EvStation>,
        ev_on: Vec<bool>,
        pv: &[PvInjection],
        config: DynamicConfig,
    ) -> Result<(Self, DynamicState), DynError> {
        if ev_on.len() != stations.len() {
            return Err(DynError::InvalidInput("ev_on length differs from station count".into()));
        }
        let loads_owned: Vec<StationLoad> =
            stations.iter().zip(&ev_on).filter(|(_, on)| **on).map(|(s, _)| StationLoad { station: s, s_base: net.s_base }).collect();
        let mut loads: Vec<&dyn BusLoad> = loads_owned.iter().map(|l| l as &dyn BusLoad).collect();
        loads.extend(pv.iter().map(|p| p as &dyn BusLoad));
        let opts = PfOptions { tol: INIT_PF_TOL, max_iter: 50, ..Default::default() };
        let sol = solve_with_loads(net, &loads, &opts, None).map_err(|e| DynError::Init(e.to_string()))?;
        Self::initialize_from(net, &sol, stations, ev_on, pv, config)
    }

    /// Builds the model around an already converged power flow of `net`
    /// with the same EV and PV injections.
    pub fn initialize_from(
        net: &Network,
        sol: &PowerFlowSolution,
        stations: Vec<EvStation>,
        ev_on: Vec<bool>,
        pv: &[PvInjection],
        config: DynamicConfig,
    ) -> Result<(Self, DynamicState), DynError> {
        config.pss.validate().map_err(DynError::InvalidInput)?;
        config.agc.validate(net.generators.len()).map_err(DynError::InvalidInput)?;
        if !(config.newton_tol > 0.0) {
            return Err(DynError::InvalidInput("newton_tol must be positive".into()));
        }
        let n = net.buses.len();
        let ybus = build_ybus(net).map_err(|e| DynError::Init(e.to_string()))?;
        let mut y = ybus.to_dense();
        for (i, b) in net.buses.iter().enumerate() {
            let v2 = sol.v_mag[i] * sol.v_mag[i];
            y[(i, i)] += Complex64::new(b.p_load, -b.q_load) / v2;
        }
        let mut y_real = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                let c = y[(i, j)];
                y_real[(i, j)] = c.re;
                y_real[(i, j + n)] = -c.im;
                y_real[(i + n, j)] = c.im;
                y_real[(i + n, j + n)] = c.re;
            }
        }
        let shares = config.agc.shares();
        let mut gens = Vec::new();
        for (g, spec) in net.generators.iter().enumerate() {
            spec.machine.validate().map_err(|e| DynError::InvalidInput(format!("generator at bus {}: {e}", spec.bus)))?;
            if net.generators_at(spec.bus).count() > 1 {
                return Err(DynError::InvalidInput(format!("more than one machine at bus {}", spec.bus)));
            }
            let mut m = spec.machine.on_system_base(spec.mva_base, net.s_base);
            if config.model == MachineModel::Classical {
                m.xq = m.xd_t;
            }
            gens.push(Gen { bus: spec.bus, idx: net.bus_index(spec.bus).expect("validated"), m, p_ref: 0.0, v_ref: 0.0, share: shares[g] });
        }
        let h_total = gens.iter().map(|g| g.m.h).sum();
        let stations_idx = stations
            .iter()
            .map(|s| {
                net.bus_index(s.bus).map(|i| (s.clone(), i)).ok_or_else(|| DynError::InvalidInput(format!("EV station at unknown bus {}", s.bus)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let hosts = stations.iter().map(|s| net.attachments.iter().find(|a| a.leaf == s.bus).map(|a| a.host)).collect();
        let fixed = pv
            .iter()
            .map(|p| {
                let (dp, dq) = p.demand(1.0);
                net.bus_index(p.bus).map(|i| (i, dp, dq)).ok_or_else(|| DynError::InvalidInput(format!("PV farm at unknown bus {}", p.bus)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        // The integral gain is per-unit on the system base.
        let k_i_sys = config.agc.k_i;
        let mut model = Self {
            bus_ids: net.buses.iter().map(|b| b.id).collect(),
            y_real,
            gens,
            stations: stations_idx,
            hosts,
            fixed,
            s_base: net.s_base,
            omega_s: 2.0 * PI * net.f_sys,
            f_sys: net.f_sys,
            k_i_sys,
            h_total,
            config,
        };

        let generation = sol.generation(net);
        let n_state = model.n_states();
        let mut x = vec![0.0; n_state];
        for (g, gen) in model.gens.iter().enumerate() {
            let v = sol.voltage(gen.idx);
            let (p, q) = generation[gen.idx];
            let i = (Complex64::new(p, q) / v).conj();
            let e = v + Complex64::new(0.0, gen.m.xq) * i;
            let delta = e.arg();
            let r = Complex64::from_polar(1.0, -(delta - PI / 2.0));
            let (vdq, idq) = (v * r, i * r);
            let eq = vdq.im + gen.m.xd_t * idq.re;
            let o = g * NG;
            x[o + DELTA] = delta;
            x[o + EQ] = eq;
        }
        for (k, (st, _)) in model.stations.iter().enumerate() {
            if ev_on[k] {
                let v = sol.v_mag[model.stations[k].1];
                x[model.ev_offset() + k] = st.static_gain(v).map_err(|e| DynError::Init(e.to_string()))?;
            }
        }
        let v0: Vec<Complex64> = (0..n).map(|i| sol.voltage(i)).collect();
        let mut state = DynamicState {
            t: 0.0,
            x,
            v: v0,
            ev_on,
            stations: stations.clone(),
            steps: Vec::new(),
            deriv: vec![0.0; n_state],
            efd_limit: vec![0; model.gens.len()],
        };
        // Re-solve the network with the machine states, then close the
        // remaining loops so every derivative vanishes.
        let v = model.solve_network(&state.x, &state, &state.v)?;
        for g in 0..model.gens.len() {
            let o = g * NG;
            let gen = &model.gens[g];
            let (vd, vq, id, iq) = model.dq(gen, &state.x[o..o + NG], v[gen.idx]);
            let p_e = vd * id + vq * iq;
            let efd = match model.config.model {
                MachineModel::OneAxis => state.x[o + EQ] + (gen.m.xd - gen.m.xd_t) * id,
                MachineModel::Classical => 0.0,
            };
            if efd > gen.m.efd_max || efd < gen.m.efd_min {
                return Err(DynError::Init(format!("field voltage {efd:.3} at bus {} outside its limits", gen.bus)));
            }
            state.x[o + EFD] = efd;
            state.x[o + PGV] = p_e;
            state.x[o + PM] = p_e;
            let gen = &mut model.gens[g];
            gen.p_ref = p_e;
            gen.v_ref = v[gen.idx].norm() + efd / gen.m.k_a;
        }
        state.v = v;
        let (deriv, v) = model.eval(&state.x, &state)?;
        state.deriv = deriv;
        state.v = v;
        Ok((model, state))
    }

    pub fn n_states(&self) -> usize {
        self.gens.len() * NG + 1 + self.stations.len()
    }

    fn ev_offset(&self) -> usize {
        self.gens.len() * NG + 1
    }

    pub fn n_gen(&self) -> usize {
        self.gens.len()
    }

    pub fn gen_buses(&self) -> Vec<BusId> {
        self.gens.iter().map(|g| g.bus).collect()
    }

    pub fn config(&self) -> &DynamicConfig {
        &self.config
    }

    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.bus_ids.iter().position(|&b| b == id)
    }

    /// Terminal quantities in the machine frame: `(v_d, v_q, i_d, i_q)`.
    fn dq(&self, gen: &Gen, xs: &[f64], v: Complex64) -> (f64, f64, f64, f64) {
        let r = Complex64::from_polar(1.0, -(xs[DELTA] - PI / 2.0));
        let vdq = v * r;
        let id = (xs[EQ] - vdq.im) / gen.m.xd_t;
        let iq = vdq.re / gen.m.xq;
        (vdq.re, vdq.im, id, iq)
    }

    /// Demand `(P, Q)` of station `k` at voltage `v` with lag state `xl`.
    fn station_demand(&self, st: &EvStation, on: bool, v: f64, xl: f64) -> Result<(f64, f64), String> {
        if !on {
            return Ok((0.0, 0.0));
        }
        let y = match st.variant {
            EvVariant::DynamicPqControl => 1.0,
            _ => {
                let u = st.static_gain(v).map_err(|e| e.to_string())?;
                st.lag.stage().output(u, xl)
            }
        };
        Ok(st.with_lead_loss(st.demand_from_gain(y, self.s_base), v, self.s_base))
    }

    /// Current injected by the voltage-dependent elements.
    fn nonlinear_injection(&self, x: &[f64], state: &DynamicState, v: &[Complex64]) -> Result<Vec<Complex64>, String> {
        let mut s = vec![Complex64::new(0.0, 0.0); v.len()];
        for &(i, p, q) in self.fixed.iter().chain(&state.steps) {
            s[i] += Complex64::new(p, q);
        }
        let off = self.ev_offset();
        for (k, (_, i)) in self.stations.iter().enumerate() {
            let (p, q) = self.station_demand(&state.stations[k], state.ev_on[k], v[*i].norm(), x[off + k])?;
            s[*i] += Complex64::new(p, q);
        }
        Ok(s
            .iter()
            .zip(v)
            .map(|(sd, vi)| if sd.norm() == 0.0 { Complex64::new(0.0, 0.0) } else { -(sd / vi).conj() })
            .collect())
    }

    /// Network voltages for the given machine states, by fixed-point
    /// iteration on the voltage-dependent injections.
    fn solve_network(&self, x: &[f64], state: &DynamicState, v_guess: &[Complex64]) -> Result<Vec<Complex64>, DynError> {
        let n = self.bus_ids.len();
        let mut a = self.y_real.clone();
        let mut b = DVector::zeros(2 * n);
        for (g, gen) in self.gens.iter().enumerate() {
            let xs = &x[g * NG..(g + 1) * NG];
            let (c, s) = rot(xs[DELTA] - PI / 2.0);
            // I = R(θ) M R(-θ) V + R(θ) [E'q / x'd, 0]
            let (m01, m10) = (-1.0 / gen.m.xd_t, 1.0 / gen.m.xq);
            // R M R^T with R = [[c,-s],[s,c]], M = [[0,m01],[m10,0]]
            let k00 = -s * c * (m10 + m01);
            let k01 = -s * s * m10 + c * c * m01;
            let k10 = c * c * m10 - s * s * m01;
            let k11 = s * c * (m10 + m01);
            let i = gen.idx;
            a[(i, i)] -= k00;
            a[(i, i + n)] -= k01;
            a[(i + n, i)] -= k10;
            a[(i + n, i + n)] -= k11;
            let e = xs[EQ] / gen.m.xd_t;
            b[i] += c * e;
            b[i + n] += s * e;
        }
        let t = state.t;
        let lu = a.lu();
        let mut v: Vec<Complex64> = v_guess.to_vec();
        for _ in 0..200 {
            let inj = self.nonlinear_injection(x, state, &v).map_err(|reason| DynError::NetworkSolve { t, reason })?;
            let mut rhs = b.clone();
            for (i, c) in inj.iter().enumerate() {
                rhs[i] += c.re;
                rhs[i + n] += c.im;
            }
            let sol = lu.solve(&rhs).ok_or_else(|| DynError::NetworkSolve { t, reason: "singular network matrix".into() })?;
            let mut change: f64 = 0.0;
            for i in 0..n {
                let vi = Complex64::new(sol[i], sol[i + n]);
                change = change.max((vi - v[i]).norm());
                v[i] = vi;
            }
            if !change.is_finite() {
                break;
            }
            if change < 1e-13 {
                return Ok(v);
            }
        }
        Err(DynError::NetworkSolve { t, reason: "voltage iteration did not converge".into() })
    }

    /// Derivatives and network voltages at states `x`.
    fn eval(&self, x: &[f64], state: &DynamicState) -> Result<(Vec<f64>, Vec<Complex64>), DynError> {
        let v = self.solve_network(x, state, &state.v)?;
        let mut dx = vec![0.0; x.len()];
        let ctl = self.config.controls;
        let z = x[self.gens.len() * NG];
        let mut coi = 0.0;
        for (g, gen) in self.gens.iter().enumerate() {
            let o = g * NG;
            let xs = &x[o..o + NG];
            let m = &gen.m;
            let (vd, vq, id, iq) = self.dq(gen, xs, v[gen.idx]);
            let p_e = vd * id + vq * iq;
            let dw = xs[DW];
            coi += m.h * dw;
            dx[o + DELTA] = self.omega_s * dw;
            dx[o + DW] = (xs[PM] - p_e - m.d * dw) / (2.0 * m.h);
            if self.config.model == MachineModel::OneAxis {
                dx[o + EQ] = (xs[EFD] - xs[EQ] - (m.xd - m.xd_t) * id) / m.td0_t;
                let u_pss = if ctl.pss_on { self.config.pss.output(dw, &pss_block(xs)) } else { 0.0 };
                // The limiter is a discrete mode so the step residual stays smooth.
                dx[o + EFD] = if state.efd_limit[g] == 0 {
                    (m.k_a * (gen.v_ref + u_pss - v[gen.idx].norm()) - xs[EFD]) / m.t_a
                } else {
                    0.0
                };
                if ctl.pss_on {
                    let blk = pss_block(xs);
                    for (b, band) in self.config.pss.bands.iter().enumerate() {
                        let d = band.derivatives(dw, &blk[b]);
                        dx[o + PSS0 + 3 * b..o + PSS0 + 3 * b + 3].copy_from_slice(&d);
                    }
                }
            }
            let p_set = gen.p_ref + if ctl.agc_on { gen.share * z } else { 0.0 };
            dx[o + PGV] = (p_set - m.inv_droop * dw - xs[PGV]) / m.t_g;
            dx[o + PM] = (xs[PGV] - xs[PM]) / m.t_t;
        }
        if ctl.agc_on {
            dx[self.gens.len() * NG] = -self.k_i_sys * self.f_sys * coi / self.h_total;
        }
        let off = self.ev_offset();
        for (k, (st, i)) in self.stations.iter().enumerate() {
            let target = if state.ev_on[k] && st.variant != EvVariant::DynamicPqControl {
                st.static_gain(v[*i].norm()).map_err(|e| DynError::NetworkSolve { t: state.t, reason: e.to_string() })?
            } else {
                0.0
            };
            dx[off + k] = st.lag.stage().derivative(target, x[off + k]);
        }
        Ok((dx, v))
    }

    /// Unlimited field-voltage derivative of machine `g`.
    fn efd_demand(&self, g: usize, x: &[f64], v: &[Complex64]) -> f64 {
        let gen = &self.gens[g];
        let xs = &x[g * NG..(g + 1) * NG];
        let u_pss = if self.config.controls.pss_on { self.config.pss.output(xs[DW], &pss_block(xs)) } else { 0.0 };
        (gen.m.k_a * (gen.v_ref + u_pss - v[gen.idx].norm()) - xs[EFD]) / gen.m.t_a
    }

    /// Machine outputs at the state.
    pub fn outputs(&self, state: &DynamicState) -> Vec<GenOutputs> {
        self.gens
            .iter()
            .enumerate()
            .map(|(g, gen)| {
                let xs = &state.x[g * NG..(g + 1) * NG];
                let (vd, vq, id, iq) = self.dq(gen, xs, state.v[gen.idx]);
                let u_pss = if self.config.controls.pss_on && self.config.model == MachineModel::OneAxis {
                    self.config.pss.output(xs[DW], &pss_block(xs))
                } else {
                    0.0
                };
                GenOutputs { p_e: vd * id + vq * iq, q_e: vq * id - vd * iq, v_t: state.v[gen.idx].norm(), u_pss }
            })
            .collect()
    }

    /// Total demand seen by the network at the state (constant-admittance
    /// loads plus voltage-dependent injections), for balance checks.
    pub fn total_demand(&self, state: &DynamicState) -> f64 {
        let n = self.bus_ids.len();
        // Network losses and admittance loads equal the net power absorbed
        // by the admittance matrix.
        let mut vr = DVector::zeros(2 * n);
        for i in 0..n {
            vr[i] = state.v[i].re;
            vr[i + n] = state.v[i].im;
        }
        let i = &self.y_real * &vr;
        let absorbed: f64 = (0..n).map(|k| vr[k] * i[k] + vr[k + n] * i[k + n]).sum();
        let inj = self.nonlinear_injection(&state.x, state, &state.v).unwrap_or_default();
        let nl: f64 = inj.iter().zip(&state.v).map(|(c, v)| -(v * c.conj()).re).sum();
        absorbed + nl
    }

    fn apply_action(&self, state: &mut DynamicState, action: &EventAction) -> Result<(), DynError> {
        let no_station = |bus: BusId| DynError::InvalidInput(format!("no EV station at bus {bus}"));
        match *action {
            EventAction::SwitchInEv { bus } => {
                let ks = self.stations_for(bus);
                if ks.is_empty() {
                    return Err(no_station(bus));
                }
                for k in ks {
                    state.ev_on[k] = true;
                }
            }
            EventAction::SwitchOutEv { bus } => {
                let ks = self.stations_for(bus);
                if ks.is_empty() {
                    return Err(no_station(bus));
                }
                for k in ks {
                    state.ev_on[k] = false;
                }
            }
            EventAction::LoadStep { bus, dp_mw, dq_mvar } => {
                let i = self.bus_index(bus).ok_or_else(|| DynError::InvalidInput(format!("load step at unknown bus {bus}")))?;
                state.steps.push((i, dp_mw / self.s_base, dq_mvar / self.s_base));
            }
        }
        Ok(())
    }

    /// Stations addressed by `bus`: their own bus or the host of their spur.
    fn stations_for(&self, bus: BusId) -> Vec<usize> {
        (0..self.stations.len()).filter(|&k| self.stations[k].0.bus == bus || self.hosts[k] == Some(bus)).collect()
    }
}

fn pss_block(xs: &[f64]) -> [[f64; 3]; 3] {
    let s = &xs[PSS0..PSS0 + 9];
    [[s[0], s[1], s[2]], [s[3], s[4], s[5]], [s[6], s[7], s[8]]]
}

/// Implicit trapezoidal stepper with a cached iteration matrix.
pub struct Simulator<'a> {
    model: &'a DynamicModel,
    lu: Option<(f64, nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>)>,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a DynamicModel) -> Self {
        Self { model, lu: None }
    }

    /// Drops the cached iteration matrix (after a discrete change).
    pub fn invalidate(&mut self) {
        self.lu = None;
    }

    fn factor(&mut self, x: &[f64], state: &DynamicState, dt: f64) -> Result<(), DynError> {
        let n = x.len();
        let (f0, _) = self.model.eval(x, state)?;
        let mut j = DMatrix::identity(n, n);
        let mut xp = x.to_vec();
        for c in 0..n {
            let h = 1e-7 * (1.0 + x[c].abs());
            xp[c] = x[c] + h;
            let (fp, _) = self.model.eval(&xp, state)?;
            xp[c] = x[c];
            for r in 0..n {
                j[(r, c)] -= 0.5 * dt * (fp[r] - f0[r]) / h;
            }
        }
        self.lu = Some((dt, j.lu()));
        Ok(())
    }

    /// Modified Newton on the trapezoidal residual; `false` when the cached
    /// matrix no longer contracts.
    fn newton(
        &self,
        x1: &mut [f64],
        trial: &mut DynamicState,
        x0: &[f64],
        f0: &[f64],
        dt: f64,
        tol: f64,
    ) -> Result<bool, DynError> {
        let lu = &self.lu.as_ref().expect("factored").1;
        let mut last = f64::INFINITY;
        for _ in 0..12 {
            let (f1, v1) = match self.model.eval(x1, trial) {
                Ok(r) => r,
                Err(_) if last.is_finite() => return Ok(false),
                Err(e) => return Err(e),
            };
            trial.v = v1;
            let r = DVector::from_iterator(x1.len(), (0..x1.len()).map(|k| x1[k] - x0[k] - 0.5 * dt * (f0[k] + f1[k])));
            let d = lu.solve(&r).ok_or(DynError::NoConvergence { t: trial.t })?;
            let norm = d.amax();
            for k in 0..x1.len() {
                x1[k] -= d[k];
            }
            let scale = 1.0 + x1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if norm < tol * scale {
                return Ok(true);
            }
            if !norm.is_finite() || norm > 0.5 * last {
                return Ok(false);
            }
            last = norm;
        }
        Ok(false)
    }

    /// Advances `state` by `dt`. A step whose iteration fails is retried as
    /// two half steps (down to 1/16 of `dt`).
    pub fn step(&mut self, state: &DynamicState, dt: f64) -> Result<DynamicState, DynError> {
        if !(dt > 0.0) {
            return Err(DynError::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        self.step_split(state, dt, 0)
    }

    fn step_split(&mut self, state: &DynamicState, dt: f64, depth: u32) -> Result<DynamicState, DynError> {
        match self.step_once(state, dt) {
            Err(DynError::NoConvergence { .. }) if depth < 4 => {
                self.lu = None;
                let mid = self.step_split(state, 0.5 * dt, depth + 1)?;
                let out = self.step_split(&mid, 0.5 * dt, depth + 1);
                self.lu = None;
                out
            }
            other => other,
        }
    }

    fn step_once(&mut self, state: &DynamicState, dt: f64) -> Result<DynamicState, DynError> {
        if self.lu.as_ref().is_some_and(|(h, _)| *h != dt) {
            self.lu = None;
        }
        let model = self.model;
        let x0 = &state.x;
        let f0 = &state.deriv;
        let mut x1: Vec<f64> = x0.iter().zip(f0).map(|(x, f)| x + dt * f).collect();
        let mut trial = state.clone();
        trial.t = state.t + dt;
        let tol = model.config.newton_tol;
        let mut attempts = 0;
        loop {
            if self.lu.is_none() {
                self.factor(&x1, &trial, dt)?;
            }
            if self.newton(&mut x1, &mut trial, x0, f0, dt, tol)? {
                break;
            }
            attempts += 1;
            if attempts >= 3 {
                return Err(DynError::NoConvergence { t: trial.t });
            }
            self.lu = None;
            x1 = x0.iter().zip(f0).map(|(x, f)| x + dt * f).collect();
        }
        // Field limiter: pin on crossing, release once the regulator pulls
        // back inside.
        let mut switched = false;
        for (g, gen) in model.gens.iter().enumerate().filter(|_| model.config.model == MachineModel::OneAxis) {
            let e = &mut x1[g * NG + EFD];
            if trial.efd_limit[g] == 0 {
                if *e > gen.m.efd_max || *e < gen.m.efd_min {
                    trial.efd_limit[g] = if *e > gen.m.efd_max { 1 } else { -1 };
                    *e = e.clamp(gen.m.efd_min, gen.m.efd_max);
                    switched = true;
                }
            } else if model.efd_demand(g, &x1, &trial.v) * f64::from(trial.efd_limit[g]) < 0.0 {
                trial.efd_limit[g] = 0;
                switched = true;
            }
        }
        trial.x = x1;
        let (f1, v1) = model.eval(&trial.x, &trial)?;
        trial.deriv = f1;
        trial.v = v1;
        if switched {
            self.lu = None;
        }
        // State of charge moves on the energy actually drawn this step.
        for (k, (st, i)) in model.stations.iter().enumerate() {
            if st.variant == EvVariant::ChargingModule && trial.ev_on[k] {
                let xl = trial.x[model.ev_offset() + k];
                let (p, _) = model
                    .station_demand(&trial.stations[k], true, trial.v[*i].norm(), xl)
                    .map_err(|reason| DynError::NetworkSolve { t: trial.t, reason })?;
                let before = trial.stations[k].soc >= trial.stations[k].soc_max;
                trial.stations[k] = soc_update(&trial.stations[k], p * model.s_base * 1000.0, dt).station;
                if !before && trial.stations[k].soc >= trial.stations[k].soc_max {
                    self.lu = None;
                }
            }
        }
        Ok(trial)
    }

    /// Applies discrete actions and refreshes the algebraic state.
    pub fn apply(&mut self, state: &mut DynamicState, actions: &[EventAction]) -> Result<(), DynError> {
        for a in actions {
            self.model.apply_action(state, a)?;
        }
        let (f, v) = self.model.eval(&state.x, state)?;
        state.deriv = f;
        state.v = v;
        self.lu = None;
        Ok(())
    }
}

/// One implicit trapezoidal step with a freshly built iteration matrix.
pub fn step_dynamics(model: &DynamicModel, state: &DynamicState, dt: f64) -> Result<DynamicState, DynError> {
    Simulator::new(model).step(state, dt)
}

/// Sampled simulation output.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub gen_buses: Vec<BusId>,
    pub t: Vec<f64>,
    /// `[generator][sample]`.
    pub freq_hz: Vec<Vec<f64>>,
    pub u_pss: Vec<Vec<f64>>,
    pub p_e: Vec<Vec<f64>>,
    pub v_t: Vec<Vec<f64>>,
}

impl Trace {
    fn new(gen_buses: Vec<BusId>) -> Self {
        let n = gen_buses.len();
        Self { gen_buses, t: Vec::new(), freq_hz: vec![Vec::new(); n], u_pss: vec![Vec::new(); n], p_e: vec![Vec::new(); n], v_t: vec![Vec::new(); n] }
    }

    fn record(&mut self, model: &DynamicModel, state: &DynamicState) {
        self.t.push(state.t);
        for (g, o) in model.outputs(state).iter().enumerate() {
            self.freq_hz[g].push(model.f_sys * (1.0 + state.dw(g)));
            self.u_pss[g].push(o.u_pss);
            self.p_e[g].push(o.p_e);
            self.v_t[g].push(o.v_t);
        }
    }

    /// `t_s,gen1_hz,...,u_pss_1,...` with fixed precision.
    pub fn csv(&self) -> String {
        let n = self.gen_buses.len();
        let mut out = String::from("t_s");
        for g in 1..=n {
            out.push_str(&format!(",gen{g}_hz"));
        }
        for g in 1..=n {
            out.push_str(&format!(",u_pss_{g}"));
        }
        out.push('\n');
        for k in 0..self.t.len() {
            out.push_str(&format!("{:.4}", self.t[k]));
            for g in 0..n {
                out.push_str(&format!(",{:.9}", self.freq_hz[g][k]));
            }
            for g in 0..n {
                out.push_str(&format!(",{:.9}", self.u_pss[g][k]));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub t_end: f64,
    pub dt: f64,
    /// Record every `decimation`-th step.
    pub decimation: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { t_end: 30.0, dt: DEFAULT_DT_S, decimation: 10 }
    }
}

/// A run that stopped early, with everything recorded up to the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFailure {
    pub partial: Trace,
    pub error: DynError,
}

/// Integrates from `initial` to `t_end`, applying each event at the step
/// whose start time matches the event time.
pub fn run_scenario(
    model: &DynamicModel,
    initial: &DynamicState,
    events: &EventSchedule,
    opts: &RunOptions,
) -> Result<Trace, ScenarioFailure> {
    let mut trace = Trace::new(model.gen_buses());
    let fail = |trace: &Trace, error| ScenarioFailure { partial: trace.clone(), error };
    if !(opts.dt > 0.0) || opts.decimation == 0 {
        return Err(fail(&trace, DynError::InvalidInput("dt must be positive and decimation at least 1".into())));
    }
    if let Some(last) = events.last_time() {
        if !(opts.t_end > last) {
            return Err(fail(&trace, DynError::InvalidInput(format!("event at {last} s is not before t_end {} s", opts.t_end))));
        }
    }
    let n_steps = (opts.t_end / opts.dt).round() as usize;
    let event_steps: Vec<usize> = events.events().iter().map(|e| (e.time_s / opts.dt).round() as usize).collect();
    let mut sim = Simulator::new(model);
    let mut state = initial.clone();
    let mut next_event = 0;
    trace.record(model, &state);
    for n in 0..n_steps {
        while next_event < event_steps.len() && event_steps[next_event] == n {
            if let Err(e) = sim.apply(&mut state, &events.events()[next_event].actions) {
                return Err(fail(&trace, e));
            }
            next_event += 1;
        }
        match sim.step(&state, opts.dt) {
            Ok(mut s) => {
                s.t = (n + 1) as f64 * opts.dt;
                state = s;
            }
            Err(e) => return Err(fail(&trace, e)),
        }
        if (n + 1) % opts.decimation == 0 || n + 1 == n_steps {
            trace.record(model, &state);
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::events::Event;
    use crate::evload::DynamicLoadLag;
    use crate::netmodel::{bundled_case, parse_case, AttachmentKind, DEFAULT_SPUR_OHM_PER_KM};

    const TWO_BUS: &str = r#"{
        "f_sys_hz": 60, "s_base_mva": 100,
        "buses": [
            {"id": 1, "kind": "slack", "base_kv": 230, "v_set_pu": 1.02},
            {"id": 2, "kind": "pq", "base_kv": 230, "p_load_mw": 80, "q_load_mvar": 20}
        ],
        "branches": [{"from": 1, "to": 2, "r_pu": 0.01, "x_pu": 0.1}],
        "generators": [{"bus": 1, "p_set_mw": 0, "v_set_pu": 1.02, "mva_base": 150}]
    }"#;

    fn two_bus(controls: Controls) -> (DynamicModel, DynamicState) {
        let net = parse_case(TWO_BUS).unwrap();
        let mut cfg = DynamicConfig::new(1);
        cfg.controls = controls;
        DynamicModel::initialize(&net, vec![], vec![], &[], cfg).unwrap()
    }

    fn nine_bus_with_evs(controls: Controls) -> (DynamicModel, DynamicState) {
        let mut net = bundled_case("ieee9").unwrap();
        let mut stations = vec![];
        for host in [7, 8, 9] {
            let (n2, leaf) = net.attach_spur(host, 5.0, DEFAULT_SPUR_OHM_PER_KM, AttachmentKind::Ev).unwrap();
            net = n2;
            let lag = DynamicLoadLag::new(0.0, 0.0, 0.5);
            stations.push(EvStation::new(EvVariant::ChargingModule, leaf, 22500.0, 5.0, 0.05, 0.06, 0.94, -1.0, lag, 0.5, 15000.0, 100.0));
        }
        let mut cfg = DynamicConfig::new(3);
        cfg.controls = controls;
        DynamicModel::initialize(&net, stations, vec![false; 3], &[], cfg).unwrap()
    }

    fn switch_in(t: f64) -> EventSchedule {
        let actions = [7, 8, 9].map(|bus| EventAction::SwitchInEv { bus }).to_vec();
        EventSchedule::new(vec![Event { time_s: t, actions }]).unwrap()
    }

    fn load_step(t: f64, dp_mw: f64) -> EventSchedule {
        EventSchedule::new(vec![Event { time_s: t, actions: vec![EventAction::LoadStep { bus: 2, dp_mw, dq_mvar: 0.0 }] }]).unwrap()
    }

    #[test]
    fn initial_state_is_an_equilibrium() {
        for model_kind in [MachineModel::OneAxis, MachineModel::Classical] {
            let net = bundled_case("ieee9").unwrap();
            let mut cfg = DynamicConfig::new(3);
            cfg.model = model_kind;
            let (_, st) = DynamicModel::initialize(&net, vec![], vec![], &[], cfg).unwrap();
            let worst = st.deriv.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            assert!(worst < 1e-8, "{model_kind:?}: {worst:e}");
        }
    }

    #[test]
    fn generation_matches_demand_at_equilibrium() {
        let (model, st) = nine_bus_with_evs(Controls::default());
        let gen: f64 = model.outputs(&st).iter().map(|o| o.p_e).sum();
        assert!((gen - model.total_demand(&st)).abs() < 1e-8);
        // Loads total 315 MW plus losses.
        assert!(gen > 3.15 && gen < 3.25, "{gen}");
    }

    #[test]
    fn no_event_run_holds_frequency() {
        let (model, st) = nine_bus_with_evs(Controls::default());
        let tr = run_scenario(&model, &st, &EventSchedule::empty(), &RunOptions { t_end: 20.0, ..Default::default() }).unwrap();
        for f in &tr.freq_hz {
            let worst = f.iter().fold(0.0f64, |m, x| m.max((x - 60.0).abs()));
            assert!(worst < 1e-6, "{worst:e}");
        }
    }

    #[test]
    fn ev_switch_in_dips_frequency_and_respects_pss_limit() {
        let (model, st) = nine_bus_with_evs(Controls::default());
        let tr = run_scenario(&model, &st, &switch_in(1.0), &RunOptions { t_end: 6.0, ..Default::default() }).unwrap();
        for g in 0..3 {
            let nadir = tr.freq_hz[g].iter().cloned().fold(f64::MAX, f64::min);
            assert!(nadir < 59.95 && nadir > 59.0, "{nadir}");
            assert!(tr.u_pss[g].iter().any(|u| u.abs() > 1e-3));
            assert!(tr.u_pss[g].iter().all(|u| u.abs() <= model.config().pss.global_limit + 1e-12));
        }
        assert_eq!(tr.t.len(), 601);
        assert!((tr.t[600] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn switched_on_stations_draw_rated_power() {
        let (model, st) = nine_bus_with_evs(Controls::default());
        let mut sim = Simulator::new(&model);
        let mut s = st.clone();
        let before = model.total_demand(&s);
        sim.apply(&mut s, &[EventAction::SwitchInEv { bus: 8 }]).unwrap();
        // The lag state starts at zero so nothing changes instantly.
        assert!((model.total_demand(&s) - before).abs() < 1e-9);
        for _ in 0..3000 {
            s = sim.step(&s, 1e-3).unwrap();
        }
        let added = model.total_demand(&s) - before;
        assert!(added > 0.15 && added < 0.3, "{added}");
    }

    #[test]
    fn trapezoidal_error_is_second_order() {
        let ctl = Controls { pss_on: false, agc_on: false };
        let (model, st) = two_bus(ctl);
        let ev = load_step(0.1, 20.0);
        let run = |dt: f64, dec: usize| {
            run_scenario(&model, &st, &ev, &RunOptions { t_end: 2.1, dt, decimation: dec }).unwrap().freq_hz[0].clone()
        };
        let reference = run(2e-4, 100);
        let coarse = run(2e-3, 10);
        let fine = run(1e-3, 20);
        let err = |a: &[f64]| a.iter().zip(&reference).fold(0.0f64, |m, (x, r)| m.max((x - r).abs()));
        let ratio = err(&coarse) / err(&fine);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn agc_restores_nominal_frequency() {
        let (model, st) = two_bus(Controls { pss_on: false, agc_on: true });
        let tr = run_scenario(&model, &st, &load_step(1.0, 10.0), &RunOptions { t_end: 60.0, ..Default::default() }).unwrap();
        let f = &tr.freq_hz[0];
        let nadir = f.iter().cloned().fold(f64::MAX, f64::min);
        assert!(nadir < 59.95);
        assert!((f.last().unwrap() - 60.0).abs() < 1e-3, "{}", f.last().unwrap());
        // Without AGC the droop leaves a steady offset.
        let (model, st) = two_bus(Controls { pss_on: false, agc_on: false });
        let tr = run_scenario(&model, &st, &load_step(1.0, 10.0), &RunOptions { t_end: 30.0, ..Default::default() }).unwrap();
        assert!(*tr.freq_hz[0].last().unwrap() < 59.99);
    }

    #[test]
    fn agc_participation_selects_the_regulating_unit() {
        let net = bundled_case("ieee9").unwrap();
        let mut cfg = DynamicConfig::new(3);
        cfg.controls.pss_on = false;
        cfg.agc.participation = vec![1.0, 0.0, 0.0];
        let (model, st) = DynamicModel::initialize(&net, vec![], vec![], &[], cfg).unwrap();
        let ev = EventSchedule::new(vec![Event { time_s: 1.0, actions: vec![EventAction::LoadStep { bus: 5, dp_mw: 20.0, dq_mvar: 0.0 }] }]).unwrap();
        let mut sim = Simulator::new(&model);
        let mut s = st.clone();
        for n in 0..80_000 {
            if n == 1000 {
                sim.apply(&mut s, &ev.events()[0].actions).unwrap();
            }
            s = sim.step(&s, 1e-3).unwrap();
        }
        for g in 0..3 {
            assert!(s.dw(g).abs() < 1e-5);
        }
        assert!((s.pm(1) - st.pm(1)).abs() < 1e-3, "{} {}", s.pm(1), st.pm(1));
        assert!((s.pm(2) - st.pm(2)).abs() < 1e-3);
        assert!(s.pm(0) - st.pm(0) > 0.19);
    }

    #[test]
    fn run_rejects_events_past_the_horizon() {
        let (model, st) = two_bus(Controls::default());
        let err = run_scenario(&model, &st, &load_step(16.0, 1.0), &RunOptions { t_end: 10.0, ..Default::default() }).unwrap_err();
        assert!(matches!(err.error, DynError::InvalidInput(_)));
        assert!(matches!(
            DynamicModel::initialize(&parse_case(TWO_BUS).unwrap(), vec![], vec![true], &[], DynamicConfig::new(1)),
            Err(DynError::InvalidInput(_))
        ));
    }

    #[test]
    fn unknown_station_bus_is_rejected() {
        let (model, st) = two_bus(Controls::default());
        let mut s = st.clone();
        let err = Simulator::new(&model).apply(&mut s, &[EventAction::SwitchInEv { bus: 2 }]).unwrap_err();
        assert!(matches!(err, DynError::InvalidInput(_)));
    }

    #[test]
    fn trace_csv_layout() {
        let (model, st) = two_bus(Controls::default());
        let tr = run_scenario(&model, &st, &EventSchedule::empty(), &RunOptions { t_end: 0.02, dt: 1e-3, decimation: 10 }).unwrap();
        let csv = tr.csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t_s,gen1_hz,u_pss_1");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0.0000,60.000000000,"));
    }
}
