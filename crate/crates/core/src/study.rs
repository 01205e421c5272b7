//! Scenario files and the study pipelines behind the command-line tool.
//!
//! A scenario names a case, EV and PV placements and per-study options.
//! Each pipeline returns its output files in a fixed order, and every file
//! carries the scenario hash and library version: CSV files in a leading
//! `#` comment line, JSON files under `meta`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{
    run_scenario, AgcParams, Controls, DynError, DynamicConfig, DynamicModel, Event, EventAction, EventSchedule,
    MachineModel, MbPssParams, RunOptions, Trace,
};
use crate::evload::{DynamicLoadLag, EvStation, EvVariant, StationLoad};
use crate::metrics::{
    ascending_ranks, check_system_constraints, frequency_metrics, ConstraintCheck, FrequencyMetrics, Settling,
    DEFAULT_ROCOF_WINDOW_S, DEFAULT_SETTLING_BAND_HZ, F_NOM_MAX_HZ, F_NOM_MIN_HZ, LINE_INDEX_LIMIT,
    ROCOF_LIMIT_HZPS,
};
use crate::netmodel::{load_case, AttachmentKind, BusId, NetError, Network, DEFAULT_SPUR_OHM_PER_KM};
use crate::powerflow::{solve_with_loads, BusLoad, PfError, PfOptions, PowerFlowSolution};
use crate::pvfarm::{sample_irradiance, PvFarm, PvInjection, RNG_ALGORITHM};
use crate::voltstab::{rank_weak_lines, trace_pv_curve, LineIndexReport, PvCurve, PvCurveOptions, VoltageEnd, VsError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Caps the worker pool used for independent runs.
pub const THREADS_ENV: &str = "GRIDSTAB_THREADS";

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid scenario: {0}")]
    Input(String),
    #[error(transparent)]
    Case(#[from] NetError),
    #[error("power flow: {0}")]
    PowerFlow(#[from] PfError),
    #[error("voltage stability: {0}")]
    Voltage(#[from] VsError),
    #[error("dynamics: {0}")]
    Dynamics(#[from] DynError),
    #[error("worker pool: {0}")]
    Pool(String),
}

impl StudyError {
    /// Whether the failure lies in the inputs rather than in a computation.
    pub fn is_input_error(&self) -> bool {
        match self {
            StudyError::Input(_) | StudyError::Case(_) => true,
            StudyError::PowerFlow(e) => matches!(e, PfError::InvalidOptions(_) | PfError::UnknownBus(_)),
            StudyError::Voltage(e) => matches!(e, VsError::InvalidStep(_) | VsError::UnknownBus(_) | VsError::NoLoad(_)),
            StudyError::Dynamics(e) => matches!(e, DynError::InvalidInput(_)),
            StudyError::Pool(_) => false,
        }
    }
}

fn input(msg: impl Into<String>) -> StudyError {
    StudyError::Input(msg.into())
}

// ---------------------------------------------------------------------------
// Scenario schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Bundled case name (`ieee9`, `ieee39`) or path to a case file.
    pub case: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ev: Vec<EvPlacement>,
    #[serde(default)]
    pub pv: Vec<PvPlacement>,
    /// Extra events on top of the EV switch-ins.
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default)]
    pub powerflow: PowerFlowStudy,
    #[serde(default)]
    pub pvcurve: PvCurveStudy,
    #[serde(default)]
    pub indices: IndicesStudy,
    #[serde(default)]
    pub dynamics: DynamicsStudy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvParams {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub n_p: f64,
    pub t_p: f64,
    pub t_s: f64,
}

impl Default for EvParams {
    fn default() -> Self {
        Self { a: 0.06, b: 0.94, alpha: -1.0, n_p: 0.0, t_p: 0.0, t_s: 0.5 }
    }
}

/// A charging station on a spur hung off `bus`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvPlacement {
    pub bus: BusId,
    #[serde(default = "default_variant")]
    pub variant: EvVariant,
    /// Rating of one charger.
    #[serde(default = "default_charger_kva")]
    pub s_rated_kva: f64,
    /// Chargers aggregated into the station.
    #[serde(default = "default_vehicles")]
    pub vehicles: u32,
    #[serde(default = "default_ev_kv")]
    pub rated_kv: f64,
    #[serde(default)]
    pub params: EvParams,
    #[serde(default = "default_r_lead")]
    pub r_lead_ohm: f64,
    #[serde(default = "default_soc0")]
    pub soc0: f64,
    /// Battery capacity per vehicle.
    #[serde(default = "default_capacity")]
    pub capacity_kwh: f64,
    /// `null` connects the station from the start.
    #[serde(default = "default_switch")]
    pub switch_time_s: Option<f64>,
    #[serde(default = "default_ev_spur")]
    pub spur_km: f64,
}

impl EvPlacement {
    pub fn at(bus: BusId) -> Self {
        Self {
            bus,
            variant: default_variant(),
            s_rated_kva: default_charger_kva(),
            vehicles: default_vehicles(),
            rated_kv: default_ev_kv(),
            params: EvParams::default(),
            r_lead_ohm: default_r_lead(),
            soc0: default_soc0(),
            capacity_kwh: default_capacity(),
            switch_time_s: default_switch(),
            spur_km: default_ev_spur(),
        }
    }

    fn station(&self, leaf: BusId, variant: EvVariant, s_base: f64) -> EvStation {
        let n = f64::from(self.vehicles);
        let p = &self.params;
        EvStation::new(
            variant,
            leaf,
            self.s_rated_kva * n,
            self.rated_kv,
            self.r_lead_ohm,
            p.a,
            p.b,
            p.alpha,
            DynamicLoadLag::new(p.n_p, p.t_p, p.t_s),
            self.soc0,
            self.capacity_kwh * n,
            s_base,
        )
    }
}

fn default_variant() -> EvVariant {
    EvVariant::ChargingModule
}
fn default_charger_kva() -> f64 {
    150.0
}
fn default_vehicles() -> u32 {
    1
}
fn default_ev_kv() -> f64 {
    5.0
}
fn default_r_lead() -> f64 {
    0.05
}
fn default_soc0() -> f64 {
    0.5
}
fn default_capacity() -> f64 {
    100.0
}
fn default_switch() -> Option<f64> {
    Some(PAPER_SWITCH_TIME_S)
}
fn default_ev_spur() -> f64 {
    5.0
}

/// A PV farm on a spur hung off `bus`. Its irradiance is drawn once per
/// scenario and held for every study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvPlacement {
    pub bus: BusId,
    #[serde(default = "default_pv_mw")]
    pub p_b_mw: f64,
    /// Defaults to the scenario seed offset by the placement index.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_pv_spur")]
    pub spur_km: f64,
    #[serde(default)]
    pub two_draw: bool,
}

impl PvPlacement {
    pub fn at(bus: BusId) -> Self {
        Self { bus, p_b_mw: default_pv_mw(), seed: None, spur_km: default_pv_spur(), two_draw: false }
    }
}

fn default_pv_mw() -> f64 {
    5.0
}
fn default_pv_spur() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerFlowStudy {
    pub tol: f64,
    pub max_iter: usize,
    pub enforce_q_limits: bool,
}

impl Default for PowerFlowStudy {
    fn default() -> Self {
        let d = PfOptions::default();
        Self { tol: d.tol, max_iter: d.max_iter, enforce_q_limits: d.enforce_q_limits }
    }
}

impl PowerFlowStudy {
    fn options(&self) -> PfOptions {
        PfOptions { tol: self.tol, max_iter: self.max_iter, flat_start: true, enforce_q_limits: self.enforce_q_limits }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PvCurveStudy {
    /// Empty selects the case's critical bus.
    pub buses: Vec<BusId>,
    pub step: f64,
    pub pf_held: bool,
    /// EV model used at every station, one curve each.
    pub variants: Vec<EvVariant>,
}

impl Default for PvCurveStudy {
    fn default() -> Self {
        Self { buses: Vec::new(), step: 0.02, pf_held: true, variants: EvVariant::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicesStudy {
    /// Multipliers on every static reactive load; 1 is the base case.
    pub reactive_steps: Vec<f64>,
    pub voltage_end: VoltageEnd,
    pub variants: Vec<EvVariant>,
}

impl Default for IndicesStudy {
    fn default() -> Self {
        Self { reactive_steps: vec![1.0, 1.5, 2.0, 2.5, 3.0], voltage_end: VoltageEnd::Receiving, variants: EvVariant::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsStudy {
    pub t_end_s: f64,
    pub dt_s: f64,
    pub decimation: usize,
    /// Run matrix: EV model × PSS × AGC.
    pub variants: Vec<EvVariant>,
    pub pss_on: Vec<bool>,
    pub agc_on: Vec<bool>,
    pub model: MachineModel,
    /// Overrides the default multi-band stabilizer.
    pub pss: Option<MbPssParams>,
    pub agc_k_i: f64,
    /// Overrides equal AGC participation.
    pub participation: Option<Vec<f64>>,
    pub newton_tol: f64,
    pub settling_band_hz: f64,
    pub rocof_window_s: f64,
}

impl Default for DynamicsStudy {
    fn default() -> Self {
        Self {
            t_end_s: DEFAULT_STUDY_T_END_S,
            dt_s: crate::dynamics::sim::DEFAULT_DT_S,
            decimation: 10,
            variants: EvVariant::ALL.to_vec(),
            pss_on: vec![true, false],
            agc_on: vec![true],
            model: MachineModel::OneAxis,
            pss: None,
            agc_k_i: crate::dynamics::agc::DEFAULT_K_I,
            participation: None,
            newton_tol: 1e-11,
            settling_band_hz: DEFAULT_SETTLING_BAND_HZ,
            rocof_window_s: DEFAULT_ROCOF_WINDOW_S,
        }
    }
}

/// Long enough for the AGC to finish after a 16 s disturbance, so the
/// settling metric sees a steady tail.
pub const DEFAULT_STUDY_T_END_S: f64 = 60.0;
pub const PAPER_SWITCH_TIME_S: f64 = 16.0;
/// Chargers per station in the paper preset.
pub const PAPER_VEHICLES: u32 = 150;

/// EV host buses of the paper placements for a bundled case.
pub fn paper_ev_buses(case: &str) -> Option<&'static [BusId]> {
    match case {
        "ieee9" => Some(&[7, 8, 9]),
        "ieee39" => Some(&[15, 17, 26, 27]),
        _ => None,
    }
}

/// Critical bus of the P-V study for a bundled case.
pub fn paper_critical_bus(case: &str) -> Option<BusId> {
    match case {
        "ieee9" => Some(6),
        "ieee39" => Some(12),
        _ => None,
    }
}

impl ScenarioConfig {
    pub fn for_case(case: impl Into<String>) -> Self {
        Self {
            case: case.into(),
            seed: 0,
            ev: Vec::new(),
            pv: Vec::new(),
            events: Vec::new(),
            powerflow: PowerFlowStudy::default(),
            pvcurve: PvCurveStudy::default(),
            indices: IndicesStudy::default(),
            dynamics: DynamicsStudy::default(),
        }
    }

    /// The paper's setup: a station of 150 chargers on a 5 km spur and a PV
    /// farm on a 1 km spur at each EV bus, switched in at 16 s.
    pub fn paper_preset(case: impl Into<String>) -> Result<Self, StudyError> {
        let mut cfg = Self::for_case(case);
        let net = cfg.network()?;
        cfg.apply_paper_preset(&net.name)?;
        Ok(cfg)
    }

    /// Replaces the placements with the paper's for the named bundled case.
    pub fn apply_paper_preset(&mut self, case_name: &str) -> Result<(), StudyError> {
        let buses = paper_ev_buses(case_name).ok_or_else(|| input(format!("no paper preset for case '{case_name}'")))?;
        self.ev = buses.iter().map(|&b| EvPlacement { vehicles: PAPER_VEHICLES, ..EvPlacement::at(b) }).collect();
        self.pv = buses.iter().map(|&b| PvPlacement::at(b)).collect();
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, StudyError> {
        serde_json::from_str(text).map_err(|e| input(format!("scenario: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("scenario serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn network(&self) -> Result<Network, StudyError> {
        Ok(load_case(&self.case)?)
    }

    fn validate(&self, net: &Network) -> Result<(), StudyError> {
        for e in &self.ev {
            net.bus(e.bus).map_err(|_| input(format!("EV placement at unknown bus {}", e.bus)))?;
            let ok = e.s_rated_kva > 0.0 && e.vehicles > 0 && e.rated_kv > 0.0 && e.capacity_kwh > 0.0 && e.spur_km >= 0.0;
            if !ok {
                return Err(input(format!("EV placement at bus {}: ratings must be positive", e.bus)));
            }
            if !(e.params.t_s > 0.0 && e.params.t_p >= 0.0) {
                return Err(input(format!("EV placement at bus {}: need t_s > 0 and t_p >= 0", e.bus)));
            }
            if let Some(t) = e.switch_time_s {
                if !(t.is_finite() && t >= 0.0) {
                    return Err(input(format!("EV placement at bus {}: bad switch time {t}", e.bus)));
                }
            }
        }
        for p in &self.pv {
            net.bus(p.bus).map_err(|_| input(format!("PV placement at unknown bus {}", p.bus)))?;
            if !(p.p_b_mw > 0.0 && p.spur_km >= 0.0) {
                return Err(input(format!("PV placement at bus {}: p_b_mw must be positive", p.bus)));
            }
        }
        let d = &self.dynamics;
        if !(d.dt_s > 0.0 && d.t_end_s > 0.0 && d.decimation > 0) {
            return Err(input("dynamics: dt_s, t_end_s and decimation must be positive"));
        }
        if !(d.settling_band_hz > 0.0 && d.rocof_window_s > 0.0) {
            return Err(input("dynamics: settling band and ROCOF window must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct OutputFile {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutput {
    pub files: Vec<OutputFile>,
    /// Runs that stopped early; their partial traces are still written.
    pub failures: Vec<String>,
}

struct Provenance {
    hash: String,
}

impl Provenance {
    fn new(cfg: &ScenarioConfig) -> Self {
        Self { hash: cfg.hash() }
    }

    fn csv(&self, name: impl Into<String>, body: &str) -> OutputFile {
        OutputFile { name: name.into(), contents: format!("# gridstab {VERSION} scenario {}\n{body}", self.hash) }
    }

    fn json(&self, name: impl Into<String>, mut body: Value, extra_meta: Value) -> OutputFile {
        let mut meta = json!({ "version": VERSION, "scenario_hash": self.hash });
        if let (Some(m), Some(extra)) = (meta.as_object_mut(), extra_meta.as_object()) {
            m.extend(extra.clone());
        }
        body["meta"] = meta;
        OutputFile { name: name.into(), contents: serde_json::to_string_pretty(&body).expect("json") + "\n" }
    }
}

fn round(x: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (x * s).round() / s
}

// ---------------------------------------------------------------------------
// Prepared network
// ---------------------------------------------------------------------------

/// Network with spurs attached and the station / farm models built.
pub struct Prepared {
    pub net: Network,
    pub stations: Vec<EvStation>,
    pub switch_times: Vec<Option<f64>>,
    pub pv: Vec<PvInjection>,
    pub irradiance: Vec<f64>,
}

impl Prepared {
    /// All stations at full schedule plus the PV farms, as power-flow loads.
    pub fn loads(&self) -> (Vec<StationLoad<'_>>, &[PvInjection]) {
        let st = self.stations.iter().map(|s| StationLoad { station: s, s_base: self.net.s_base }).collect();
        (st, &self.pv)
    }

    pub fn with_variant(&self, variant: EvVariant) -> Vec<EvStation> {
        self.stations.iter().map(|s| EvStation { variant, ..s.clone() }).collect()
    }

    fn solve(&self, stations: &[EvStation], opts: &PfOptions) -> Result<PowerFlowSolution, PfError> {
        let st: Vec<StationLoad> = stations.iter().map(|s| StationLoad { station: s, s_base: self.net.s_base }).collect();
        let loads: Vec<&dyn BusLoad> = st.iter().map(|l| l as &dyn BusLoad).chain(self.pv.iter().map(|p| p as &dyn BusLoad)).collect();
        solve_with_loads(&self.net, &loads, opts, None)
    }
}

pub fn prepare(cfg: &ScenarioConfig) -> Result<Prepared, StudyError> {
    let mut net = cfg.network()?;
    cfg.validate(&net)?;
    let mut stations = Vec::new();
    let mut switch_times = Vec::new();
    for e in &cfg.ev {
        let (n2, leaf) = net.attach_spur(e.bus, e.spur_km, DEFAULT_SPUR_OHM_PER_KM, AttachmentKind::Ev)?;
        net = n2;
        stations.push(e.station(leaf, e.variant, net.s_base));
        switch_times.push(e.switch_time_s);
    }
    let mut pv = Vec::new();
    let mut irradiance = Vec::new();
    for (k, p) in cfg.pv.iter().enumerate() {
        let (n2, leaf) = net.attach_spur(p.bus, p.spur_km, DEFAULT_SPUR_OHM_PER_KM, AttachmentKind::Pv)?;
        net = n2;
        let seed = p.seed.unwrap_or(cfg.seed.wrapping_add(k as u64));
        let farm = PvFarm { two_draw: p.two_draw, spur_km: p.spur_km, ..PvFarm::new(leaf, p.p_b_mw / net.s_base, seed) };
        let g = sample_irradiance(&farm, &mut farm.rng());
        pv.push(PvInjection::at(&farm, leaf, g));
        irradiance.push(g);
    }
    Ok(Prepared { net, stations, switch_times, pv, irradiance })
}

fn pv_meta(prep: &Prepared) -> Value {
    json!({
        "rng": RNG_ALGORITHM,
        "pv_irradiance_wm2": prep.irradiance,
    })
}

// ---------------------------------------------------------------------------
// Power flow
// ---------------------------------------------------------------------------

/// Base case with every station at full schedule.
pub fn powerflow_study(cfg: &ScenarioConfig) -> Result<StudyOutput, StudyError> {
    let prov = Provenance::new(cfg);
    let prep = prepare(cfg)?;
    let sol = prep.solve(&prep.stations, &cfg.powerflow.options())?;
    let s_base = prep.net.s_base;
    let (p_loss, q_loss) = sol.total_losses();
    let gens: Vec<Value> = prep
        .net
        .generators
        .iter()
        .zip(sol.generation(&prep.net))
        .map(|(g, (p, q))| json!({ "bus": g.bus, "p_mw": round(p * s_base, 6), "q_mvar": round(q * s_base, 6) }))
        .collect();
    let summary = json!({
        "case": prep.net.name,
        "converged": true,
        "iterations": sol.iterations,
        "max_mismatch_pu": sol.max_mismatch,
        "losses_mw": round(p_loss * s_base, 6),
        "losses_mvar": round(q_loss * s_base, 6),
        "generators": gens,
        "ev_buses": cfg.ev.iter().map(|e| e.bus).collect::<Vec<_>>(),
        "pv_buses": cfg.pv.iter().map(|p| p.bus).collect::<Vec<_>>(),
    });
    Ok(StudyOutput {
        files: vec![
            prov.csv("buses.csv", &sol.bus_csv(s_base)),
            prov.csv("branches.csv", &sol.branch_csv(s_base)),
            prov.json("powerflow.json", summary, pv_meta(&prep)),
        ],
        failures: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// P-V curves
// ---------------------------------------------------------------------------

fn pv_buses(cfg: &ScenarioConfig, net: &Network) -> Result<Vec<BusId>, StudyError> {
    if !cfg.pvcurve.buses.is_empty() {
        for &b in &cfg.pvcurve.buses {
            net.bus(b).map_err(|_| input(format!("P-V study at unknown bus {b}")))?;
        }
        return Ok(cfg.pvcurve.buses.clone());
    }
    paper_critical_bus(&net.name).map(|b| vec![b]).ok_or_else(|| input("pvcurve.buses is empty and the case has no default critical bus"))
}

/// One P-V curve per bus and EV model.
pub fn pv_curves(cfg: &ScenarioConfig) -> Result<Vec<(BusId, EvVariant, PvCurve)>, StudyError> {
    let prep = prepare(cfg)?;
    let buses = pv_buses(cfg, &prep.net)?;
    if cfg.pvcurve.variants.is_empty() {
        return Err(input("pvcurve.variants is empty"));
    }
    let opts = PvCurveOptions { step: cfg.pvcurve.step, pf_held: cfg.pvcurve.pf_held, pf: cfg.powerflow.options(), ..Default::default() };
    let jobs: Vec<(BusId, EvVariant)> =
        buses.iter().flat_map(|&b| cfg.pvcurve.variants.iter().map(move |&v| (b, v))).collect();
    let results: Vec<Result<(BusId, EvVariant, PvCurve), StudyError>> = with_pool(|| {
        jobs.par_iter()
            .map(|&(bus, variant)| {
                let stations = prep.with_variant(variant);
                let st: Vec<StationLoad> = stations.iter().map(|s| StationLoad { station: s, s_base: prep.net.s_base }).collect();
                let loads: Vec<&dyn BusLoad> =
                    st.iter().map(|l| l as &dyn BusLoad).chain(prep.pv.iter().map(|p| p as &dyn BusLoad)).collect();
                Ok((bus, variant, trace_pv_curve(&prep.net, &loads, bus, &opts)?))
            })
            .collect()
    })?;
    results.into_iter().collect()
}

pub fn pvcurve_study(cfg: &ScenarioConfig) -> Result<StudyOutput, StudyError> {
    let prov = Provenance::new(cfg);
    let curves = pv_curves(cfg)?;
    let mut files = Vec::new();
    let mut noses = Vec::new();
    let mut by_bus: BTreeMap<BusId, Vec<(EvVariant, &PvCurve)>> = BTreeMap::new();
    for (bus, variant, curve) in &curves {
        by_bus.entry(*bus).or_default().push((*variant, curve));
        noses.push(json!({
            "bus": bus,
            "variant": variant.label(),
            "load_scale": round(curve.nose.load_scale, 6),
            "p_critical_mw": round(curve.nose.p_load_mw, 6),
            "v_critical_pu": round(curve.nose.v_mag, 6),
            "points": curve.points.len(),
        }));
    }
    for (bus, list) in &by_bus {
        files.push(prov.csv(format!("pv_bus{bus}.csv"), &overlay_csv(list)));
    }
    let body = json!({ "noses": noses, "step": cfg.pvcurve.step, "pf_held": cfg.pvcurve.pf_held });
    files.push(prov.json("pv_noses.json", body, json!({})));
    Ok(StudyOutput { files, failures: Vec::new() })
}

/// One row per load scale; a `p_mw`/`v_pu` column pair per EV model, blank
/// where that model's curve has no point.
fn overlay_csv(curves: &[(EvVariant, &PvCurve)]) -> String {
    let mut rows: BTreeMap<String, Vec<Option<(f64, f64)>>> = BTreeMap::new();
    for (k, (_, c)) in curves.iter().enumerate() {
        for p in &c.points {
            let key = format!("{:012.6}", p.load_scale);
            rows.entry(key).or_insert_with(|| vec![None; curves.len()])[k] = Some((p.p_load_mw, p.v_mag));
        }
    }
    let mut out = String::from("scale");
    for (v, _) in curves {
        out.push_str(&format!(",p_mw_{0},v_pu_{0}", v.label()));
    }
    out.push('\n');
    for (key, cells) in rows {
        out.push_str(&format!("{:.6}", key.parse::<f64>().expect("formatted number")));
        for c in cells {
            match c {
                Some((p, v)) => out.push_str(&format!(",{p:.6},{v:.6}")),
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Line indices
// ---------------------------------------------------------------------------

/// Ranked line indices for each EV model at each reactive loading step.
/// A step whose power flow fails yields `Err` with the reason.
pub fn line_indices(cfg: &ScenarioConfig) -> Result<Vec<(EvVariant, f64, Result<Vec<LineIndexReport>, String>)>, StudyError> {
    let prep = prepare(cfg)?;
    if cfg.indices.variants.is_empty() || cfg.indices.reactive_steps.is_empty() {
        return Err(input("indices: need at least one variant and one reactive step"));
    }
    if cfg.indices.reactive_steps.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(input("indices: reactive steps must be finite and non-negative"));
    }
    let opts = cfg.powerflow.options();
    let mut out = Vec::new();
    for &variant in &cfg.indices.variants {
        let stations = prep.with_variant(variant);
        for &step in &cfg.indices.reactive_steps {
            let mut stepped = Prepared { net: prep.net.clone(), stations: Vec::new(), switch_times: Vec::new(), pv: prep.pv.clone(), irradiance: Vec::new() };
            for b in &mut stepped.net.buses {
                b.q_load *= step;
            }
            let res = match stepped.solve(&stations, &opts) {
                Ok(sol) => {
                    let mut ranked = rank_weak_lines(&stepped.net, &sol, cfg.indices.voltage_end)?;
                    for r in &mut ranked {
                        r.at_scale = step;
                    }
                    Ok(ranked)
                }
                Err(e) => Err(e.to_string()),
            };
            out.push((variant, step, res));
        }
    }
    Ok(out)
}

/// Weak-line ranking at the base loading with every station on.
pub fn base_ranking(cfg: &ScenarioConfig, variant: EvVariant) -> Result<Vec<LineIndexReport>, StudyError> {
    let prep = prepare(cfg)?;
    let sol = prep.solve(&prep.with_variant(variant), &cfg.powerflow.options())?;
    Ok(rank_weak_lines(&prep.net, &sol, cfg.indices.voltage_end)?)
}

fn line_json(r: &LineIndexReport, s_base: f64) -> Value {
    json!({
        "from": r.branch.0,
        "to": r.branch.1,
        "fvsi": round(r.fvsi, 9),
        "nlsi": round(r.nlsi, 9),
        "q_receiving_mvar": round(r.q_receiving * s_base, 6),
    })
}

pub fn indices_study(cfg: &ScenarioConfig) -> Result<StudyOutput, StudyError> {
    let prov = Provenance::new(cfg);
    let s_base = cfg.network()?.s_base;
    let series = line_indices(cfg)?;
    let mut csv = String::from("variant,reactive_step,rank,from,to,fvsi,nlsi,q_receiving_mvar\n");
    let mut blocks = Vec::new();
    for (variant, step, res) in &series {
        match res {
            Ok(ranked) => {
                for (k, r) in ranked.iter().enumerate() {
                    csv.push_str(&format!(
                        "{},{},{},{},{},{:.9},{:.9},{:.6}\n",
                        variant.label(),
                        step,
                        k + 1,
                        r.branch.0,
                        r.branch.1,
                        r.fvsi,
                        r.nlsi,
                        r.q_receiving * s_base
                    ));
                }
                blocks.push(json!({
                    "variant": variant.label(),
                    "reactive_step": step,
                    "status": "ok",
                    "lines": ranked.iter().map(|r| line_json(r, s_base)).collect::<Vec<_>>(),
                }));
            }
            Err(reason) => blocks.push(json!({
                "variant": variant.label(),
                "reactive_step": step,
                "status": "failed",
                "reason": reason,
            })),
        }
    }
    let body = json!({ "voltage_end": cfg.indices.voltage_end, "limit": LINE_INDEX_LIMIT, "series": blocks });
    Ok(StudyOutput { files: vec![prov.csv("indices.csv", &csv), prov.json("indices.json", body, json!({}))], failures: Vec::new() })
}

// ---------------------------------------------------------------------------
// Dynamics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RunKey {
    pub variant: EvVariant,
    pub pss_on: bool,
    pub agc_on: bool,
}

impl RunKey {
    pub fn label(&self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        format!("{}_pss-{}_agc-{}", self.variant.label(), on(self.pss_on), on(self.agc_on))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub key: RunKey,
    pub trace: Trace,
    pub metrics: Vec<FrequencyMetrics>,
    pub failure: Option<String>,
    pub t_dist: f64,
}

fn run_keys(d: &DynamicsStudy) -> Result<Vec<RunKey>, StudyError> {
    if d.variants.is_empty() || d.pss_on.is_empty() || d.agc_on.is_empty() {
        return Err(input("dynamics: the run matrix is empty"));
    }
    let mut keys: Vec<RunKey> = d
        .variants
        .iter()
        .flat_map(|&variant| d.pss_on.iter().flat_map(move |&pss_on| d.agc_on.iter().map(move |&agc_on| RunKey { variant, pss_on, agc_on })))
        .collect();
    keys.sort();
    keys.dedup();
    Ok(keys)
}

fn schedule(cfg: &ScenarioConfig, prep: &Prepared) -> Result<EventSchedule, StudyError> {
    let mut grouped: BTreeMap<u64, (f64, Vec<EventAction>)> = BTreeMap::new();
    let mut push = |t: f64, a: EventAction| {
        grouped.entry(t.to_bits()).or_insert_with(|| (t, Vec::new())).1.push(a);
    };
    for (st, t) in prep.stations.iter().zip(&prep.switch_times) {
        if let Some(t) = t {
            push(*t, EventAction::SwitchInEv { bus: st.bus });
        }
    }
    for e in &cfg.events {
        for a in &e.actions {
            push(e.time_s, a.clone());
        }
    }
    // Non-negative finite times order the same as their bit patterns.
    let events = grouped.into_values().map(|(time_s, actions)| Event { time_s, actions }).collect();
    EventSchedule::new(events).map_err(input)
}

fn dynamic_config(d: &DynamicsStudy, n_gen: usize, key: RunKey) -> DynamicConfig {
    let mut c = DynamicConfig::new(n_gen);
    if let Some(p) = d.pss {
        c.pss = p;
    }
    c.agc = match &d.participation {
        Some(p) => AgcParams { k_i: d.agc_k_i, participation: p.clone() },
        None => AgcParams::equal(n_gen, d.agc_k_i),
    };
    c.controls = Controls { pss_on: key.pss_on, agc_on: key.agc_on };
    c.model = d.model;
    c.newton_tol = d.newton_tol;
    c
}

fn run_one(cfg: &ScenarioConfig, prep: &Prepared, events: &EventSchedule, key: RunKey) -> Result<RunResult, StudyError> {
    let d = &cfg.dynamics;
    let stations = prep.with_variant(key.variant);
    let ev_on = prep.switch_times.iter().map(|t| t.is_none()).collect();
    let config = dynamic_config(d, prep.net.generators.len(), key);
    let (model, state) = DynamicModel::initialize(&prep.net, stations, ev_on, &prep.pv, config)?;
    let opts = RunOptions { t_end: d.t_end_s, dt: d.dt_s, decimation: d.decimation };
    let (trace, failure) = match run_scenario(&model, &state, events, &opts) {
        Ok(tr) => (tr, None),
        Err(f) if matches!(f.error, DynError::InvalidInput(_)) => return Err(f.error.into()),
        Err(f) => (f.partial, Some(f.error.to_string())),
    };
    let t_dist = events.events().first().map_or(0.0, |e| e.time_s);
    let mut metrics = Vec::new();
    if failure.is_none() {
        for g in 0..trace.gen_buses.len() {
            let m = frequency_metrics(g + 1, &trace.t, &trace.freq_hz[g], t_dist, d.rocof_window_s, d.settling_band_hz)
                .map_err(|e| input(format!("metrics: {e}")))?;
            metrics.push(m);
        }
    }
    Ok(RunResult { key, trace, metrics, failure, t_dist })
}

/// Runs the EV model × PSS × AGC matrix in parallel, ordered by run key.
pub fn dynamic_runs(cfg: &ScenarioConfig) -> Result<Vec<RunResult>, StudyError> {
    let prep = prepare(cfg)?;
    let keys = run_keys(&cfg.dynamics)?;
    let events = schedule(cfg, &prep)?;
    if let Some(last) = events.last_time() {
        if !(cfg.dynamics.t_end_s > last) {
            return Err(input(format!("dynamics: t_end_s {} is not after the last event at {last} s", cfg.dynamics.t_end_s)));
        }
    }
    let results: Vec<Result<RunResult, StudyError>> = with_pool(|| keys.par_iter().map(|&k| run_one(cfg, &prep, &events, k)).collect())?;
    results.into_iter().collect()
}

fn settle_value(s: Settling) -> Value {
    s.time().map_or(Value::Null, |t| json!(round(t, 6)))
}

fn metrics_json(r: &RunResult) -> Value {
    json!({
        "variant": r.key.variant.label(),
        "pss_on": r.key.pss_on,
        "agc_on": r.key.agc_on,
        "status": if r.failure.is_some() { "failed" } else { "ok" },
        "error": r.failure,
        "samples": r.trace.t.len(),
        "generators": r.metrics.iter().map(|m| json!({
            "generator": m.generator,
            "bus": r.trace.gen_buses[m.generator - 1],
            "nadir_hz": round(m.f_nadir, 9),
            "rocof_hzps": round(m.rocof_max, 9),
            "settle_s": settle_value(m.settle),
            "settled": m.settle.time().is_some(),
            "f_steady_hz": round(m.f_steady, 9),
        })).collect::<Vec<_>>(),
    })
}

fn dynamics_meta(cfg: &ScenarioConfig, prep_meta: Value) -> Value {
    let d = &cfg.dynamics;
    let mut m = json!({
        "seed": cfg.seed,
        "dt_s": d.dt_s,
        "t_end_s": d.t_end_s,
        "settling_band_hz": d.settling_band_hz,
        "settling_band_note": "settling band is a modelling choice, not a published value",
        "rocof_window_s": d.rocof_window_s,
        "provenance": {
            "machine_data": "bundled case",
            "governor_exciter": "library defaults, not published with the study",
            "pss": if d.pss.is_some() { "scenario override" } else { "library defaults, not published with the study" },
            "agc_k_i": "library default on the system base, not published with the study",
        },
    });
    if let (Some(a), Some(b)) = (m.as_object_mut(), prep_meta.as_object()) {
        a.extend(b.clone());
    }
    m
}

pub fn dynamics_study(cfg: &ScenarioConfig) -> Result<StudyOutput, StudyError> {
    let prov = Provenance::new(cfg);
    let prep = prepare(cfg)?;
    let runs = dynamic_runs(cfg)?;
    let mut files = Vec::new();
    let mut failures = Vec::new();
    for r in &runs {
        files.push(prov.csv(format!("trace_{}.csv", r.key.label()), &r.trace.csv()));
        if let Some(e) = &r.failure {
            failures.push(format!("{}: {e}", r.key.label()));
        }
    }
    let body = json!({ "disturbance_s": runs.first().map(|r| r.t_dist), "runs": runs.iter().map(metrics_json).collect::<Vec<_>>() });
    files.push(prov.json("dynamics_metrics.json", body, dynamics_meta(cfg, pv_meta(&prep))));
    Ok(StudyOutput { files, failures })
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// One row per generator × run, with constraint checks and rank columns
/// (1 = smallest value among the runs for that generator).
pub fn report_study(cfg: &ScenarioConfig) -> Result<StudyOutput, StudyError> {
    let prov = Provenance::new(cfg);
    let prep = prepare(cfg)?;
    let runs = dynamic_runs(cfg)?;
    let s_base = prep.net.s_base;
    let first_variant = cfg.dynamics.variants.first().copied().unwrap_or(EvVariant::ChargingModule);
    let ranked = base_ranking(cfg, first_variant)?;

    let ok: Vec<&RunResult> = runs.iter().filter(|r| r.failure.is_none()).collect();
    let n_gen = prep.net.generators.len();
    let mut rows = Vec::new();
    let mut csv = String::from("generator,bus,model,nadir_hz,rocof_hzps,settle_s,nadir_rank,rocof_rank,settle_rank,pass\n");
    for g in 0..n_gen {
        let nadirs: Vec<f64> = ok.iter().map(|r| r.metrics[g].f_nadir).collect();
        let rocofs: Vec<f64> = ok.iter().map(|r| r.metrics[g].rocof_max.abs()).collect();
        let settles: Vec<f64> = ok.iter().map(|r| r.metrics[g].settle.key()).collect();
        let (rn, rr, rs) = (ascending_ranks(&nadirs), ascending_ranks(&rocofs), ascending_ranks(&settles));
        for (k, r) in ok.iter().enumerate() {
            let m = &r.metrics[g];
            let checks = vec![
                ConstraintCheck::within("f_nom", "[59.5, 60.1] Hz", m.f_steady, F_NOM_MIN_HZ, F_NOM_MAX_HZ),
                ConstraintCheck::below("ROCOF", "|df/dt| < 1 Hz/s", m.rocof_max.abs(), ROCOF_LIMIT_HZPS),
            ];
            let pass = checks.iter().all(|c| c.pass);
            let settle = m.settle.time().map_or(String::from("unsettled"), |t| format!("{t:.4}"));
            csv.push_str(&format!(
                "{},{},{},{:.6},{:.6},{},{},{},{},{}\n",
                g + 1,
                r.trace.gen_buses[g],
                r.key.label(),
                m.f_nadir,
                m.rocof_max,
                settle,
                rn[k],
                rr[k],
                rs[k],
                pass
            ));
            rows.push(json!({
                "generator": g + 1,
                "bus": r.trace.gen_buses[g],
                "model": r.key.label(),
                "nadir_hz": round(m.f_nadir, 9),
                "rocof_hzps": round(m.rocof_max, 9),
                "settle_s": settle_value(m.settle),
                "ranks": { "nadir": rn[k], "rocof": rr[k], "settle": rs[k] },
                "constraints": checks,
            }));
        }
    }
    let all_metrics: Vec<FrequencyMetrics> = ok.iter().flat_map(|r| r.metrics.iter().cloned()).collect();
    let system = check_system_constraints(&all_metrics, &ranked);
    let failed: Vec<Value> =
        runs.iter().filter_map(|r| r.failure.as_ref().map(|e| json!({ "model": r.key.label(), "error": e }))).collect();
    let body = json!({
        "rows": rows,
        "failed_runs": failed,
        "weak_lines": {
            "variant": first_variant.label(),
            "top": ranked.iter().take(5).map(|r| line_json(r, s_base)).collect::<Vec<_>>(),
        },
        "system_constraints": { "pass": system.pass, "failures": system.failures().collect::<Vec<_>>() },
    });
    let failures = runs.iter().filter_map(|r| r.failure.as_ref().map(|e| format!("{}: {e}", r.key.label()))).collect();
    Ok(StudyOutput {
        files: vec![prov.csv("report.csv", &csv), prov.json("report.json", body, dynamics_meta(cfg, pv_meta(&prep)))],
        failures,
    })
}

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

/// Worker count from `GRIDSTAB_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>, StudyError> {
    match std::env::var(THREADS_ENV) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(input(format!("{THREADS_ENV} must be a positive integer, got '{s}'"))),
        },
        Err(_) => Ok(None),
    }
}

fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T, StudyError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| StudyError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_placements() {
        let cfg = ScenarioConfig::paper_preset("ieee39").unwrap();
        assert_eq!(cfg.ev.iter().map(|e| e.bus).collect::<Vec<_>>(), vec![15, 17, 26, 27]);
        assert_eq!(cfg.pv.len(), 4);
        assert!(cfg.ev.iter().all(|e| e.rated_kv == 5.0 && e.spur_km == 5.0 && e.switch_time_s == Some(16.0)));
        assert!(cfg.pv.iter().all(|p| p.spur_km == 1.0));
        let cfg = ScenarioConfig::paper_preset("ieee9.json").unwrap();
        assert_eq!(cfg.ev.iter().map(|e| e.bus).collect::<Vec<_>>(), vec![7, 8, 9]);
    }

    #[test]
    fn scenario_json_round_trip_and_defaults() {
        let cfg = ScenarioConfig::paper_preset("ieee9").unwrap();
        let back = ScenarioConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let minimal = ScenarioConfig::from_json(r#"{"case": "ieee9", "ev": [{"bus": 7}]}"#).unwrap();
        assert_eq!(minimal.ev[0], EvPlacement::at(7));
        assert_eq!(minimal.dynamics, DynamicsStudy::default());
        assert!(ScenarioConfig::from_json(r#"{"case": "ieee9", "bogus": 1}"#).unwrap_err().is_input_error());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ScenarioConfig::paper_preset("ieee9").unwrap();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn unknown_buses_are_input_errors() {
        let mut cfg = ScenarioConfig::for_case("ieee9");
        cfg.ev.push(EvPlacement::at(99));
        assert!(prepare(&cfg).err().unwrap().is_input_error());
        let mut cfg = ScenarioConfig::for_case("ieee9");
        cfg.pvcurve.buses = vec![42];
        assert!(pvcurve_study(&cfg).unwrap_err().is_input_error());
        assert!(ScenarioConfig::for_case("nope.json").network().unwrap_err().is_input_error());
    }

    #[test]
    fn station_aggregates_vehicles() {
        let cfg = ScenarioConfig::paper_preset("ieee9").unwrap();
        let prep = prepare(&cfg).unwrap();
        assert_eq!(prep.stations.len(), 3);
        let s = &prep.stations[0];
        assert_eq!(s.s_rated_kva, 150.0 * 150.0);
        assert_eq!(s.capacity_kwh, 150.0 * 100.0);
        // Spurs: three EV leaves and three PV leaves.
        assert_eq!(prep.net.buses.len(), 15);
        assert!(prep.irradiance.iter().all(|g| *g == 0.0 || (*g > 900.0 && *g <= 1100.0)));
    }

    #[test]
    fn schedule_groups_switch_ins() {
        let mut cfg = ScenarioConfig::paper_preset("ieee9").unwrap();
        cfg.ev[2].switch_time_s = Some(20.0);
        cfg.ev[1].switch_time_s = None;
        let prep = prepare(&cfg).unwrap();
        let ev = schedule(&cfg, &prep).unwrap();
        let times: Vec<f64> = ev.events().iter().map(|e| e.time_s).collect();
        assert_eq!(times, vec![16.0, 20.0]);
        assert_eq!(ev.events()[0].actions.len(), 1);
    }

    #[test]
    fn run_keys_are_sorted_and_unique() {
        let d = DynamicsStudy { pss_on: vec![false, true, true], ..Default::default() };
        let keys = run_keys(&d).unwrap();
        assert_eq!(keys.len(), 6);
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        assert!(run_keys(&DynamicsStudy { agc_on: vec![], ..Default::default() }).is_err());
    }

    #[test]
    fn powerflow_outputs_carry_provenance() {
        let cfg = ScenarioConfig::paper_preset("ieee9").unwrap();
        let out = powerflow_study(&cfg).unwrap();
        let names: Vec<&str> = out.files.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, ["buses.csv", "branches.csv", "powerflow.json"]);
        let tag = format!("# gridstab {VERSION} scenario {}", cfg.hash());
        assert!(out.files[0].contents.starts_with(&tag));
        let v: Value = serde_json::from_str(&out.files[2].contents).unwrap();
        assert_eq!(v["meta"]["scenario_hash"], cfg.hash());
        assert_eq!(v["meta"]["version"], VERSION);
    }

    #[test]
    fn overlay_has_a_column_pair_per_variant() {
        let mut cfg = ScenarioConfig::paper_preset("ieee9").unwrap();
        cfg.pvcurve.step = 0.1;
        let out = pvcurve_study(&cfg).unwrap();
        let csv = &out.files[0].contents;
        let header = csv.lines().nth(1).unwrap();
        assert_eq!(header.split(',').count(), 7);
        assert!(header.contains("v_pu_dynamic_pq_control"));
    }

    #[test]
    fn zero_load_case_gives_zero_indices() {
        let mut cfg = ScenarioConfig::for_case("ieee9");
        cfg.indices.variants = vec![EvVariant::ChargingModule];
        cfg.indices.reactive_steps = vec![1.0];
        let mut net = cfg.network().unwrap();
        for b in &mut net.buses {
            b.p_load = 0.0;
            b.q_load = 0.0;
        }
        for g in &mut net.generators {
            g.p_set = 0.0;
            g.v_set = 1.0;
        }
        // Line charging alone would drive reactive flow.
        for br in &mut net.branches {
            br.b_shunt = 0.0;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        std::fs::write(&path, net.to_json()).unwrap();
        cfg.case = path.display().to_string();
        let series = line_indices(&cfg).unwrap();
        let lines = series[0].2.as_ref().unwrap();
        assert!(lines.iter().all(|r| r.fvsi == 0.0 && r.nlsi == 0.0));
    }

    #[test]
    fn thread_cap_reads_environment() {
        // Only checks parsing of the current value; the variable is not set in tests.
        if std::env::var(THREADS_ENV).is_err() {
            assert_eq!(thread_cap().unwrap(), None);
        }
    }
}
