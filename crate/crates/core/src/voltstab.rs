//! P-V curve tracing and line voltage-stability indices (FVSI, NLSI).
//!
//! Each branch is oriented by its active-power flow: the sending end `i` is
//! where active power enters, the receiving end `j` where it leaves. `P_j`
//! and `Q_j` are the powers delivered to bus `j`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{AttachmentKind, Branch, BusId, Network};
use crate::powerflow::{solve_with_loads, BusLoad, PfError, PfOptions, PowerFlowSolution, Scaled};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VsError {
    #[error("step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("base case does not solve: {0}")]
    BaseCase(PfError),
    #[error("bus {0} carries no load to scale")]
    NoLoad(BusId),
    #[error("unknown bus {0}")]
    UnknownBus(BusId),
    #[error("branch {0}-{1} has zero reactance")]
    ZeroReactance(BusId, BusId),
    #[error("branch {0}-{1} missing from solution")]
    MissingFlow(BusId, BusId),
}

/// Which terminal voltage enters the index denominators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoltageEnd {
    #[default]
    Receiving,
    Sending,
}

/// `4 Z^2 Q_j / (V^2 X)`.
pub fn fvsi_value(z: f64, x: f64, q_j: f64, v: f64) -> Result<f64, f64> {
    if x == 0.0 {
        return Err(x);
    }
    Ok(4.0 * z * z * q_j / (v * v * x))
}

/// `(R P_j + X Q_j) / (0.25 V^2)`.
pub fn nlsi_value(r: f64, x: f64, p_j: f64, q_j: f64, v: f64) -> f64 {
    (r * p_j + x * q_j) / (0.25 * v * v)
}

/// Receiving-end quantities of one branch at a solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineEnds {
    pub sending: BusId,
    pub receiving: BusId,
    pub p_j: f64,
    pub q_j: f64,
    pub v_i: f64,
    pub v_j: f64,
}

pub fn line_ends(branch: &Branch, sol: &PowerFlowSolution) -> Result<LineEnds, VsError> {
    let flow = sol.flow(branch.from, branch.to).ok_or(VsError::MissingFlow(branch.from, branch.to))?;
    let v_from = sol.v_at(branch.from).ok_or(VsError::UnknownBus(branch.from))?;
    let v_to = sol.v_at(branch.to).ok_or(VsError::UnknownBus(branch.to))?;
    Ok(if flow.p_send >= 0.0 {
        LineEnds { sending: branch.from, receiving: branch.to, p_j: flow.p_recv, q_j: flow.q_recv, v_i: v_from, v_j: v_to }
    } else {
        LineEnds { sending: branch.to, receiving: branch.from, p_j: -flow.p_send, q_j: -flow.q_send, v_i: v_to, v_j: v_from }
    })
}

fn end_voltage(ends: &LineEnds, end: VoltageEnd) -> f64 {
    match end {
        VoltageEnd::Receiving => ends.v_j,
        VoltageEnd::Sending => ends.v_i,
    }
}

pub fn fvsi(branch: &Branch, sol: &PowerFlowSolution, end: VoltageEnd) -> Result<f64, VsError> {
    let ends = line_ends(branch, sol)?;
    fvsi_value(branch.z_mag(), branch.x, ends.q_j, end_voltage(&ends, end)).map_err(|_| VsError::ZeroReactance(branch.from, branch.to))
}

pub fn nlsi(branch: &Branch, sol: &PowerFlowSolution, end: VoltageEnd) -> Result<f64, VsError> {
    let ends = line_ends(branch, sol)?;
    Ok(nlsi_value(branch.r, branch.x, ends.p_j, ends.q_j, end_voltage(&ends, end)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineIndexReport {
    pub branch: (BusId, BusId),
    pub fvsi: f64,
    pub nlsi: f64,
    pub q_receiving: f64,
    pub at_scale: f64,
}

impl LineIndexReport {
    pub fn severity(&self) -> f64 {
        self.fvsi.max(self.nlsi)
    }
}

/// All branches ranked by `max(FVSI, NLSI)`, most stressed first. A line whose
/// receiving end gets negative reactive power reports 0 for that index.
pub fn rank_weak_lines(net: &Network, sol: &PowerFlowSolution, end: VoltageEnd) -> Result<Vec<LineIndexReport>, VsError> {
    let mut out = Vec::with_capacity(net.branches.len());
    for br in &net.branches {
        let ends = line_ends(br, sol)?;
        out.push(LineIndexReport {
            branch: br.id(),
            fvsi: fvsi(br, sol, end)?.max(0.0),
            nlsi: nlsi(br, sol, end)?.max(0.0),
            q_receiving: ends.q_j,
            at_scale: 1.0,
        });
    }
    out.sort_by(|a, b| b.severity().total_cmp(&a.severity()).then(a.branch.cmp(&b.branch)));
    Ok(out)
}

/// Index report as a JSON array of `{from,to,fvsi,nlsi}` in ranked order.
pub fn index_report_json(reports: &[LineIndexReport]) -> serde_json::Value {
    serde_json::Value::Array(
        reports
            .iter()
            .map(|r| serde_json::json!({"from": r.branch.0, "to": r.branch.1, "fvsi": r.fvsi, "nlsi": r.nlsi}))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PvPoint {
    pub load_scale: f64,
    pub p_load_mw: f64,
    pub v_mag: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvCurve {
    pub bus: BusId,
    pub points: Vec<PvPoint>,
    /// Last converged point.
    pub nose: PvPoint,
}

impl PvCurve {
    pub fn csv(&self) -> String {
        let mut out = String::from("scale,p_mw,v_pu\n");
        for p in &self.points {
            out.push_str(&format!("{:.6},{:.6},{:.6}\n", p.load_scale, p.p_load_mw, p.v_mag));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvCurveOptions {
    pub step: f64,
    pub pf_held: bool,
    /// Bisection stops once the bracketing scale interval is below this width.
    pub bisect_width: f64,
    pub max_scale: f64,
    pub pf: PfOptions,
}

impl Default for PvCurveOptions {
    fn default() -> Self {
        Self { step: 0.02, pf_held: true, bisect_width: 1e-3, max_scale: 1e3, pf: PfOptions::default() }
    }
}

/// Load scaled at one bus, with the rest of the network unchanged.
pub struct ScaledBusLoad<'a> {
    net: &'a Network,
    loads: &'a [&'a dyn BusLoad],
    bus: BusId,
    pf_held: bool,
    /// Positions in `loads` that grow with the scale.
    scaled: Vec<usize>,
}

impl<'a> ScaledBusLoad<'a> {
    pub fn new(net: &'a Network, loads: &'a [&'a dyn BusLoad], bus: BusId, pf_held: bool) -> Result<Self, VsError> {
        let target = net.bus(bus).map_err(|_| VsError::UnknownBus(bus))?;
        let leaves: Vec<BusId> =
            net.attachments.iter().filter(|a| a.host == bus && a.kind == AttachmentKind::Ev).map(|a| a.leaf).collect();
        let scaled: Vec<usize> =
            loads.iter().enumerate().filter(|(_, l)| l.bus() == bus || leaves.contains(&l.bus())).map(|(k, _)| k).collect();
        if target.p_load == 0.0 && target.q_load == 0.0 && scaled.is_empty() {
            return Err(VsError::NoLoad(bus));
        }
        Ok(Self { net, loads, bus, pf_held, scaled })
    }

    pub fn solve(&self, scale: f64, opts: &PfOptions, warm: Option<&PowerFlowSolution>) -> Result<PowerFlowSolution, PfError> {
        let b = self.net.bus(self.bus).expect("checked in new");
        let q_scale = if self.pf_held { scale } else { 1.0 };
        let net = self.net.with_bus_load(self.bus, b.p_load * scale, b.q_load * q_scale).expect("bus exists");
        // Without pf_held only active power grows; approximate that for
        // voltage-dependent loads by scaling them whole.
        let wrapped: Vec<Scaled> = self
            .loads
            .iter()
            .enumerate()
            .map(|(k, l)| Scaled { inner: *l, factor: if self.scaled.contains(&k) { scale } else { 1.0 } })
            .collect();
        let refs: Vec<&dyn BusLoad> = wrapped.iter().map(|w| w as &dyn BusLoad).collect();
        solve_with_loads(&net, &refs, opts, warm)
    }

    /// Active demand (MW) of the scaled elements at a solution.
    pub fn demand_mw(&self, scale: f64, sol: &PowerFlowSolution) -> f64 {
        let b = self.net.bus(self.bus).expect("checked in new");
        let mut p = b.p_load * scale;
        for &k in &self.scaled {
            let l = self.loads[k];
            let v = sol.v_at(l.bus()).unwrap_or(1.0);
            p += l.demand(v).0 * scale;
        }
        p * self.net.s_base
    }

    pub fn point(&self, scale: f64, sol: &PowerFlowSolution) -> PvPoint {
        PvPoint { load_scale: scale, p_load_mw: self.demand_mw(scale, sol), v_mag: sol.v_at(self.bus).unwrap_or(f64::NAN) }
    }
}

/// Steps the load at `bus` up from its base value until the power flow
/// fails, then bisects the last bracket down to `bisect_width`.
pub fn trace_pv_curve(
    net: &Network,
    loads: &[&dyn BusLoad],
    bus: BusId,
    opts: &PvCurveOptions,
) -> Result<PvCurve, VsError> {
    if !(opts.step > 0.0) {
        return Err(VsError::InvalidStep(opts.step));
    }
    let target = ScaledBusLoad::new(net, loads, bus, opts.pf_held)?;
    let base = target.solve(1.0, &opts.pf, None).map_err(VsError::BaseCase)?;
    let mut points = vec![target.point(1.0, &base)];
    let mut lo = (1.0, base);
    let mut hi = None;
    while lo.0 < opts.max_scale {
        let s = lo.0 + opts.step;
        match target.solve(s, &opts.pf, Some(&lo.1)) {
            Ok(sol) => {
                points.push(target.point(s, &sol));
                lo = (s, sol);
            }
            Err(_) => {
                hi = Some(s);
                break;
            }
        }
    }
    if let Some(mut hi) = hi {
        while hi - lo.0 >= opts.bisect_width {
            let mid = 0.5 * (lo.0 + hi);
            match target.solve(mid, &opts.pf, Some(&lo.1)) {
                Ok(sol) => {
                    points.push(target.point(mid, &sol));
                    lo = (mid, sol);
                }
                Err(_) => hi = mid,
            }
        }
    }
    let nose = *points.last().expect("base point present");
    Ok(PvCurve { bus, points, nose })
}
