//! Admittance matrix assembly and full Newton-Raphson AC power flow in polar form.
//!
//! Besides the constant-power bus loads carried by the [`Network`], a solve
//! accepts any number of voltage-dependent [`BusLoad`]s (EV stations, PV
//! farms). Their sensitivity to the local voltage magnitude enters the
//! Jacobian through a central difference.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::netmodel::{BusId, BusKind, Network};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PfError {
    #[error("bus {0} has no incident branch")]
    IsolatedBus(BusId),
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("power flow did not converge after {iterations} iterations (max mismatch {max_mismatch:.3e} p.u.)")]
    NonConvergence { iterations: usize, max_mismatch: f64 },
    #[error("singular Jacobian at iteration {0}")]
    SingularJacobian(usize),
    #[error("unknown bus {0} in load model")]
    UnknownBus(BusId),
}

/// Sparse bus admittance matrix, stored row-wise.
#[derive(Debug, Clone)]
pub struct Ybus {
    rows: Vec<Vec<(usize, Complex64)>>,
}

impl Ybus {
    pub fn dimension(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.rows[i].iter().find(|(c, _)| *c == j).map(|(_, y)| *y).unwrap_or_default()
    }

    pub fn row(&self, i: usize) -> &[(usize, Complex64)] {
        &self.rows[i]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let n = self.dimension();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, y) in row {
                m[(i, j)] += y;
            }
        }
        m
    }

    fn add(&mut self, i: usize, j: usize, y: Complex64) {
        match self.rows[i].iter_mut().find(|(c, _)| *c == j) {
            Some((_, v)) => *v += y,
            None => self.rows[i].push((j, y)),
        }
    }
}

pub fn build_ybus(net: &Network) -> Result<Ybus, PfError> {
    let n = net.buses.len();
    let mut y = Ybus { rows: vec![Vec::new(); n] };
    let mut degree = vec![0usize; n];
    for br in &net.branches {
        let i = net.bus_index(br.from).ok_or(PfError::UnknownBus(br.from))?;
        let j = net.bus_index(br.to).ok_or(PfError::UnknownBus(br.to))?;
        let ys = br.series_admittance();
        let ysh = Complex64::new(0.0, br.b_shunt / 2.0);
        y.add(i, i, ys + ysh);
        y.add(j, j, ys + ysh);
        y.add(i, j, -ys);
        y.add(j, i, -ys);
        degree[i] += 1;
        degree[j] += 1;
    }
    if let Some(k) = degree.iter().position(|&d| d == 0) {
        return Err(PfError::IsolatedBus(net.buses[k].id));
    }
    for row in &mut y.rows {
        row.sort_by_key(|(c, _)| *c);
    }
    Ok(y)
}

/// A load whose demand depends on the magnitude of its bus voltage.
/// Negative demand is generation.
pub trait BusLoad: Send + Sync {
    fn bus(&self) -> BusId;
    /// Active and reactive demand in per-unit at voltage magnitude `v`.
    fn demand(&self, v: f64) -> (f64, f64);
}

/// Constant-power demand, handy for tests and fixed injections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPower {
    pub bus: BusId,
    pub p: f64,
    pub q: f64,
}

impl BusLoad for ConstantPower {
    fn bus(&self) -> BusId {
        self.bus
    }
    fn demand(&self, _v: f64) -> (f64, f64) {
        (self.p, self.q)
    }
}

/// Multiplies another load's demand by a fixed factor.
pub struct Scaled<'a> {
    pub inner: &'a dyn BusLoad,
    pub factor: f64,
}

impl BusLoad for Scaled<'_> {
    fn bus(&self) -> BusId {
        self.inner.bus()
    }
    fn demand(&self, v: f64) -> (f64, f64) {
        let (p, q) = self.inner.demand(v);
        (p * self.factor, q * self.factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub flat_start: bool,
    /// Convert PV buses to PQ when their generators hit reactive limits.
    pub enforce_q_limits: bool,
}

impl Default for PfOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 30,
            flat_start: true,
            enforce_q_limits: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchFlow {
    pub from: BusId,
    pub to: BusId,
    /// Power entering the branch at the `from` end.
    pub p_send: f64,
    pub q_send: f64,
    /// Power delivered by the branch to the `to` bus.
    pub p_recv: f64,
    pub q_recv: f64,
    /// Series current magnitude.
    pub i_series: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub bus_ids: Vec<BusId>,
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    /// Net injections (generation minus all demand).
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    /// Voltage-dependent demand evaluated at the solution, per bus.
    pub p_extra: Vec<f64>,
    pub q_extra: Vec<f64>,
    pub branch_flows: Vec<BranchFlow>,
    pub iterations: usize,
    pub max_mismatch: f64,
    /// Infinity-norm mismatch at each iteration, first entry at the start point.
    pub mismatch_history: Vec<f64>,
    /// Final bus classification (PV buses may have been converted by Q limits).
    pub kinds: Vec<BusKind>,
}

impl PowerFlowSolution {
    pub fn voltage(&self, i: usize) -> Complex64 {
        Complex64::from_polar(self.v_mag[i], self.v_ang[i])
    }

    pub fn index_of(&self, id: BusId) -> Option<usize> {
        self.bus_ids.iter().position(|&b| b == id)
    }

    pub fn v_at(&self, id: BusId) -> Option<f64> {
        self.index_of(id).map(|i| self.v_mag[i])
    }

    pub fn flow(&self, from: BusId, to: BusId) -> Option<&BranchFlow> {
        self.branch_flows.iter().find(|f| f.from == from && f.to == to)
    }

    pub fn total_losses(&self) -> (f64, f64) {
        self.branch_flows.iter().fold((0.0, 0.0), |(p, q), f| (p + f.p_send - f.p_recv, q + f.q_send - f.q_recv))
    }

    /// Generation at each bus: injection plus constant and voltage-dependent demand.
    pub fn generation(&self, net: &Network) -> Vec<(f64, f64)> {
        net.buses
            .iter()
            .enumerate()
            .map(|(i, b)| (self.p_inj[i] + b.p_load + self.p_extra[i], self.q_inj[i] + b.q_load + self.q_extra[i]))
            .collect()
    }

    /// Bus table as `bus,v_mag_pu,v_ang_deg,p_inj_mw,q_inj_mvar`.
    pub fn bus_csv(&self, s_base: f64) -> String {
        let mut out = String::from("bus,v_mag_pu,v_ang_deg,p_inj_mw,q_inj_mvar\n");
        for i in 0..self.bus_ids.len() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                self.bus_ids[i],
                self.v_mag[i],
                self.v_ang[i].to_degrees(),
                self.p_inj[i] * s_base,
                self.q_inj[i] * s_base
            ));
        }
        out
    }

    /// Branch table as `from,to,p_send,q_send,p_recv,q_recv` in MW / MVAr.
    pub fn branch_csv(&self, s_base: f64) -> String {
        let mut out = String::from("from,to,p_send,q_send,p_recv,q_recv\n");
        for f in &self.branch_flows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                f.from,
                f.to,
                f.p_send * s_base,
                f.q_send * s_base,
                f.p_recv * s_base,
                f.q_recv * s_base
            ));
        }
        out
    }
}

pub fn solve_power_flow(net: &Network, opts: &PfOptions) -> Result<PowerFlowSolution, PfError> {
    solve_with_loads(net, &[], opts, None)
}

/// Newton-Raphson solve with extra voltage-dependent loads and an optional
/// warm start from a previous solution of the same network.
pub fn solve_with_loads(
    net: &Network,
    loads: &[&dyn BusLoad],
    opts: &PfOptions,
    warm: Option<&PowerFlowSolution>,
) -> Result<PowerFlowSolution, PfError> {
    if !(opts.tol > 0.0) {
        return Err(PfError::InvalidOptions(format!("tol must be positive, got {}", opts.tol)));
    }
    if opts.max_iter == 0 {
        return Err(PfError::InvalidOptions("max_iter must be at least 1".into()));
    }
    let ybus = build_ybus(net)?;
    let load_idx = loads
        .iter()
        .map(|l| net.bus_index(l.bus()).ok_or(PfError::UnknownBus(l.bus())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut kinds: Vec<BusKind> = net.buses.iter().map(|b| b.kind).collect();
    let mut q_fixed = vec![0.0; net.buses.len()];
    let mut start = warm.map(|w| (w.v_mag.clone(), w.v_ang.clone()));
    let mut history_all = Vec::new();
    let mut iterations = 0;
    // Outer loop handles PV->PQ conversions when Q limits are enforced.
    loop {
        let mut sol = newton(net, &ybus, loads, &load_idx, &kinds, &q_fixed, opts, start.as_ref())?;
        iterations += sol.iterations;
        history_all.extend_from_slice(&sol.mismatch_history);
        if !opts.enforce_q_limits {
            sol.iterations = iterations;
            sol.mismatch_history = history_all;
            return Ok(sol);
        }
        let generation = sol.generation(net);
        let mut switched = false;
        for (i, bus) in net.buses.iter().enumerate() {
            if kinds[i] != BusKind::Pv {
                continue;
            }
            let (mut qmin, mut qmax, mut any) = (0.0, 0.0, false);
            for g in net.generators_at(bus.id) {
                if let Some((lo, hi)) = g.q_limits {
                    qmin += lo;
                    qmax += hi;
                    any = true;
                }
            }
            if !any {
                continue;
            }
            let qg = generation[i].1;
            if qg > qmax + opts.tol || qg < qmin - opts.tol {
                kinds[i] = BusKind::Pq;
                q_fixed[i] = qg.clamp(qmin, qmax);
                switched = true;
            }
        }
        if !switched {
            sol.iterations = iterations;
            sol.mismatch_history = history_all;
            return Ok(sol);
        }
        start = Some((sol.v_mag.clone(), sol.v_ang.clone()));
    }
}

#[allow(clippy::too_many_arguments)]
fn newton(
    net: &Network,
    ybus: &Ybus,
    loads: &[&dyn BusLoad],
    load_idx: &[usize],
    kinds: &[BusKind],
    q_fixed: &[f64],
    opts: &PfOptions,
    start: Option<&(Vec<f64>, Vec<f64>)>,
) -> Result<PowerFlowSolution, PfError> {
    let n = net.buses.len();
    let y = ybus.to_dense();

    let mut p_gen = vec![0.0; n];
    let mut v_set = vec![None; n];
    for g in &net.generators {
        let i = net.bus_index(g.bus).expect("validated generator bus");
        p_gen[i] += g.p_set;
        v_set[i].get_or_insert(g.v_set);
    }

    let mut vm: Vec<f64> = match start {
        Some((m, _)) => m.clone(),
        None if opts.flat_start => vec![1.0; n],
        None => net.buses.iter().map(|b| b.v_mag).collect(),
    };
    let mut va: Vec<f64> = match start {
        Some((_, a)) => a.clone(),
        None if opts.flat_start => vec![0.0; n],
        None => net.buses.iter().map(|b| b.v_ang).collect(),
    };
    for i in 0..n {
        if kinds[i] != BusKind::Pq {
            vm[i] = v_set[i].unwrap_or(vm[i]);
        }
        if kinds[i] == BusKind::Slack {
            va[i] = 0.0;
        }
    }

    // Unknown ordering: angles of non-slack buses, then magnitudes of PQ buses.
    let ang_vars: Vec<usize> = (0..n).filter(|&i| kinds[i] != BusKind::Slack).collect();
    let mag_vars: Vec<usize> = (0..n).filter(|&i| kinds[i] == BusKind::Pq).collect();
    let mut ang_pos = vec![usize::MAX; n];
    for (k, &i) in ang_vars.iter().enumerate() {
        ang_pos[i] = k;
    }
    let mut mag_pos = vec![usize::MAX; n];
    for (k, &i) in mag_vars.iter().enumerate() {
        mag_pos[i] = ang_vars.len() + k;
    }
    let dim = ang_vars.len() + mag_vars.len();

    let extra = |vm: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut pe = vec![0.0; n];
        let mut qe = vec![0.0; n];
        for (l, &i) in loads.iter().zip(load_idx) {
            let (p, q) = l.demand(vm[i]);
            pe[i] += p;
            qe[i] += q;
        }
        (pe, qe)
    };
    let extra_slope = |vm: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut dp = vec![0.0; n];
        let mut dq = vec![0.0; n];
        for (l, &i) in loads.iter().zip(load_idx) {
            let h = 1e-6 * vm[i].abs().max(1e-3);
            let (p1, q1) = l.demand(vm[i] + h);
            let (p0, q0) = l.demand(vm[i] - h);
            dp[i] += (p1 - p0) / (2.0 * h);
            dq[i] += (q1 - q0) / (2.0 * h);
        }
        (dp, dq)
    };

    let mismatch = |vm: &[f64], va: &[f64]| -> (Vec<Complex64>, Vec<Complex64>, f64, Vec<f64>, Vec<f64>) {
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        let ibus: Vec<Complex64> = (0..n)
            .map(|i| ybus.row(i).iter().map(|&(j, yij)| yij * v[j]).sum())
            .collect();
        let (pe, qe) = extra(vm);
        let mut f = vec![0.0; dim];
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let s = v[i] * ibus[i].conj();
            let p_spec = p_gen[i] - net.buses[i].p_load - pe[i];
            if kinds[i] != BusKind::Slack {
                let dp = s.re - p_spec;
                f[ang_pos[i]] = dp;
                worst = worst.max(dp.abs());
            }
            if kinds[i] == BusKind::Pq {
                let q_spec = q_fixed[i] - net.buses[i].q_load - qe[i];
                let dq = s.im - q_spec;
                f[mag_pos[i]] = dq;
                worst = worst.max(dq.abs());
            }
        }
        if f.iter().any(|x| !x.is_finite()) {
            worst = f64::INFINITY;
        }
        (v, ibus, worst, pe, qe)
    };

    let mut history = Vec::new();
    let mut iter = 0;
    loop {
        iter += 1;
        let (v, ibus, worst, _, _) = mismatch(&vm, &va);
        history.push(worst);
        if worst <= opts.tol {
            break;
        }
        if iter > opts.max_iter || !worst.is_finite() || worst > 1e10 {
            return Err(PfError::NonConvergence {
                iterations: iter - 1,
                max_mismatch: worst,
            });
        }
        // Residual vector in unknown ordering.
        let mut rhs = DVector::zeros(dim);
        {
            let (pe, qe) = extra(&vm);
            for i in 0..n {
                let s = v[i] * ibus[i].conj();
                if kinds[i] != BusKind::Slack {
                    rhs[ang_pos[i]] = -(s.re - (p_gen[i] - net.buses[i].p_load - pe[i]));
                }
                if kinds[i] == BusKind::Pq {
                    rhs[mag_pos[i]] = -(s.im - (q_fixed[i] - net.buses[i].q_load - qe[i]));
                }
            }
        }
        // dS/dVa = j diag(V) conj(diag(I) - Y diag(V))
        // dS/dVm = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
        let (dpe, dqe) = extra_slope(&vm);
        let mut jac = DMatrix::zeros(dim, dim);
        let vnorm: Vec<Complex64> = v.iter().zip(&vm).map(|(vi, m)| vi / m).collect();
        for i in 0..n {
            let row_p = (kinds[i] != BusKind::Slack).then(|| ang_pos[i]);
            let row_q = (kinds[i] == BusKind::Pq).then(|| mag_pos[i]);
            if row_p.is_none() && row_q.is_none() {
                continue;
            }
            for j in 0..n {
                let yij = y[(i, j)];
                let diag = i == j;
                if yij == Complex64::default() && !diag {
                    continue;
                }
                let mut ds_da = Complex64::i() * v[i] * (-(yij * v[j])).conj();
                let mut ds_dm = v[i] * (yij * vnorm[j]).conj();
                if diag {
                    ds_da += Complex64::i() * v[i] * ibus[i].conj();
                    ds_dm += ibus[i].conj() * vnorm[i];
                }
                if ang_pos[j] != usize::MAX {
                    let c = ang_pos[j];
                    if let Some(r) = row_p {
                        jac[(r, c)] += ds_da.re;
                    }
                    if let Some(r) = row_q {
                        jac[(r, c)] += ds_da.im;
                    }
                }
                if mag_pos[j] != usize::MAX {
                    let c = mag_pos[j];
                    let (lp, lq) = if diag { (dpe[i], dqe[i]) } else { (0.0, 0.0) };
                    if let Some(r) = row_p {
                        jac[(r, c)] += ds_dm.re + lp;
                    }
                    if let Some(r) = row_q {
                        jac[(r, c)] += ds_dm.im + lq;
                    }
                }
            }
        }
        let dx = jac.lu().solve(&rhs).ok_or(PfError::SingularJacobian(iter))?;
        for &i in &ang_vars {
            va[i] += dx[ang_pos[i]];
        }
        for &i in &mag_vars {
            vm[i] += dx[mag_pos[i]];
        }
    }

    let (v, ibus, worst, pe, qe) = mismatch(&vm, &va);
    let mut p_inj = vec![0.0; n];
    let mut q_inj = vec![0.0; n];
    for i in 0..n {
        let s = v[i] * ibus[i].conj();
        p_inj[i] = s.re;
        q_inj[i] = s.im;
    }
    let branch_flows = net
        .branches
        .iter()
        .map(|br| {
            let i = net.bus_index(br.from).expect("validated");
            let j = net.bus_index(br.to).expect("validated");
            let ys = br.series_admittance();
            let ysh = Complex64::new(0.0, br.b_shunt / 2.0);
            let i_series = (v[i] - v[j]) * ys;
            let s_from = v[i] * (i_series + ysh * v[i]).conj();
            let s_to_in = v[j] * (-i_series + ysh * v[j]).conj();
            BranchFlow {
                from: br.from,
                to: br.to,
                p_send: s_from.re,
                q_send: s_from.im,
                p_recv: -s_to_in.re,
                q_recv: -s_to_in.im,
                i_series: i_series.norm(),
            }
        })
        .collect();

    Ok(PowerFlowSolution {
        bus_ids: net.buses.iter().map(|b| b.id).collect(),
        v_mag: vm,
        v_ang: va,
        p_inj,
        q_inj,
        p_extra: pe,
        q_extra: qe,
        branch_flows,
        iterations: iter,
        max_mismatch: worst,
        mismatch_history: history,
        kinds: kinds.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MachineParams;
    use crate::netmodel::{bundled_case, Branch, Bus, GeneratorSpec};

    fn bus(id: BusId, kind: BusKind, p: f64, q: f64) -> Bus {
        Bus { id, kind, base_kv: 230.0, v_mag: 1.0, v_ang: 0.0, p_load: p, q_load: q }
    }

    fn gen(bus: BusId, p: f64) -> GeneratorSpec {
        GeneratorSpec { bus, p_set: p, v_set: 1.0, mva_base: 100.0, machine: MachineParams::default(), q_limits: None }
    }

    fn two_bus(r: f64, x: f64, b: f64, p: f64, q: f64) -> Network {
        Network::new(
            "two".into(),
            60.0,
            100.0,
            vec![bus(1, BusKind::Slack, 0.0, 0.0), bus(2, BusKind::Pq, p, q)],
            vec![Branch { from: 1, to: 2, r, x, b_shunt: b, rating: None }],
            vec![gen(1, 0.0)],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn ybus_two_bus_hand_value() {
        let y = build_ybus(&two_bus(0.0, 0.1, 0.0, 0.0, 0.0)).unwrap();
        assert!((y.get(0, 1) - Complex64::new(0.0, 10.0)).norm() < 1e-12);
        assert!((y.get(0, 0) - Complex64::new(0.0, -10.0)).norm() < 1e-12);
    }

    #[test]
    fn ybus_isolated_bus() {
        let net = Network::new(
            "one".into(),
            60.0,
            100.0,
            vec![bus(1, BusKind::Slack, 0.0, 0.0)],
            vec![],
            vec![gen(1, 0.0)],
            vec![],
        )
        .unwrap();
        assert_eq!(build_ybus(&net).unwrap_err(), PfError::IsolatedBus(1));
    }

    #[test]
    fn ybus_ieee9_symmetric() {
        let y = build_ybus(&bundled_case("ieee9").unwrap()).unwrap();
        assert_eq!(y.dimension(), 9);
        let d = y.to_dense();
        for i in 0..9 {
            for j in 0..9 {
                assert!((d[(i, j)] - d[(j, i)]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_load_flat_start_is_one_iteration() {
        let net = two_bus(0.01, 0.1, 0.0, 0.0, 0.0);
        let sol = solve_power_flow(&net, &PfOptions::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(sol.v_mag.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(sol.v_ang.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn bad_tolerance_rejected() {
        let net = two_bus(0.01, 0.1, 0.0, 0.5, 0.1);
        let opts = PfOptions { tol: 0.0, ..Default::default() };
        assert!(matches!(solve_power_flow(&net, &opts), Err(PfError::InvalidOptions(_))));
    }

    #[test]
    fn ten_times_load_fails() {
        let net = bundled_case("ieee9").unwrap().with_scaled_load(10.0);
        let err = solve_power_flow(&net, &PfOptions::default()).unwrap_err();
        assert!(matches!(err, PfError::NonConvergence { .. }), "{err}");
    }

    #[test]
    fn two_bus_matches_closed_form() {
        // Lossless line, P only: P = V1 V2 sin(d) / x and Q balance solved by NR.
        let net = two_bus(0.0, 0.2, 0.0, 1.0, 0.0);
        let sol = solve_power_flow(&net, &PfOptions { tol: 1e-12, ..Default::default() }).unwrap();
        let (v2, d) = (sol.v_mag[1], sol.v_ang[1]);
        assert!((v2 * d.sin() / 0.2 + 1.0).abs() < 1e-10);
        // Q at bus 2: (V2^2 - V1 V2 cos d)/x = -q_load = 0
        assert!(((v2 * v2 - v2 * d.cos()) / 0.2).abs() < 1e-10);
    }

    #[test]
    fn extra_load_equivalent_to_bus_load() {
        let base = bundled_case("ieee9").unwrap();
        let moved = base.with_bus_load(5, 0.0, 0.0).unwrap();
        let extra = ConstantPower { bus: 5, p: 1.25, q: 0.5 };
        let a = solve_power_flow(&base, &PfOptions { tol: 1e-10, ..Default::default() }).unwrap();
        let b = solve_with_loads(&moved, &[&extra], &PfOptions { tol: 1e-10, ..Default::default() }, None).unwrap();
        for i in 0..9 {
            assert!((a.v_mag[i] - b.v_mag[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn q_limits_convert_pv_bus() {
        let mut net = bundled_case("ieee9").unwrap();
        let opts = PfOptions { tol: 1e-9, ..Default::default() };
        let free = solve_power_flow(&net, &opts).unwrap();
        let q3 = free.generation(&net)[2].1;
        net.generators[2].q_limits = Some((q3 + 0.05, 1.0));
        let limited = solve_power_flow(&net, &PfOptions { enforce_q_limits: true, ..opts }).unwrap();
        assert_eq!(limited.kinds[2], BusKind::Pq);
        assert!((limited.generation(&net)[2].1 - (q3 + 0.05)).abs() < 1e-8);
        assert!(limited.v_mag[2] > 1.025);
    }
}
