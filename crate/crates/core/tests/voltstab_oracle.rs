//! P-V nose against a brute-force sweep, and the line indices against
//! hand evaluation.

use gridstab::evload::{EvVariant, StationLoad};
use gridstab::netmodel::{bundled_case, Branch, BusKind, Network};
use gridstab::powerflow::{solve_power_flow, solve_with_loads, BusLoad, PfOptions, PowerFlowSolution};
use gridstab::study::{prepare, ScenarioConfig};
use gridstab::voltstab::{fvsi, line_ends, nlsi, rank_weak_lines, trace_pv_curve, PvCurveOptions, VoltageEnd};

/// Last scale reached by stepping bus load in increments of `step`, each
/// solve warm-started from the previous one.
fn dense_sweep(net: &Network, loads: &[&dyn BusLoad], bus: u32, step: f64) -> f64 {
    let b = net.bus(bus).unwrap().clone();
    let opts = PfOptions::default();
    let mut warm: Option<PowerFlowSolution> = None;
    let mut k = 0u32;
    loop {
        let s = 1.0 + f64::from(k) * step;
        let stepped = net.with_bus_load(bus, b.p_load * s, b.q_load * s).unwrap();
        match solve_with_loads(&stepped, loads, &opts, warm.as_ref()) {
            Ok(sol) => warm = Some(sol),
            Err(_) => return s - step,
        }
        k += 1;
    }
}

#[test]
fn nine_bus_nose_agrees_with_dense_sweep() {
    let net = bundled_case("ieee9").unwrap();
    let curve = trace_pv_curve(&net, &[], 6, &PvCurveOptions::default()).unwrap();
    let oracle = dense_sweep(&net, &[], 6, 0.001);
    let rel = (curve.nose.load_scale - oracle).abs() / oracle;
    assert!(rel < 0.005, "nose {} vs sweep {oracle}", curve.nose.load_scale);
    assert!(curve.nose.v_mag < 0.8);
}

#[test]
fn nose_with_paper_stations_agrees_with_dense_sweep() {
    // Stations are not at bus 6, so they stay fixed while bus 6 is scaled.
    let cfg = ScenarioConfig::paper_preset("ieee9").unwrap();
    let prep = prepare(&cfg).unwrap();
    for variant in EvVariant::ALL {
        let stations = prep.with_variant(variant);
        let st: Vec<StationLoad> = stations.iter().map(|s| StationLoad { station: s, s_base: prep.net.s_base }).collect();
        let loads: Vec<&dyn BusLoad> = st.iter().map(|l| l as &dyn BusLoad).chain(prep.pv.iter().map(|p| p as &dyn BusLoad)).collect();
        let curve = trace_pv_curve(&prep.net, &loads, 6, &PvCurveOptions::default()).unwrap();
        let oracle = dense_sweep(&prep.net, &loads, 6, 0.001);
        assert!((curve.nose.load_scale - oracle).abs() / oracle < 0.005, "{variant:?}");
    }
}

#[test]
fn beyond_the_nose_the_power_flow_fails() {
    let net = bundled_case("ieee9").unwrap();
    let curve = trace_pv_curve(&net, &[], 6, &PvCurveOptions::default()).unwrap();
    let b = net.bus(6).unwrap();
    for over in [1.01, 1.05, 1.2] {
        let s = curve.nose.load_scale * over;
        let stepped = net.with_bus_load(6, b.p_load * s, b.q_load * s).unwrap();
        assert!(solve_power_flow(&stepped, &PfOptions::default()).is_err(), "scale {s}");
    }
}

#[test]
fn thirty_nine_bus_nose_exists() {
    let net = bundled_case("ieee39").unwrap();
    let curve = trace_pv_curve(&net, &[], 12, &PvCurveOptions::default()).unwrap();
    assert!(curve.nose.load_scale > 1.0);
    let mut upper: Vec<_> = curve.points.clone();
    upper.sort_by(|a, b| a.load_scale.total_cmp(&b.load_scale));
    assert!(upper.windows(2).all(|w| w[1].v_mag <= w[0].v_mag + 1e-6));
}

/// Slack bus 1 feeding a single load at bus 4.
fn two_bus(r: f64, x: f64, p: f64, q: f64) -> Network {
    let mut net = bundled_case("ieee9").unwrap();
    net.buses.retain(|b| b.id == 1 || b.id == 4);
    net.buses[1].kind = BusKind::Pq;
    net.buses[1].p_load = p;
    net.buses[1].q_load = q;
    net.generators.retain(|g| g.bus == 1);
    let br = Branch { from: 1, to: 4, r, x, b_shunt: 0.0, rating: None };
    Network::new("two".into(), 60.0, 100.0, net.buses, vec![br], net.generators, vec![]).unwrap()
}

#[test]
fn indices_match_hand_evaluation() {
    let tuples = [(0.01, 0.085, 0.9, 0.3), (0.0, 0.0576, 0.5, 0.1), (0.032, 0.161, 1.0, 0.35), (0.0085, 0.072, 0.75, -0.05), (0.0119, 0.1008, 0.4, 0.6)];
    for (r, x, p, q) in tuples {
        let net = two_bus(r, x, p, q);
        let sol = solve_power_flow(&net, &PfOptions { tol: 1e-12, ..Default::default() }).unwrap();
        let br = &net.branches[0];
        let f = sol.flow(1, 4).unwrap();
        let v = sol.v_at(4).unwrap();
        let z2 = r * r + x * x;
        let fv = 4.0 * z2 * f.q_recv / (v * v * x);
        let nl = (r * f.p_recv + x * f.q_recv) / (0.25 * v * v);
        let got_f = fvsi(br, &sol, VoltageEnd::Receiving).unwrap();
        let got_n = nlsi(br, &sol, VoltageEnd::Receiving).unwrap();
        assert!((got_f - fv).abs() <= 1e-12 * fv.abs().max(1e-300), "fvsi {got_f} vs {fv}");
        assert!((got_n - nl).abs() <= 1e-12 * nl.abs().max(1e-300), "nlsi {got_n} vs {nl}");
        assert_eq!(line_ends(br, &sol).unwrap().receiving, 4);
    }
}

#[test]
fn base_load_indices_stay_below_unity() {
    for case in ["ieee9", "ieee39"] {
        let net = bundled_case(case).unwrap();
        let sol = solve_power_flow(&net, &PfOptions::default()).unwrap();
        for r in rank_weak_lines(&net, &sol, VoltageEnd::Receiving).unwrap() {
            assert!(r.fvsi < 1.0 && r.nlsi < 1.0, "{case} {:?}", r.branch);
        }
    }
}
