//! Newton-Raphson against an independent Gauss-Seidel solver and the
//! published 9-bus solution.

use gridstab::netmodel::{bundled_case, BusKind, Network};
use gridstab::powerflow::{solve_power_flow, PfOptions};
use num_complex::Complex64;
use petgraph::algo::connected_components;
use petgraph::graph::UnGraph;

/// Dense Y-bus built directly from the branch list (pi model, no taps).
fn ybus(net: &Network) -> Vec<Vec<Complex64>> {
    let n = net.buses.len();
    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for br in &net.branches {
        let i = net.bus_index(br.from).unwrap();
        let j = net.bus_index(br.to).unwrap();
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let half = Complex64::new(0.0, br.b_shunt / 2.0);
        y[i][i] += ys + half;
        y[j][j] += ys + half;
        y[i][j] -= ys;
        y[j][i] -= ys;
    }
    y
}

/// Accelerated Gauss-Seidel with PV-bus voltage magnitude reset.
fn gauss_seidel(net: &Network) -> Vec<Complex64> {
    let y = ybus(net);
    let n = net.buses.len();
    let mut v: Vec<Complex64> = net.buses.iter().map(|_| Complex64::new(1.0, 0.0)).collect();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for (k, b) in net.buses.iter().enumerate() {
        p[k] = -b.p_load;
        q[k] = -b.q_load;
        for g in net.generators_at(b.id) {
            if b.kind != BusKind::Slack {
                p[k] += g.p_set;
            }
            v[k] = Complex64::new(g.v_set, 0.0);
        }
    }
    let alpha = 1.6;
    for _ in 0..200_000 {
        let mut delta: f64 = 0.0;
        for k in 0..n {
            let kind = net.buses[k].kind;
            if kind == BusKind::Slack {
                continue;
            }
            let sum: Complex64 = (0..n).filter(|&m| m != k).map(|m| y[k][m] * v[m]).sum();
            if kind == BusKind::Pv {
                let i_k: Complex64 = sum + y[k][k] * v[k];
                q[k] = -(v[k].conj() * i_k).im;
            }
            let s = Complex64::new(p[k], q[k]);
            let mut vk = ((s / v[k]).conj() - sum) / y[k][k];
            if kind == BusKind::Pv {
                vk = vk / vk.norm() * v[k].norm();
                delta = delta.max((vk - v[k]).norm());
                v[k] = vk;
            } else {
                let acc = v[k] + (vk - v[k]) * alpha;
                delta = delta.max((acc - v[k]).norm());
                v[k] = acc;
            }
        }
        if delta < 1e-11 {
            return v;
        }
    }
    panic!("Gauss-Seidel did not converge");
}

#[test]
fn newton_matches_gauss_seidel_on_both_cases() {
    for case in ["ieee9", "ieee39"] {
        let net = bundled_case(case).unwrap();
        let sol = solve_power_flow(&net, &PfOptions { tol: 1e-10, ..Default::default() }).unwrap();
        let gs = gauss_seidel(&net);
        for k in 0..net.buses.len() {
            assert!((sol.v_mag[k] - gs[k].norm()).abs() < 1e-6, "{case} bus {} |V|", net.buses[k].id);
            assert!((sol.v_ang[k] - gs[k].arg()).abs() < 1e-6, "{case} bus {} angle", net.buses[k].id);
        }
    }
}

#[test]
fn nine_bus_matches_published_solution() {
    // Load-flow solution of the WSCC 3-machine system, buses 1-9.
    let published = [1.040, 1.025, 1.025, 1.026, 0.996, 1.013, 1.026, 1.016, 1.032];
    let net = bundled_case("ieee9").unwrap();
    let sol = solve_power_flow(&net, &PfOptions::default()).unwrap();
    assert!(sol.iterations <= 10);
    for (k, v) in published.iter().enumerate() {
        let got = sol.v_at(k as u32 + 1).unwrap();
        assert!((got - v).abs() < 0.01, "bus {}: {got} vs {v}", k + 1);
    }
}

#[test]
fn bundled_cases_are_connected() {
    for case in ["ieee9", "ieee39"] {
        let net = bundled_case(case).unwrap();
        let mut g = UnGraph::<(), ()>::new_undirected();
        let nodes: Vec<_> = net.buses.iter().map(|_| g.add_node(())).collect();
        for br in &net.branches {
            g.add_edge(nodes[net.bus_index(br.from).unwrap()], nodes[net.bus_index(br.to).unwrap()], ());
        }
        assert_eq!(connected_components(&g), 1, "{case}");
        assert!(net.is_connected());
    }
}

#[test]
fn power_balance_closes() {
    for case in ["ieee9", "ieee39"] {
        let net = bundled_case(case).unwrap();
        let sol = solve_power_flow(&net, &PfOptions { tol: 1e-10, ..Default::default() }).unwrap();
        let gen: f64 = sol.generation(&net).iter().map(|g| g.0).sum();
        let (load, _) = net.total_load();
        let (loss, _) = sol.total_losses();
        assert!((gen - load - loss).abs() < 1e-8, "{case}");
    }
}
