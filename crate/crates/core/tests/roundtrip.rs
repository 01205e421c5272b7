//! Serialization round trips.

use gridstab::netmodel::{bundled_case, parse_case};
use gridstab::study::{dynamic_runs, ScenarioConfig};

#[test]
fn case_json_round_trips() {
    for case in ["ieee9", "ieee39"] {
        let net = bundled_case(case).unwrap();
        let back = parse_case(&net.to_json()).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_json(), net.to_json());
    }
}

#[test]
fn case_with_spurs_round_trips() {
    let cfg = ScenarioConfig::paper_preset("ieee39").unwrap();
    let prep = gridstab::study::prepare(&cfg).unwrap();
    let back = parse_case(&prep.net.to_json()).unwrap();
    assert_eq!(back, prep.net);
}

#[test]
fn scenario_round_trips() {
    let mut cfg = ScenarioConfig::paper_preset("ieee9").unwrap();
    cfg.seed = 99;
    cfg.dynamics.pss_on = vec![true];
    let back = ScenarioConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn trace_csv_parses_back() {
    let mut cfg = ScenarioConfig::paper_preset("ieee9").unwrap();
    cfg.dynamics.t_end_s = 17.0;
    cfg.dynamics.pss_on = vec![true];
    cfg.dynamics.variants.truncate(1);
    let runs = dynamic_runs(&cfg).unwrap();
    let trace = &runs[0].trace;
    let csv = trace.csv();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[0], "t_s");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), trace.t.len());
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), header.len());
        assert!((row[0] - trace.t[k]).abs() < 1e-9);
    }
}
