use std::io::Cursor;

use pmbtrack::experiments::preset;
use pmbtrack::simulator::{
    generate_scans, read_scans_csv, read_truth_csv, simulate_truth, write_scans_csv, write_truth_csv, ScenarioConfig,
};

fn uniform_scenario() -> ScenarioConfig {
    preset("fig1").unwrap().scenario
}

fn small_scenario() -> ScenarioConfig {
    let mut cfg = uniform_scenario();
    cfg.initial_mean = 3.0;
    cfg.birth_total = 0.2;
    cfg.clutter_total = 2.0;
    cfg.duration = 6;
    cfg
}

#[test]
fn target_count_stays_at_the_stationary_mean() {
    let cfg = uniform_scenario();
    let seeds = 300;
    let mut totals = vec![0.0; cfg.duration as usize + 1];
    for seed in 0..seeds {
        let truth = simulate_truth(&cfg, seed).unwrap();
        for (t, step) in truth.steps.iter().enumerate() {
            totals[t] += step.len() as f64;
        }
    }
    // Poisson(50) averaged over 300 runs: standard error ≈ 0.41
    for t in [0, 50, 100] {
        let mean = totals[t] / seeds as f64;
        assert!((mean - 50.0).abs() < 2.0, "t={t}: mean count {mean}");
    }
}

#[test]
fn scan_sizes_match_detection_and_clutter_rates() {
    let cfg = uniform_scenario();
    let mut measurements = 0usize;
    let mut expected = 0.0;
    for seed in 0..40 {
        let truth = simulate_truth(&cfg, seed).unwrap();
        let scans = generate_scans(&truth, &cfg, seed);
        assert_eq!(scans.scans.len(), cfg.duration as usize);
        for (k, scan) in scans.scans.iter().enumerate() {
            measurements += scan.len();
            expected += cfg.clutter_total + cfg.detection * truth.steps[k + 1].len() as f64;
            assert!(scan.iter().all(|z| z.iter().all(|c| c.abs() < 110.0)));
        }
    }
    let ratio = measurements as f64 / expected;
    assert!((ratio - 1.0).abs() < 0.02, "observed / expected measurements = {ratio}");
}

#[test]
fn csv_fixtures_round_trip() {
    let cfg = small_scenario();
    let truth = simulate_truth(&cfg, 11).unwrap();
    let scans = generate_scans(&truth, &cfg, 11);
    let mut tbuf = Vec::new();
    write_truth_csv(&truth, &mut tbuf).unwrap();
    let mut sbuf = Vec::new();
    write_scans_csv(&scans, &mut sbuf).unwrap();
    assert_eq!(read_truth_csv(Cursor::new(&tbuf), cfg.duration).unwrap(), truth);
    assert_eq!(read_scans_csv(Cursor::new(&sbuf), cfg.duration).unwrap(), scans);
}

#[test]
fn fixtures_are_byte_stable_per_seed() {
    let cfg = small_scenario();
    let render = |seed| {
        let truth = simulate_truth(&cfg, seed).unwrap();
        let mut out = Vec::new();
        write_truth_csv(&truth, &mut out).unwrap();
        write_scans_csv(&generate_scans(&truth, &cfg, seed), &mut out).unwrap();
        out
    };
    assert_eq!(render(5), render(5));
    assert_ne!(render(5), render(6));
    let text = String::from_utf8(render(5)).unwrap();
    assert!(text.starts_with("time,target_id,p_x,v_x,p_y,v_y\n"));
    assert!(text.contains("\ntime,z_x,z_y\n"));
}

#[test]
fn malformed_fixtures_are_rejected() {
    let bad_width = "time,z_x,z_y\n1,2.0\n";
    assert!(read_scans_csv(Cursor::new(bad_width), 3).is_err());
    let bad_time = "time,z_x,z_y\n0,1.0,2.0\n";
    assert!(read_scans_csv(Cursor::new(bad_time), 3).is_err());
    let late = "time,target_id,p_x,v_x,p_y,v_y\n9,0,0,0,0,0\n";
    assert!(read_truth_csv(Cursor::new(late), 3).is_err());
    let garbage = "time,target_id,p_x,v_x,p_y,v_y\n1,0,x,0,0,0\n";
    assert!(read_truth_csv(Cursor::new(garbage), 3).is_err());
}

#[test]
fn moving_sensor_only_detects_inside_its_cone() {
    let cfg = preset("fig3").unwrap().scenario;
    let truth = simulate_truth(&cfg, 2).unwrap();
    let mut noclutter = cfg.clone();
    noclutter.clutter_total = 0.0;
    noclutter.detection = 1.0;
    let scans = generate_scans(&truth, &noclutter, 2);
    for t in [10usize, 70, 130] {
        let fov = noclutter.detection_field(t as u32);
        let visible = truth
            .states(t)
            .iter()
            .filter(|x| fov.eval(&pmbtrack::linalg::position(x)) > 0.0)
            .count();
        assert_eq!(scans.scans[t - 1].len(), visible, "t={t}");
        assert!(
            visible < truth.steps[t].len(),
            "t={t}: the cone should not cover everything"
        );
    }
}
