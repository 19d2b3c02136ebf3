use std::path::PathBuf;

use pmbtrack::experiments::{
    preset, run_experiment, write_outputs, ExperimentConfig, IntensityKind, TraceRequest, PRESETS,
};
use pmbtrack::intensity::KernelMethod;
use pmbtrack::tracker::PruneMode;
use pmbtrack::Error;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_load_and_validate() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 2);
}

#[test]
fn quick_config_contents() {
    let cfg = ExperimentConfig::load(&configs_dir().join("quick-recycling.toml")).unwrap();
    assert_eq!(cfg.runs, 5);
    assert_eq!(cfg.scenario.duration, 40);
    assert_eq!(cfg.kernel, KernelMethod::Quadrature { nodes: 1000 });
    assert_eq!(cfg.variants[1].prune, PruneMode::RecycleBudget { budget: 0.05 });
    assert!(cfg.uses_grid());
}

#[test]
fn presets_survive_a_file_round_trip() {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("config-round-trip");
    std::fs::create_dir_all(&dir).unwrap();
    for name in PRESETS {
        let cfg = preset(name).unwrap();
        let path = dir.join(format!("{name}.toml"));
        std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
        let back = ExperimentConfig::load(&path).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }
}

#[test]
fn hash_tracks_every_setting() {
    let a = preset("fig1").unwrap();
    let mut b = a.clone();
    b.tracker.gate = 16.0;
    assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    let mut c = a.clone();
    c.seed = 2;
    assert_ne!(a.hash().unwrap(), c.hash().unwrap());
}

#[test]
fn bad_configs_are_rejected() {
    let text = preset("fig1").unwrap().to_toml_string().unwrap();
    assert!(ExperimentConfig::from_toml_str(&text.replace("runs = 100", "runs = 100\nruns_per_variant = 3")).is_err());
    assert!(
        ExperimentConfig::from_toml_str(&text.replace("detection = 0.3", "detection = 1.3"))
            .and_then(|c| c.validate())
            .is_err()
    );
    assert!(ExperimentConfig::from_toml_str("name = \"x\"").is_err());

    let mut cfg = preset("fig1").unwrap();
    cfg.runs = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = preset("fig1").unwrap();
    cfg.variants[1].name = cfg.variants[0].name.clone();
    assert!(cfg.validate().is_err());
    let mut cfg = preset("fig1").unwrap();
    cfg.variants[0].prune = PruneMode::Recycle { threshold: 0.1 };
    assert!(cfg.validate().is_err(), "recycling into a uniform intensity");
    assert!(matches!(preset("fig2"), Err(Error::UnknownPreset { .. })));
}

#[test]
fn outputs_are_complete_and_manifest_is_self_describing() {
    let mut cfg = preset("fig1").unwrap();
    cfg.runs = 2;
    cfg.scenario.duration = 12;
    cfg.variants
        .retain(|v| matches!(v.intensity, IntensityKind::DynamicUniform) || v.name == "fixed-1");
    let request = TraceRequest {
        track_log: true,
        heatmap_times: Vec::new(),
    };
    let table = run_experiment(&cfg, None, &request).unwrap();
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("outputs-complete");
    let _ = std::fs::remove_dir_all(&dir);
    let written = write_outputs(&cfg, &table, &dir).unwrap();
    let names: Vec<String> = written
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(
        names,
        [
            "dynamic.csv",
            "dynamic-tracks.csv",
            "fixed-1.csv",
            "fixed-1-tracks.csv",
            "manifest.json"
        ]
    );

    let csv = std::fs::read_to_string(dir.join("dynamic.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(
        rows[0],
        "variant,time,mospa_mean,mospa_stderr,undetected_mass,track_count_mean"
    );
    assert_eq!(rows.len(), 1 + 13);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["runs"], 2);
    assert_eq!(manifest["config_hash"], cfg.hash().unwrap());
    let embedded: ExperimentConfig = serde_json::from_value(manifest["config"].clone()).unwrap();
    assert_eq!(embedded, cfg);
}
