use std::path::PathBuf;

use cmm_core::config::{ConfigError, PipelineConfig};

fn reference_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../config/reference.toml")
}

#[test]
fn reference_file_equals_defaults() {
    let cfg = PipelineConfig::load(reference_path()).unwrap();
    assert_eq!(cfg, PipelineConfig::default());
    assert_eq!(PipelineConfig::from_toml_str("").unwrap(), PipelineConfig::default());
}

#[test]
fn serialized_defaults_reload_identically() {
    let d = PipelineConfig::default();
    assert_eq!(PipelineConfig::from_toml_str(&d.to_toml_string()).unwrap(), d);
}

#[test]
fn partial_sections_keep_other_defaults() {
    let cfg = PipelineConfig::from_toml_str("[scene]\nduration = 3.0\n[geofence]\nz_min = -6.0\n").unwrap();
    assert_eq!(cfg.scene.duration, 3.0);
    assert_eq!(cfg.scene.tick, 0.1);
    assert_eq!(cfg.geofence.z_min, -6.0);
    assert_eq!(cfg.geofence.x_max, 51.2);
}

#[test]
fn unknown_and_invalid_keys_name_their_path() {
    let err = PipelineConfig::from_toml_str("[tracker]\nd_0 = 2.0\n").unwrap_err();
    assert!(matches!(err, ConfigError::Key { .. }), "{err}");
    assert!(err.to_string().contains("tracker"), "{err}");

    let err = PipelineConfig::from_toml_str("[scene]\ntick = \"fast\"\n").unwrap_err();
    assert!(err.to_string().contains("scene.tick"), "{err}");

    let err = PipelineConfig::from_toml_str("[tracker]\nd_o = -1.0\n").unwrap_err();
    assert!(err.to_string().contains("tracker.d_o"), "{err}");

    let err = PipelineConfig::from_toml_str("[geofence]\nx_min = 10.0\nx_max = 5.0\n").unwrap_err();
    assert!(err.to_string().contains("geofence"), "{err}");

    assert!(PipelineConfig::from_toml_str("seed = [").is_err());
}

#[test]
fn scenario_carries_seed_and_agents() {
    let cfg = PipelineConfig::from_toml_str("seed = 99\n").unwrap();
    let s = cfg.scenario().unwrap();
    assert_eq!(s.rng_seed, 99);
    assert_eq!(s.agents.len(), 6);
}
