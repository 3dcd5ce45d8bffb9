use std::path::PathBuf;

use rare_lens::harness::ExperimentConfig;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

#[test]
fn shipped_configs_match_presets() {
    let cases = [
        ("default.json", ExperimentConfig::default()),
        ("full-scale.json", ExperimentConfig::full_scale()),
        ("smoke.json", ExperimentConfig::smoke()),
    ];
    for (name, preset) in cases {
        let loaded = ExperimentConfig::load(&config_path(name)).unwrap();
        loaded.validate().unwrap();
        assert_eq!(loaded.to_json(), preset.to_json(), "{name}");
    }
}
