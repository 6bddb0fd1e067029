use std::path::Path;

use uaan::train::RunConfig;

#[test]
fn shipped_config_spells_out_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = RunConfig::load(&path).unwrap();
    assert!(cfg.train_manifest.as_ref().unwrap().ends_with("data/train.json"));
    let defaults = RunConfig {
        train_manifest: cfg.train_manifest.clone(),
        test_manifest: cfg.test_manifest.clone(),
        ..RunConfig::default()
    };
    assert_eq!(cfg, defaults);
}
