use std::path::Path;

use rn_rompc::experiment::{ExperimentConfig, RomKind, TubeVariant};

fn load(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
    cfg.validate().unwrap();
    cfg
}

#[test]
fn default_config_matches_the_built_in_defaults() {
    let cfg = load("default.toml");
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn shipped_configs_parse() {
    let dd = load("data_driven.toml");
    assert_eq!((dd.rom.source, dd.tubes.variant), (RomKind::Fitted, TubeVariant::DataDriven));
    let small = load("small.toml");
    assert_eq!(small.t_final, 1.0);
}
