//! Seeded generators must keep producing the same bytes. Set
//! `E2EMIL_BLESS=1` to rewrite the stored checksums after an intended change
//! to a generator or a file format.

use std::path::PathBuf;

use e2emil::data::{encode_dataset, generate_dataset, summarize, DatasetConfig};
use e2emil::nn::{init_params, BnMode, ModelDims};

fn check_golden(file: &str, checksum: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(file);
    if std::env::var_os("E2EMIL_BLESS").is_some() {
        std::fs::write(&path, format!("{checksum}\n")).unwrap();
    }
    let stored = std::fs::read_to_string(&path).expect("golden checksum file");
    assert_eq!(checksum, stored.trim(), "{file}");
}

#[test]
fn default_dataset_matches_golden_checksum() {
    let cfg = DatasetConfig {
        n_slides: 200,
        tiles_max: 600,
        ..DatasetConfig::default()
    };
    let slides = generate_dataset(&cfg, 7).unwrap();
    let again = generate_dataset(&cfg, 7).unwrap();
    assert_eq!(encode_dataset(&slides), encode_dataset(&again));

    check_golden("dataset_seed7.sha256", &summarize(&slides).checksum);
}

#[test]
fn init_params_match_golden_checksum() {
    let dims = ModelDims::new(16, vec![32, 16], 8).with_batch_norm(Some(BnMode::Synced));
    let params = init_params(3, &dims).unwrap();
    assert_eq!(params.checksum(), init_params(3, &dims).unwrap().checksum());
    check_golden("init_seed3.sha256", &params.checksum());
}

#[test]
fn other_seeds_differ() {
    let cfg = DatasetConfig {
        n_slides: 20,
        ..DatasetConfig::default()
    };
    let a = summarize(&generate_dataset(&cfg, 7).unwrap()).checksum;
    let b = summarize(&generate_dataset(&cfg, 8).unwrap()).checksum;
    assert_ne!(a, b);
}
