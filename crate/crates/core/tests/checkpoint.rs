mod common;

use common::tiny_bundle;
use depscreen_core::checkpoint::{from_bytes, load_bundle, save_bundle, to_bytes, FORMAT_VERSION};
use depscreen_core::Error;

#[test]
fn save_load_save_is_byte_identical() {
    let mut bundle = tiny_bundle(3);
    bundle.metadata.final_loss = Some(0.123_456_789_012_345_67);
    bundle.train.margin = 0.7;
    let bytes = to_bytes(&bundle).unwrap();
    let back = from_bytes(&bytes).unwrap();
    assert_eq!(back, bundle);
    assert_eq!(to_bytes(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_bundle(&bundle, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(load_bundle(&path).unwrap(), bundle);
}

#[test]
fn identical_builds_give_identical_files() {
    assert_eq!(to_bytes(&tiny_bundle(8)).unwrap(), to_bytes(&tiny_bundle(8)).unwrap());
    assert_ne!(to_bytes(&tiny_bundle(8)).unwrap(), to_bytes(&tiny_bundle(9)).unwrap());
}

#[test]
fn every_corrupted_byte_is_detected() {
    let bytes = to_bytes(&tiny_bundle(1)).unwrap();
    for i in (12..bytes.len()).step_by(37) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x40;
        assert!(matches!(from_bytes(&bad), Err(Error::Checksum)), "byte {i}");
    }
}

#[test]
fn newer_format_is_rejected_explicitly() {
    let mut bytes = to_bytes(&tiny_bundle(1)).unwrap();
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match from_bytes(&bytes) {
        Err(Error::UnsupportedVersion { found, supported }) => {
            assert_eq!(found, FORMAT_VERSION + 1);
            assert_eq!(supported, FORMAT_VERSION);
        }
        other => panic!("expected unsupported version, got {other:?}"),
    }
}

#[test]
fn truncation_and_foreign_files_fail() {
    let bytes = to_bytes(&tiny_bundle(1)).unwrap();
    for len in [0, 5, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(from_bytes(&bytes[..len]).is_err(), "length {len}");
    }
    let mut foreign = bytes.clone();
    foreign[0] = b'X';
    assert!(matches!(from_bytes(&foreign), Err(Error::Checkpoint(_))));
}
