//! On-disk format contracts: a committed little-endian bank fixture must
//! load bit-exactly on any platform, and the synthetic dataset's split
//! digests are pinned as cross-platform constants.

use pap_core::data::{desk_pair, DESK_TEST_LEN, DESK_TRAIN_LEN};
use pap_core::prompt::load_bank;
use std::path::{Path, PathBuf};

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny-bank")
}

/// SHA-256 digests of the standard desk-scale splits (seed 11). The
/// generator uses only exactly-rounded IEEE-754 operations, so these bytes
/// are identical on every OS and architecture; a change here is a breaking
/// change to every recorded experiment.
const DESK_TRAIN_DIGEST: &str =
    "d6bd7a4ff6cf3a43e60ca566a2dffd83af12fef30a759bba332506b83b32c63d";
const DESK_TEST_DIGEST: &str =
    "dd0d8b00d0a39d7629934ed51a6bc21b4e74a5a21e7a08518295f29402a416f5";

#[test]
fn committed_bank_fixture_loads_bit_exactly() {
    let bank = load_bank(&fixture_dir()).unwrap();
    assert_eq!(bank.num_classes, 2);
    assert_eq!(bank.image_shape, (1, 4, 4));
    assert_eq!(bank.weight, 0.75);
    assert_eq!(bank.provenance.seed, 42);
    assert_eq!(bank.provenance.config_digest, "fixture-config-digest");
    assert_eq!(bank.provenance.epochs, 2);
    assert_eq!(bank.provenance.weight_trajectory, vec![1.0, 0.75]);

    // The blobs encode k*0.03125 − 0.5 and k*0.0625 in flat row-major
    // order; every value must round-trip bit-exactly through the f32-LE
    // encoding regardless of host endianness.
    for (k, (&p, &a)) in bank.phase.iter().zip(bank.amplitude.iter()).enumerate() {
        let want_p = (k as f32) * 0.03125 - 0.5;
        let want_a = (k as f32) * 0.0625;
        assert_eq!(p.to_bits(), want_p.to_bits(), "phase[{k}]");
        assert_eq!(a.to_bits(), want_a.to_bits(), "amplitude[{k}]");
    }
}

#[test]
fn fixture_round_trips_to_identical_bytes() {
    let bank = load_bank(&fixture_dir()).unwrap();
    let out = std::env::temp_dir().join(format!("pap-fixture-rt-{}", std::process::id()));
    bank.save(&out).unwrap();
    for file in ["phase.bin", "amplitude.bin"] {
        let original = std::fs::read(fixture_dir().join(file)).unwrap();
        let rewritten = std::fs::read(out.join(file)).unwrap();
        assert_eq!(original, rewritten, "{file} changed across a load/save cycle");
    }
    let reloaded = load_bank(&out).unwrap();
    assert_eq!(reloaded.weight, bank.weight);
    assert_eq!(
        reloaded.provenance.weight_trajectory,
        bank.provenance.weight_trajectory
    );
    std::fs::remove_dir_all(&out).ok();
}

#[test]
fn corrupted_blob_is_rejected_by_checksum() {
    let src = fixture_dir();
    let dir = std::env::temp_dir().join(format!("pap-fixture-bad-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    for file in ["manifest.json", "phase.bin", "amplitude.bin"] {
        std::fs::copy(src.join(file), dir.join(file)).unwrap();
    }
    let mut bytes = std::fs::read(dir.join("phase.bin")).unwrap();
    bytes[5] ^= 0x40;
    std::fs::write(dir.join("phase.bin"), &bytes).unwrap();
    let err = load_bank(&dir).unwrap_err();
    assert!(
        err.to_string().contains("checksum"),
        "unexpected error: {err}"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn desk_split_digests_are_pinned() {
    let (train, test) = desk_pair(11).unwrap();
    assert_eq!(train.len(), DESK_TRAIN_LEN);
    assert_eq!(test.len(), DESK_TEST_LEN);
    assert_eq!(train.digest(), DESK_TRAIN_DIGEST);
    assert_eq!(test.digest(), DESK_TEST_DIGEST);
}
