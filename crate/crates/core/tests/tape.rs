mod common;

use std::path::{Path, PathBuf};

use common::*;
use restitch_core::similarity::{build_similarity_matrix, DatasetBatches};
use restitch_core::tape::{
    capture_tapes, read_tape, read_tape_set, similarity_from_tapes, write_tape, CapturedUnit,
};
use restitch_core::{DType, Error, Network, WeightStore};

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_tapes")
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

#[test]
fn golden_tapes_parse_and_verify() {
    let front = read_tape_set(&golden().join("golden-front")).unwrap();
    assert_eq!(front.len(), 2);
    let t = &front[1];
    assert_eq!(t.manifest.model_id, "golden-front");
    assert_eq!(t.manifest.batch.repeat_index, 1);
    assert_eq!(t.manifest.batch.seed, 20240601);
    let shapes: Vec<&[usize]> = t.activations.iter().map(|a| a.shape()).collect();
    assert_eq!(shapes, vec![&[8, 2, 3, 3][..], &[8, 4, 3], &[8, 5]]);
    assert!(t.activations.iter().all(|a| a.dtype() == DType::F32));
    let pre = t.manifest.preprocessing.as_ref().unwrap();
    assert_eq!(pre["normalize"], "none");
}

#[test]
fn golden_cka_matches_numpy_reference() {
    let front = read_tape_set(&golden().join("golden-front")).unwrap();
    let back = read_tape_set(&golden().join("golden-back")).unwrap();
    let m = similarity_from_tapes(&front, &back).unwrap();
    let text = std::fs::read_to_string(golden().join("expected_cka.json")).unwrap();
    let want: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(m.repeats, 2);
    assert_eq!(m.batch_size, 8);
    assert_eq!(m.dataset_id, "golden-synthetic");
    for (i, row) in want["values"].as_array().unwrap().iter().enumerate() {
        for (j, v) in row.as_array().unwrap().iter().enumerate() {
            let v = v.as_f64().unwrap();
            assert!(
                (m.get(i, j) - v).abs() < 1e-10,
                "({i}, {j}): {} vs {v}",
                m.get(i, j)
            );
        }
    }
}

#[test]
fn rewriting_golden_tape_reproduces_blobs() {
    let src = golden().join("golden-front/repeat_000");
    let tape = read_tape(&src).unwrap();
    let units: Vec<CapturedUnit> = tape
        .manifest
        .units
        .iter()
        .zip(&tape.activations)
        .map(|(u, a)| CapturedUnit {
            index: u.index,
            name: u.name.clone(),
            kind: u.kind.clone(),
            activation: a.clone(),
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let m = &tape.manifest;
    let out = write_tape(dir.path(), &m.model_id, &m.dataset_id, m.batch, &units).unwrap();
    assert_eq!(out.units, m.units);
    for u in &out.units {
        assert_eq!(
            std::fs::read(dir.path().join(&u.blob)).unwrap(),
            std::fs::read(src.join(&u.blob)).unwrap()
        );
    }
}

#[test]
fn tampered_golden_blob_is_corruption() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&golden().join("golden-back/repeat_000"), dir.path());
    let blob = dir.path().join("u001_fc.f32");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[5] ^= 0x40;
    std::fs::write(&blob, bytes).unwrap();
    assert!(matches!(
        read_tape(dir.path()),
        Err(Error::Corruption { .. })
    ));
}

#[test]
fn unpaired_golden_sets_are_rejected() {
    let front = read_tape_set(&golden().join("golden-front")).unwrap();
    let back = read_tape_set(&golden().join("golden-back")).unwrap();
    let err = similarity_from_tapes(&front, &back[..1]).unwrap_err();
    assert!(matches!(err, Error::Pairing(_)), "{err}");
    assert!(err.to_string().contains("repeat1"), "{err}");
}

#[test]
fn tapes_and_live_capture_agree_bitwise() {
    let data = dataset(8);
    let a = Network::new(
        large_spec(),
        WeightStore::init(&large_spec(), 1, DType::F32),
    )
    .unwrap();
    let b = Network::new(
        small_spec(),
        WeightStore::init(&small_spec(), 2, DType::F32),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    capture_tapes(
        &a,
        &mut DatasetBatches::new(&data, true, 16, 4),
        3,
        &dir.path().join("a"),
    )
    .unwrap();
    capture_tapes(
        &b,
        &mut DatasetBatches::new(&data, true, 16, 4),
        3,
        &dir.path().join("b"),
    )
    .unwrap();
    let taped = similarity_from_tapes(
        &read_tape_set(&dir.path().join("a")).unwrap(),
        &read_tape_set(&dir.path().join("b")).unwrap(),
    )
    .unwrap();
    let live =
        build_similarity_matrix(&a, &b, &mut DatasetBatches::new(&data, true, 16, 4), 3).unwrap();
    assert_eq!(taped, live);
}
