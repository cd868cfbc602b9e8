use std::path::PathBuf;

use grim_core::bcrc::{decode_bcrc, encode_bcrc, BcrcMatrix};
use grim_core::pruner::{BcrMask, BlockPartition};
use grim_core::reorder::plan_reorder;
use grim_core::tensor::DenseMatrix;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Rows 0 and 3 keep columns {0, 3, 6}, row 2 keeps {0, 3}, row 1 keeps {6}.
fn shared_columns() -> (DenseMatrix, BcrMask) {
    let p = BlockPartition::new(4, 8, 2, 2).unwrap();
    let rows = vec![vec![true, false], vec![true, true], vec![true, true], vec![false, true]];
    let cols = vec![
        vec![true, false, false, true],
        vec![false, false, true, false],
        vec![true, false, false, true],
        vec![false, false, true, false],
    ];
    let mask = BcrMask::from_parts(p, rows, cols).unwrap();
    let w = DenseMatrix::from_fn(4, 8, |r, c| (10 * r + c + 1) as f32);
    (mask.apply(&w).unwrap(), mask)
}

#[test]
fn encoder_matches_golden_bytes() {
    let (w, mask) = shared_columns();
    let b = encode_bcrc(&w, &mask, &plan_reorder(&w, &mask).unwrap()).unwrap();
    let want = std::fs::read(golden("shared_columns.bcrc")).unwrap();
    assert_eq!(b.to_bytes(), want);

    assert_eq!(&b.reorder()[..2], &[0, 3]);
    assert_eq!(&b.row_offset()[..2], &[0, 3]);
    assert_eq!(&b.column_stride()[..2], &[0, 3]);
    assert_eq!(&b.compact_column()[..3], &[0, 3, 6]);
    assert_eq!(&b.occurrence()[..2], &[0, 2]);
}

#[test]
fn golden_file_decodes() {
    let b = BcrcMatrix::read_file(&golden("shared_columns.bcrc")).unwrap();
    let (w, _) = shared_columns();
    assert_eq!(decode_bcrc(&b).unwrap(), w);
}

#[test]
fn file_round_trip() {
    let (w, mask) = shared_columns();
    let b = encode_bcrc(&w, &mask, &plan_reorder(&w, &mask).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bcrc");
    b.write_file(&path).unwrap();
    assert_eq!(BcrcMatrix::read_file(&path).unwrap(), b);
}
