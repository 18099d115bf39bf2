use std::fs;
use std::path::{Path, PathBuf};

use bdkd::error::CliError;
use bdkd::io;
use bdkd_core::data::{self, Normalizer, Split};
use bdkd_core::models::{MlpSpec, Network};
use bdkd_core::tensor::Tensor;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn parses_fixture_exactly() {
    let ds = io::load_csv(&fixture("three_rows.csv"), "label").unwrap();
    assert_eq!(ds.features().shape(), &[3, 2]);
    assert_eq!(ds.features().data(), &[1.5, -2.0, 0.25, 0.3, -7.0, 0.0]);
    assert_eq!(ds.labels(), &[0, 1, 2]);
    assert_eq!(ds.num_classes(), 3);
    assert_eq!(ds.split_tag(), Split::Full);
}

#[test]
fn label_column_can_sit_anywhere() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "y,a,b\n1,0.5,2\n0,1,-1\n").unwrap();
    let ds = io::load_csv(&path, "y").unwrap();
    assert_eq!(ds.features().data(), &[0.5, 2.0, 1.0, -1.0]);
    assert_eq!(ds.labels(), &[1, 0]);
    assert!(matches!(io::load_csv(&path, "label"), Err(CliError::Data(_))));
}

#[test]
fn dataset_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spirals.csv");
    let ds = data::gen_spirals(3, 20, 0.3, 7).unwrap();
    io::write_dataset_csv(&path, &ds).unwrap();
    let back = io::load_csv(&path, "label").unwrap();
    assert_eq!(back.features(), ds.features());
    assert_eq!(back.labels(), ds.labels());
}

#[test]
fn constant_column_normalises_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    fs::write(&path, "a,b,label\n4,1,0\n4,2,1\n4,3,0\n").unwrap();
    let ds = io::load_csv(&path, "label").unwrap();
    let norm = Normalizer::fit(&ds).apply(&ds).unwrap();
    let x = norm.features();
    assert!((0..3).all(|i| x.row(i)[0] == 0.0));
    assert!(x.data().iter().all(|v| v.is_finite()));
}

#[test]
fn malformed_rows_report_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("x0,label\n1,0\nabc,1\n", 3),
        ("x0,label\n1,0\n2,1\n3\n", 4),
        ("x0,label\n1,-1\n", 2),
        ("x0,label\ninf,0\n", 2),
    ];
    for (text, line) in cases {
        let path = dir.path().join("bad.csv");
        fs::write(&path, text).unwrap();
        match io::load_csv(&path, "label") {
            Err(CliError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let err = io::load_csv(Path::new("/nonexistent/data.csv"), "label").unwrap_err();
    assert!(matches!(err, CliError::Io { .. }));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn logits_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("logits.csv");
    let z = Tensor::from_rows(&[[0.1, -1e-300, 3.0], [f64::MIN_POSITIVE, 2.5e10, -0.3333333333333333]]).unwrap();
    io::write_logits(&path, &z, &[2, 0]).unwrap();
    let (back, labels) = io::read_logits(&path).unwrap();
    assert_eq!(back, z);
    assert_eq!(labels, Some(vec![2, 0]));
    assert_eq!(io::read_labels(&path).unwrap(), vec![2, 0]);
}

#[test]
fn checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("student.ckpt");
    let net = Network::init(MlpSpec::new(3, &[5, 4], 3, 9)).unwrap();
    io::save_checkpoint(&path, &net).unwrap();
    let back = io::load_checkpoint(&path).unwrap();
    assert_eq!(back.spec(), net.spec());
    assert_eq!(back.params(), net.params());
    let x = Tensor::from_rows(&[[0.2, -1.0, 3.0]]).unwrap();
    assert_eq!(back.predict(&x).unwrap(), net.predict(&x).unwrap());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    let net = Network::init(MlpSpec::new(2, &[3], 2, 1)).unwrap();
    let mut ckpt = io::Checkpoint::of(&net);
    ckpt.params[0].data.pop();
    io::write_json(&path, &ckpt).unwrap();
    assert!(io::load_checkpoint(&path).is_err());
}
