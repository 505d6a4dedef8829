use std::path::Path;

use crmatch::config::TrainConfig;
use crmatch::data::{generate_synthetic, parse_cifar_binary, read_cifar_binary, SyntheticSpec};
use crmatch::trainer::{load_datasets, run};
use crmatch::Error;

#[test]
fn one_cifar_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.bin");
    let mut rec = vec![0u8; 3073];
    rec[1] = 255;
    std::fs::write(&path, &rec).unwrap();
    let ds = read_cifar_binary(&path).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.labels, vec![0]);
    assert_eq!(ds.images[0].at(0, 0, 0), 1.0);
    assert!(ds.images[0].data()[1..].iter().all(|&v| v == 0.0));
}

#[test]
fn cifar_planes_are_rgb_row_major() {
    let mut rec = vec![0u8; 3073];
    rec[0] = 7;
    rec[1 + 1024 + 32 + 2] = 51; // green, row 1, col 2
    let ds = parse_cifar_binary(Path::new("mem"), &rec).unwrap();
    assert_eq!(ds.labels, vec![7]);
    assert_eq!(ds.images[0].at(1, 1, 2), 0.2);
}

#[test]
fn truncated_or_bad_cifar_is_rejected() {
    let p = Path::new("mem");
    assert!(matches!(parse_cifar_binary(p, &vec![0u8; 3072]), Err(Error::Format { .. })));
    assert!(matches!(parse_cifar_binary(p, &vec![0u8; 2 * 3073 - 1]), Err(Error::Format { .. })));
    let mut rec = vec![0u8; 3073];
    rec[0] = 10;
    assert!(parse_cifar_binary(p, &rec).is_err());
    assert!(matches!(read_cifar_binary(Path::new("/no/such/file.bin")), Err(Error::Io { .. })));
}

#[test]
fn synthetic_is_deterministic_and_balanced() {
    let spec = SyntheticSpec { seed: 1, ..SyntheticSpec::default() };
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a.len(), 2400);
    assert_eq!(a.labels, b.labels);
    assert!(a.images.iter().zip(&b.images).all(|(x, y)| x.to_bits() == y.to_bits()));
    for c in 0..4 {
        assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 600);
    }
    assert!(a.images.iter().all(|i| i.data().iter().all(|v| (0.0..=1.0).contains(v))));
    let too_many = SyntheticSpec { num_classes: 99, ..spec };
    assert!(generate_synthetic(&too_many).is_err());
}

#[test]
fn synthetic_classes_are_learnable_from_25_labels() {
    let mut cfg = TrainConfig::desk();
    cfg.apply([("labels_per_class", "25"), ("lambda_u", "0"), ("lambda_r", "0"), ("eval_every", "2000")])
        .unwrap();
    let (train, test) = load_datasets(&cfg).unwrap();
    let r = run(&cfg, &train, &test).unwrap();
    assert!(r.err_ema < 0.40, "supervised error with 25 labels/class: {}", r.err_ema);
}
