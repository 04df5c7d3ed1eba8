use std::collections::HashSet;
use std::fs;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rlfat_core::data::{self, parse_cifar10, parse_idx, write_cifar10_binary, write_idx};
use rlfat_core::{Dataset, Model, ModelSpec, Tensor};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-desk")
}

#[test]
fn desk_fixture_round_trips_byte_for_byte() {
    for split in ["train", "test"] {
        let images = fs::read(fixture_dir().join(format!("{split}-images-idx3-ubyte"))).unwrap();
        let labels = fs::read(fixture_dir().join(format!("{split}-labels-idx1-ubyte"))).unwrap();
        let ds = parse_idx::<f32>(&images, &labels).unwrap();
        assert_eq!(ds.len(), 500);
        assert_eq!(ds.image_shape(), [1, 28, 28]);
        assert_eq!(ds.classes, 10);
        let (i2, l2) = write_idx(&ds).unwrap();
        assert_eq!(i2, images);
        assert_eq!(l2, labels);
    }
}

fn quantized(n: usize, classes: usize, shape: [usize; 3], seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = data::synthetic_blobs::<f64>(classes, n, shape, &mut rng).unwrap();
    let images = ds.images.map(|v| (v * 255.0).round() / 255.0);
    Dataset::new(images, ds.labels, classes, "quantized").unwrap()
}

#[test]
fn cifar_writer_round_trips() {
    let ds = quantized(2, 10, [3, 32, 32], 1);
    let bytes = write_cifar10_binary(&ds).unwrap();
    assert_eq!(bytes.len(), 20 * 3073);
    let back = parse_cifar10::<f64>(&bytes).unwrap();
    assert_eq!(back.labels, ds.labels);
    assert!(back.images.max_abs_diff(&ds.images) < 1e-12);
    assert_eq!(write_cifar10_binary(&back).unwrap(), bytes);
}

#[test]
fn malformed_files_are_rejected() {
    let ds = quantized(1, 3, [1, 5, 5], 2);
    let (images, labels) = write_idx(&ds).unwrap();
    let mut bad_magic = images.clone();
    bad_magic[3] = 0x02;
    assert!(parse_idx::<f64>(&bad_magic, &labels).is_err());
    assert!(parse_idx::<f64>(&images[..images.len() - 1], &labels).is_err());
    assert!(parse_idx::<f64>(&images, &labels[..labels.len() - 1]).is_err());
    let mut trailing = images.clone();
    trailing.push(0);
    assert!(parse_idx::<f64>(&trailing, &labels).is_err());

    let cifar = write_cifar10_binary(&quantized(1, 10, [3, 32, 32], 3)).unwrap();
    assert!(parse_cifar10::<f64>(&cifar[..cifar.len() - 5]).is_err());
    let mut bad_label = cifar.clone();
    bad_label[0] = 10;
    assert!(parse_cifar10::<f64>(&bad_label).is_err());
    assert!(parse_cifar10::<f64>(&[]).is_err());
}

#[test]
fn dataset_rejects_out_of_range_pixels_and_labels() {
    let x = Tensor::<f64>::full(&[2, 1, 2, 2], 0.5);
    assert!(Dataset::new(x.clone(), vec![0, 2], 2, "t").is_err());
    assert!(Dataset::new(x.map(|v| v + 0.6), vec![0, 1], 2, "t").is_err());
    assert!(Dataset::new(x, vec![0, 1], 2, "t").is_ok());
}

#[test]
fn subsets_are_balanced_and_seed_dependent() {
    let ds = quantized(30, 4, [1, 4, 4], 4);
    let pick = |seed: u64| data::subset_indices(&ds.labels, 4, 10, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let a = pick(1);
    assert_eq!(a, pick(1));
    assert_ne!(a, pick(2));
    assert_eq!(a.iter().collect::<HashSet<_>>().len(), 40);
    let sub = ds.select(&a);
    assert_eq!(sub.class_counts(), vec![10; 4]);
    for (k, &i) in a.iter().enumerate() {
        assert_eq!(sub.labels[k], ds.labels[i]);
        assert_eq!(sub.images.row(k), ds.images.row(i));
    }
    assert!(data::subset_indices(&ds.labels, 4, 31, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn checkpoint_round_trip_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = Model::<f32>::build(ModelSpec::desk([1, 28, 28], 10, 3)).unwrap();
    model.save(&path).unwrap();
    let back = Model::<f32>::load(&path).unwrap();
    assert_eq!(back, model);
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes.truncate(last);
    fs::write(&path, &bytes).unwrap();
    assert!(Model::<f32>::load(&path).is_err());
}
