mod common;

use common::fixtures::{glyph_family_ks, ks_statistic, write_idx};
use patchmi::data::{self, load_idx, load_idx_with, IdxOptions, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
use patchmi::Error;
use proptest::prelude::*;

fn fixture(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf, Vec<u8>) {
    let pixels: Vec<u8> = (0..2 * 3 * 4).map(|i| (i * 11) as u8).collect();
    let images = dir.join("images.idx");
    let labels = dir.join("labels.idx");
    write_idx(&images, IDX_IMAGES_MAGIC, &[2, 3, 4], &pixels);
    write_idx(&labels, IDX_LABELS_MAGIC, &[2], &[7, 1]);
    (images, labels, pixels)
}

const RAW: IdxOptions = IdxOptions {
    resize_to: None,
    transpose: false,
};

#[test]
fn two_image_fixture_is_recovered_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels, pixels) = fixture(dir.path());
    let ds = load_idx_with(&images, &labels, RAW).unwrap();
    assert_eq!(ds.images.shape(), &[2, 1, 3, 4]);
    assert_eq!(ds.labels, vec![7, 1]);
    for (v, &b) in ds.images.data().iter().zip(&pixels) {
        assert_eq!(*v, (b as f64 / 255.0 - 0.5) / 0.5);
    }
    assert!(ds.provenance.contains("images.idx"));
}

#[test]
fn transpose_swaps_rows_and_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels, pixels) = fixture(dir.path());
    let t = IdxOptions { transpose: true, ..RAW };
    let ds = load_idx_with(&images, &labels, t).unwrap();
    assert_eq!(ds.images.shape(), &[2, 1, 4, 3]);
    let v = ds.images.data();
    for n in 0..2 {
        for r in 0..3 {
            for c in 0..4 {
                let expect = (pixels[n * 12 + r * 4 + c] as f64 / 255.0 - 0.5) / 0.5;
                assert_eq!(v[n * 12 + c * 3 + r], expect);
            }
        }
    }
}

#[test]
fn default_load_resizes_to_32() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("sq.idx");
    let labels = dir.path().join("sq-labels.idx");
    write_idx(&images, IDX_IMAGES_MAGIC, &[1, 28, 28], &[200; 28 * 28]);
    write_idx(&labels, IDX_LABELS_MAGIC, &[1], &[4]);
    let ds = load_idx(&images, &labels).unwrap();
    let expect = (200.0 / 255.0 - 0.5) / 0.5;
    assert!(ds.images.data().iter().all(|v| (v - expect).abs() < 1e-12));
    assert_eq!(ds.images.shape(), &[1, 1, 32, 32]);
}

#[test]
fn label_file_as_images_is_a_magic_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, labels, _) = fixture(dir.path());
    let err = load_idx_with(&labels, &labels, RAW).unwrap_err();
    assert!(matches!(err, Error::IdxMagic { found: 0x801, .. }), "{err}");
}

#[test]
fn truncated_images_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels, _) = fixture(dir.path());
    let bytes = std::fs::read(&images).unwrap();
    std::fs::write(&images, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_idx_with(&images, &labels, RAW), Err(Error::IdxTruncated { .. })));
    std::fs::write(&images, &bytes[..6]).unwrap();
    assert!(matches!(load_idx_with(&images, &labels, RAW), Err(Error::IdxTruncated { .. })));
}

#[test]
fn count_mismatch_is_a_dimension_error() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels, _) = fixture(dir.path());
    write_idx(&labels, IDX_LABELS_MAGIC, &[3], &[0, 1, 2]);
    assert!(matches!(load_idx_with(&images, &labels, RAW), Err(Error::IdxDimension(_))));
}

#[test]
fn missing_file_names_the_path() {
    let err = data::require_file(std::path::Path::new("/no/such/train-images")).unwrap_err();
    assert!(err.to_string().contains("/no/such/train-images"));
}

#[test]
fn glyph_families_share_pixel_statistics() {
    let ks = glyph_family_ks(30);
    assert!(ks < 0.2, "KS statistic {ks}");
}

#[test]
fn ks_statistic_extremes() {
    assert_eq!(ks_statistic(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
    assert_eq!(ks_statistic(&[0.0, 0.1], &[1.0, 2.0]), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_is_exhaustive_disjoint_and_stratified(per_class in 1usize..12, frac in 0.05f64..0.95, seed in 0u64..1000) {
        let ds = data::synth_glyphs(&data::GlyphSpec { classes: 3, image_size: 8, ..data::GlyphSpec::target(per_class, seed) }).unwrap();
        let (a, b) = data::split(&ds, frac, seed).unwrap();
        prop_assert_eq!(a.len() + b.len(), ds.len());
        let mut all: Vec<Vec<u64>> = a.images.data().chunks(64).chain(b.images.data().chunks(64))
            .map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
        let mut orig: Vec<Vec<u64>> = ds.images.data().chunks(64).map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
        all.sort();
        orig.sort();
        prop_assert_eq!(all, orig);
        for k in 0..3 {
            let want = frac * per_class as f64;
            let got = a.class_indices(k).len() as f64;
            prop_assert!((got - want).abs() <= 1.0, "class {}: {} vs {}", k, got, want);
        }
        let (a2, _) = data::split(&ds, frac, seed).unwrap();
        prop_assert_eq!(a2.labels, a.labels);
    }
}
