//! Independent IDX writer and dataset statistics.

use std::path::Path;

use patchmi::data::{synth_glyphs, GlyphSpec};

/// Big-endian IDX file: magic, dims, then raw bytes.
pub fn write_idx(path: &Path, magic: u32, dims: &[u32], payload: &[u8]) {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    std::fs::write(path, out).unwrap();
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// KS statistic between pixel intensities of the digit and stroke families.
pub fn glyph_family_ks(per_class: usize) -> f64 {
    let target = synth_glyphs(&GlyphSpec::target(per_class, 1)).unwrap();
    let aux = synth_glyphs(&GlyphSpec::aux(20, per_class, 2)).unwrap();
    ks_statistic(target.images.data(), aux.images.data())
}
