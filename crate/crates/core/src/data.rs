//! Datasets: IDX ingestion, procedural glyph families and stratified splits.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment;
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Maps `[0, 1]` intensities to `[-1, 1]` (mean 0.5, std 0.5).
pub fn normalize(v: f64) -> f64 {
    (v - 0.5) / 0.5
}

pub fn denormalize(v: f64) -> f64 {
    v * 0.5 + 0.5
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, c, h, w]`, normalised to `[-1, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Vec<String>, provenance: String) -> Result<Self> {
        if images.shape().len() != 4 || images.batch_len() != labels.len() {
            return Err(Error::Shape(format!(
                "dataset of {} labels with images {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            class_names,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_images(&self, class: usize) -> Tensor {
        self.images.select(&self.class_indices(class))
    }

    pub fn subset(&self, indices: &[usize], note: &str) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            provenance: format!("{} [{note}]", self.provenance),
        }
    }
}

/// Stratified split into `(train, val)`; each class contributes
/// `round(train_fraction * n_class)` samples to the training part.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..ds.num_classes() {
        let mut idx = ds.class_indices(c);
        idx.shuffle(&mut rng);
        let k = (train_fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..k]);
        val.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train, "train"), ds.subset(&val, "val")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdxOptions {
    /// Bilinear resize of square images to this side; `None` keeps them.
    pub resize_to: Option<usize>,
    /// Swaps rows and columns (EMNIST stores images transposed).
    pub transpose: bool,
}

impl Default for IdxOptions {
    fn default() -> Self {
        Self {
            resize_to: Some(32),
            transpose: false,
        }
    }
}

/// Raw IDX payload: dimensions and unsigned bytes.
pub fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = |expected| Error::IdxTruncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    let be = |o: usize| u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let found = be(0);
    if found != magic {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = (0..ndims).map(|i| be(4 + 4 * i) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(Error::IdxDimension(format!(
            "{}: {} trailing bytes after {:?}",
            path.display(),
            bytes.len() - expected,
            dims
        )));
    }
    Ok((dims, bytes[header..].to_vec()))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    load_idx_with(images_path, labels_path, IdxOptions::default())
}

pub fn load_idx_with(images_path: &Path, labels_path: &Path, opts: IdxOptions) -> Result<Dataset> {
    let (dims, pixels) = read_idx(images_path, IDX_IMAGES_MAGIC)?;
    let (ldims, labels) = read_idx(labels_path, IDX_LABELS_MAGIC)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(Error::IdxDimension(format!(
            "{} holds {n} images but {} holds {} labels",
            images_path.display(),
            labels_path.display(),
            ldims[0]
        )));
    }
    let mut data: Vec<f64> = pixels.iter().map(|&b| normalize(b as f64 / 255.0)).collect();
    let (mut h, mut w) = (h, w);
    if opts.transpose {
        let mut t = vec![0.0; data.len()];
        for i in 0..n {
            for r in 0..h {
                for c in 0..w {
                    t[i * h * w + c * h + r] = data[i * h * w + r * w + c];
                }
            }
        }
        data = t;
        std::mem::swap(&mut h, &mut w);
    }
    let mut images = Tensor::new(vec![n, 1, h, w], data)?;
    if let Some(size) = opts.resize_to {
        if h != w {
            return Err(Error::IdxDimension(format!("cannot resize {h}x{w} images")));
        }
        if size != h && n > 0 {
            images = resize_images(&images, size)?;
        }
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    Dataset::new(
        images,
        labels.iter().map(|&l| l as usize).collect(),
        (0..classes).map(|c| c.to_string()).collect(),
        format!("idx:{}+{}", images_path.display(), labels_path.display()),
    )
}

/// Bilinear resize of square `[n, c, s, s]` images.
pub fn resize_images(images: &Tensor, size: usize) -> Result<Tensor> {
    let from = images.shape()[2];
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let y = g.resample(x, &[augment::resize(from, size)], size, size)?;
    Ok(g.detach(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphFamily {
    TargetDigits,
    AuxStrokes,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Jitter {
    pub rotation_deg: f64,
    /// Stroke width in pixels.
    pub thickness: [f64; 2],
    /// Maximum shift in pixels.
    pub translation: f64,
    pub scale: [f64; 2],
    /// Amplitude scale of the smooth stroke displacement, in glyph-box units.
    pub wobble: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            rotation_deg: 12.0,
            thickness: [1.6, 2.8],
            translation: 2.0,
            scale: [0.85, 1.1],
            wobble: 0.04,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlyphSpec {
    pub family: GlyphFamily,
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub jitter: Jitter,
    pub seed: u64,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        Self {
            family: GlyphFamily::TargetDigits,
            classes: 10,
            samples_per_class: 100,
            image_size: 32,
            jitter: Jitter::default(),
            seed: 0,
        }
    }
}

impl GlyphSpec {
    pub fn target(samples_per_class: usize, seed: u64) -> Self {
        Self {
            samples_per_class,
            seed,
            ..Self::default()
        }
    }

    pub fn aux(classes: usize, samples_per_class: usize, seed: u64) -> Self {
        Self {
            family: GlyphFamily::AuxStrokes,
            classes,
            samples_per_class,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.image_size < 8 {
            return Err(Error::Config(format!(
                "glyph spec needs classes >= 1 and image_size >= 8, got {} and {}",
                self.classes, self.image_size
            )));
        }
        if self.family == GlyphFamily::TargetDigits && self.classes > 10 {
            return Err(Error::Config(format!("at most 10 digit classes, got {}", self.classes)));
        }
        let j = &self.jitter;
        if j.thickness[0] <= 0.0 || j.thickness[0] > j.thickness[1] || j.scale[0] <= 0.0 || j.scale[0] > j.scale[1] {
            return Err(Error::Config("jitter ranges must be positive and ordered".into()));
        }
        Ok(())
    }
}

type Stroke = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Stroke {
    let n = (((to_deg - from_deg).abs() / 15.0).ceil() as usize).max(2);
    (0..=n)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f64 / n as f64).to_radians();
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Digit skeletons in a unit box, `x` right and `y` down.
fn digit_strokes(d: usize) -> Vec<Stroke> {
    match d {
        0 => vec![arc(0.5, 0.5, 0.2, 0.3, 0.0, 360.0)],
        1 => vec![vec![(0.4, 0.3), (0.52, 0.2), (0.52, 0.8)]],
        2 => vec![
            arc(0.5, 0.35, 0.17, 0.15, 180.0, 380.0),
            vec![(0.66, 0.4), (0.32, 0.8), (0.7, 0.8)],
        ],
        3 => vec![arc(0.48, 0.34, 0.17, 0.14, 200.0, 450.0), arc(0.48, 0.64, 0.19, 0.16, 270.0, 520.0)],
        4 => vec![vec![(0.6, 0.2), (0.3, 0.6), (0.72, 0.6)], vec![(0.6, 0.2), (0.6, 0.8)]],
        5 => vec![
            vec![(0.68, 0.2), (0.36, 0.2), (0.34, 0.46)],
            arc(0.49, 0.62, 0.18, 0.17, 225.0, 495.0),
        ],
        6 => vec![arc(0.62, 0.45, 0.3, 0.27, 205.0, 280.0), arc(0.5, 0.63, 0.17, 0.17, 0.0, 360.0)],
        7 => vec![vec![(0.3, 0.2), (0.7, 0.2), (0.44, 0.8)]],
        8 => vec![arc(0.5, 0.34, 0.14, 0.14, 0.0, 360.0), arc(0.5, 0.65, 0.18, 0.16, 0.0, 360.0)],
        _ => vec![arc(0.5, 0.37, 0.16, 0.16, 0.0, 360.0), vec![(0.66, 0.38), (0.62, 0.8)]],
    }
}

/// Building blocks of the auxiliary glyphs, drawn inside a component box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    HBar,
    VBar,
    Ring,
    CornerTopRight,
    CornerBottomLeft,
    Square,
    Cross,
    Hook,
}

const PARTS: [Part; 8] = [
    Part::HBar,
    Part::VBar,
    Part::Ring,
    Part::CornerTopRight,
    Part::CornerBottomLeft,
    Part::Square,
    Part::Cross,
    Part::Hook,
];

fn part_strokes(p: Part, (x0, y0, x1, y1): (f64, f64, f64, f64)) -> Vec<Stroke> {
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    match p {
        Part::HBar => vec![vec![(x0, cy), (x1, cy)]],
        Part::VBar => vec![vec![(cx, y0), (cx, y1)]],
        Part::Ring => vec![arc(cx, cy, (x1 - x0) / 2.0, (y1 - y0) / 2.0, 0.0, 360.0)],
        Part::CornerTopRight => vec![vec![(x0, y0), (x1, y0), (x1, y1)]],
        Part::CornerBottomLeft => vec![vec![(x0, y0), (x0, y1), (x1, y1)]],
        Part::Square => vec![vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]],
        Part::Cross => vec![vec![(x0, cy), (x1, cy)], vec![(cx, y0), (cx, y1)]],
        Part::Hook => vec![vec![(x0, y0), (x1, y0)], arc(cx, cy, (x1 - x0) / 2.0, (y1 - y0) / 2.0, 270.0, 450.0)],
    }
}

/// Component boxes of each layout: side by side, stacked, and side by
/// side over a full-width base.
const LAYOUTS: [&[(f64, f64, f64, f64)]; 3] = [
    &[(0.2, 0.22, 0.47, 0.78), (0.55, 0.22, 0.8, 0.78)],
    &[(0.25, 0.18, 0.75, 0.45), (0.25, 0.55, 0.75, 0.82)],
    &[(0.2, 0.18, 0.47, 0.48), (0.55, 0.18, 0.8, 0.48), (0.22, 0.6, 0.78, 0.82)],
];

/// Distinct part assignments for `classes` auxiliary glyphs.
fn aux_templates(classes: usize, seed: u64) -> Vec<Vec<Stroke>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA0C5_u64);
    let mut seen = Vec::new();
    let mut out = Vec::with_capacity(classes);
    while out.len() < classes {
        let layout = rng.gen_range(0..LAYOUTS.len());
        let parts: Vec<usize> = LAYOUTS[layout].iter().map(|_| rng.gen_range(0..PARTS.len())).collect();
        // rings and bars alone spell digits such as 1, 8 or 10
        let digit_like = parts.iter().all(|&p| matches!(PARTS[p], Part::Ring | Part::VBar));
        let key = (layout, parts.clone());
        if digit_like || seen.contains(&key) {
            continue;
        }
        seen.push(key);
        out.push(
            LAYOUTS[layout]
                .iter()
                .zip(&parts)
                .flat_map(|(&bx, &p)| part_strokes(PARTS[p], bx))
                .collect(),
        );
    }
    out
}

fn segment_distance((px, py): (f64, f64), (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
}

/// Renders strokes given in pixel coordinates to `[0, 1]` intensities
/// with a one-pixel linear edge ramp.
fn render(strokes: &[Stroke], size: usize, thickness: f64) -> Vec<f64> {
    let half = thickness / 2.0;
    let mut img = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let p = (c as f64, r as f64);
            let mut d = f64::INFINITY;
            for s in strokes {
                for seg in s.windows(2) {
                    d = d.min(segment_distance(p, seg[0], seg[1]));
                }
            }
            img[r * size + c] = (half + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    img
}

fn draw_sample(template: &[Stroke], spec: &GlyphSpec, rng: &mut impl Rng) -> Vec<f64> {
    let j = &spec.jitter;
    let u = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let theta = u(rng, -j.rotation_deg, j.rotation_deg).to_radians();
    let scale = u(rng, j.scale[0], j.scale[1]);
    let thick = u(rng, j.thickness[0], j.thickness[1]);
    let tx = u(rng, -j.translation, j.translation);
    let ty = u(rng, -j.translation, j.translation);
    let size = spec.image_size as f64;
    let (s, c) = theta.sin_cos();
    // smooth displacement field, one random sinusoid per axis
    let mut wave = || {
        let a: f64 = StandardNormal.sample(rng);
        (j.wobble * a, rng.gen_range(0.0..std::f64::consts::TAU))
    };
    let ((ax, px), (ay, py)) = (wave(), wave());
    let strokes: Vec<Stroke> = template
        .iter()
        .map(|st| {
            st.iter()
                .map(|&(x, y)| {
                    let dx = ax * (std::f64::consts::TAU * y + px).sin();
                    let dy = ay * (std::f64::consts::TAU * x + py).sin();
                    let (x, y) = (x - 0.5 + dx, y - 0.5 + dy);
                    let (x, y) = (c * x - s * y, s * x + c * y);
                    (
                        (0.5 + scale * x) * (size - 1.0) + tx,
                        (0.5 + scale * y) * (size - 1.0) + ty,
                    )
                })
                .collect()
        })
        .collect();
    render(&strokes, spec.image_size, thick)
}

/// Deterministic glyph dataset; sample `i` of class `k` depends only on
/// the seed, `k` and `i`.
pub fn synth_glyphs(spec: &GlyphSpec) -> Result<Dataset> {
    spec.validate()?;
    let templates: Vec<Vec<Stroke>> = match spec.family {
        GlyphFamily::TargetDigits => (0..spec.classes).map(digit_strokes).collect(),
        GlyphFamily::AuxStrokes => aux_templates(spec.classes, spec.seed),
    };
    let class_names = match spec.family {
        GlyphFamily::TargetDigits => (0..spec.classes).map(|k| format!("digit-{k}")).collect(),
        GlyphFamily::AuxStrokes => (0..spec.classes).map(|k| format!("stroke-{k}")).collect(),
    };
    let n = spec.classes * spec.samples_per_class;
    let plane = spec.image_size * spec.image_size;
    let mut data = Vec::with_capacity(n * plane);
    let mut labels = Vec::with_capacity(n);
    for (k, t) in templates.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((k as u64) << 32) | i as u64);
            data.extend(draw_sample(t, spec, &mut rng).into_iter().map(normalize));
            labels.push(k);
        }
    }
    let images = Tensor::new(vec![n, 1, spec.image_size, spec.image_size], data)?;
    let provenance = format!("synthetic:{}", serde_json::to_string(spec)?);
    Dataset::new(images, labels, class_names, provenance)
}

/// Path-aware existence check used before long runs.
pub fn require_file(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
        ))
    }
}
