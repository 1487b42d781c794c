//! Seeded, differentiable image transforms. Geometric atoms become an
//! affine source map resampled bilinearly with border replication.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AffineMap, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Atom {
    Rotation {
        min_deg: f64,
        max_deg: f64,
    },
    ResizedCrop {
        size: usize,
        scale: [f64; 2],
        ratio: [f64; 2],
    },
    Pad {
        pixels: usize,
    },
    HorizontalFlip {
        p: f64,
    },
    Resize {
        size: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSpec {
    pub pipeline: Vec<Atom>,
    /// Draw parameters per image instead of once per batch.
    pub per_image: bool,
    /// Value written by `Pad`; -1 is the background of normalised images.
    pub pad_fill: f64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            pipeline: Vec::new(),
            per_image: false,
            pad_fill: -1.0,
        }
    }
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn preset(name: &str) -> Result<Self> {
        let pipeline = match name {
            "grayscale_attack" => vec![
                Atom::Rotation {
                    min_deg: -20.0,
                    max_deg: 20.0,
                },
                Atom::ResizedCrop {
                    size: 32,
                    scale: [0.85, 1.0],
                    ratio: [0.9, 1.1],
                },
            ],
            "color_attack" => vec![
                Atom::Pad { pixels: 4 },
                Atom::Rotation {
                    min_deg: -45.0,
                    max_deg: 45.0,
                },
                Atom::HorizontalFlip { p: 0.5 },
            ],
            other => {
                return Err(Error::Config(format!(
                    "unknown transform preset {other:?} (expected grayscale_attack or color_attack)"
                )))
            }
        };
        Ok(Self {
            pipeline,
            ..Self::default()
        })
    }

    pub fn is_identity(&self) -> bool {
        self.pipeline.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.pad_fill) {
            return Err(Error::Config(format!("pad_fill {} outside [-1, 1]", self.pad_fill)));
        }
        for atom in &self.pipeline {
            match *atom {
                Atom::Rotation { min_deg, max_deg } if !(min_deg <= max_deg) => {
                    return Err(Error::Config(format!("rotation range [{min_deg}, {max_deg}]")));
                }
                Atom::ResizedCrop { size, scale, ratio } => {
                    if size == 0
                        || !(scale[0] > 0.0 && scale[0] <= scale[1] && scale[1] <= 1.0)
                        || !(ratio[0] > 0.0 && ratio[0] <= ratio[1])
                    {
                        return Err(Error::Geometry(format!(
                            "degenerate crop window: size {size}, scale {scale:?}, ratio {ratio:?}"
                        )));
                    }
                }
                Atom::HorizontalFlip { p } if !(0.0..=1.0).contains(&p) => {
                    return Err(Error::Config(format!("flip probability {p}")));
                }
                Atom::Resize { size: 0 } => {
                    return Err(Error::Geometry("resize to 0 pixels".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Applies the pipeline to `x` (`[N, C, H, W]`) and resizes the result to
    /// `out_size` if the pipeline left it at another size.
    pub fn apply(&self, g: &mut Graph, x: Var, rng: &mut impl Rng, out_size: usize) -> Result<Var> {
        self.validate()?;
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::Shape(format!("transform expects square NCHW input, got {s:?}")));
        }
        let n = s[0];
        let draws = if self.per_image { n } else { 1 };
        let mut h = x;
        let mut size = s[2];
        for atom in &self.pipeline {
            match *atom {
                Atom::Rotation { min_deg, max_deg } => {
                    let maps: Vec<AffineMap> = (0..draws)
                        .map(|_| rotation(uniform(rng, min_deg, max_deg).to_radians(), size))
                        .collect();
                    h = g.resample(h, &maps, size, size)?;
                }
                Atom::ResizedCrop {
                    size: out,
                    scale,
                    ratio,
                } => {
                    let maps: Vec<AffineMap> = (0..draws)
                        .map(|_| {
                            let (top, left, ch, cw) = crop_window(rng, size, size, scale, ratio);
                            crop_resize(top, left, ch, cw, out)
                        })
                        .collect();
                    h = g.resample(h, &maps, out, out)?;
                    size = out;
                }
                Atom::Pad { pixels } => {
                    h = g.pad(h, pixels, self.pad_fill)?;
                    size += 2 * pixels;
                }
                Atom::HorizontalFlip { p } => {
                    let flags: Vec<bool> = if self.per_image {
                        (0..n).map(|_| rng.gen::<f64>() < p).collect()
                    } else {
                        vec![rng.gen::<f64>() < p; n]
                    };
                    h = g.hflip(h, &flags)?;
                }
                Atom::Resize { size: out } => {
                    h = g.resample(h, &[resize(size, out)], out, out)?;
                    size = out;
                }
            }
        }
        if size != out_size {
            h = g.resample(h, &[resize(size, out_size)], out_size, out_size)?;
        }
        Ok(h)
    }

    /// Tape-free application to a plain tensor.
    pub fn apply_tensor(&self, x: &Tensor, rng: &mut impl Rng, out_size: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = self.apply(&mut g, v, rng, out_size)?;
        Ok(g.detach(y))
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Rotation by `theta` about the image centre, same output size.
pub fn rotation(theta: f64, size: usize) -> AffineMap {
    let (s, c) = theta.sin_cos();
    let m = (size as f64 - 1.0) / 2.0;
    AffineMap([c, s, m - c * m - s * m, -s, c, m + s * m - c * m])
}

/// Half-pixel-centred rescale of a whole `from x from` image to `to x to`.
pub fn resize(from: usize, to: usize) -> AffineMap {
    crop_resize(0.0, 0.0, from as f64, from as f64, to)
}

/// Maps a `to x to` output onto the window `[top, top+h) x [left, left+w)`.
pub fn crop_resize(top: f64, left: f64, h: f64, w: f64, to: usize) -> AffineMap {
    let sx = w / to as f64;
    let sy = h / to as f64;
    AffineMap([sx, 0.0, left + 0.5 * sx - 0.5, 0.0, sy, top + 0.5 * sy - 0.5])
}

/// Random area/aspect crop window, retried up to ten times before
/// falling back to a centred crop at the clamped aspect ratio.
pub fn crop_window(
    rng: &mut impl Rng,
    height: usize,
    width: usize,
    scale: [f64; 2],
    ratio: [f64; 2],
) -> (f64, f64, f64, f64) {
    let area = (height * width) as f64;
    let (lr0, lr1) = (ratio[0].ln(), ratio[1].ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale[0], scale[1]);
        let aspect = uniform(rng, lr0, lr1).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return (top as f64, left as f64, h as f64, w as f64);
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < ratio[0] {
        (width, (width as f64 / ratio[0]).round() as usize)
    } else if in_ratio > ratio[1] {
        ((height as f64 * ratio[1]).round() as usize, height)
    } else {
        (width, height)
    };
    (
        ((height - h) / 2) as f64,
        ((width - w) / 2) as f64,
        h as f64,
        w as f64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pattern(n: usize, size: usize) -> Tensor {
        Tensor::from_fn(&[n, 1, size, size], |i| ((i as f64 * 0.731).sin() * 0.9).clamp(-1.0, 1.0))
    }

    #[test]
    fn presets_are_verbatim() {
        let g = TransformSpec::preset("grayscale_attack").unwrap();
        assert_eq!(
            g.pipeline,
            vec![
                Atom::Rotation { min_deg: -20.0, max_deg: 20.0 },
                Atom::ResizedCrop { size: 32, scale: [0.85, 1.0], ratio: [0.9, 1.1] },
            ]
        );
        let c = TransformSpec::preset("color_attack").unwrap();
        assert_eq!(
            c.pipeline,
            vec![
                Atom::Pad { pixels: 4 },
                Atom::Rotation { min_deg: -45.0, max_deg: 45.0 },
                Atom::HorizontalFlip { p: 0.5 },
            ]
        );
        assert!(TransformSpec::preset("sepia").is_err());
    }

    #[test]
    fn degenerate_transforms_are_identity() {
        let spec = TransformSpec {
            pipeline: vec![
                Atom::Rotation { min_deg: 0.0, max_deg: 0.0 },
                Atom::ResizedCrop { size: 32, scale: [1.0, 1.0], ratio: [1.0, 1.0] },
            ],
            ..Default::default()
        };
        let x = pattern(2, 32);
        let y = spec.apply_tensor(&x, &mut ChaCha8Rng::seed_from_u64(0), 32).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn double_flip_is_identity() {
        let spec = TransformSpec {
            pipeline: vec![Atom::HorizontalFlip { p: 1.0 }, Atom::HorizontalFlip { p: 1.0 }],
            ..Default::default()
        };
        let x = pattern(3, 8);
        let y = spec.apply_tensor(&x, &mut ChaCha8Rng::seed_from_u64(0), 8).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn rotated_disk_is_unchanged() {
        let size = 192usize;
        let m = (size as f64 - 1.0) / 2.0;
        let disk = Tensor::from_fn(&[1, 1, size, size], |i| {
            let (r, c) = ((i / size) as f64 - m, (i % size) as f64 - m);
            let t = (((r * r + c * c).sqrt() - 10.0) / 80.0).clamp(0.0, 1.0);
            (std::f64::consts::PI * t).cos()
        });
        for deg in [7.0, 33.0, 90.0, 161.0] {
            let spec = TransformSpec {
                pipeline: vec![Atom::Rotation { min_deg: deg, max_deg: deg }],
                ..Default::default()
            };
            let y = spec.apply_tensor(&disk, &mut ChaCha8Rng::seed_from_u64(0), size).unwrap();
            assert!(y.max_abs_diff(&disk) < 1e-3, "{deg}: {}", y.max_abs_diff(&disk));
        }
    }

    #[test]
    fn color_preset_is_resized_back() {
        let spec = TransformSpec::preset("color_attack").unwrap();
        let x = pattern(2, 32);
        let y = spec.apply_tensor(&x, &mut ChaCha8Rng::seed_from_u64(1), 32).unwrap();
        assert_eq!(y.shape(), &[2, 1, 32, 32]);
    }

    #[test]
    fn empty_crop_window_is_an_error() {
        let spec = TransformSpec {
            pipeline: vec![Atom::ResizedCrop { size: 32, scale: [0.0, 0.0], ratio: [1.0, 1.0] }],
            ..Default::default()
        };
        let x = pattern(1, 32);
        assert!(matches!(
            spec.apply_tensor(&x, &mut ChaCha8Rng::seed_from_u64(1), 32),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn per_image_draws_differ() {
        let spec = TransformSpec {
            per_image: true,
            ..TransformSpec::preset("grayscale_attack").unwrap()
        };
        let one = pattern(1, 32);
        let x = Tensor::concat(&[one.clone(), one]).unwrap();
        let y = spec.apply_tensor(&x, &mut ChaCha8Rng::seed_from_u64(5), 32).unwrap();
        assert_ne!(y.sample(0), y.sample(1));
    }

    #[test]
    fn gradient_flows_through_presets() {
        for name in ["grayscale_attack", "color_attack"] {
            let spec = TransformSpec::preset(name).unwrap();
            let x = pattern(1, 32).with_requires_grad(true);
            let weights = Tensor::from_fn(&[1, 1, 32, 32], |i| ((i * 7 % 13) as f64) / 13.0);
            let loss_at = |t: &Tensor, grad: bool| {
                let mut g = Graph::new();
                let v = g.input(t.clone().with_requires_grad(grad));
                let y = spec.apply(&mut g, v, &mut ChaCha8Rng::seed_from_u64(3), 32).unwrap();
                let w = g.constant(weights.clone());
                let p = g.mul(y, w).unwrap();
                let l = g.sum(p);
                if grad {
                    g.backward(l).unwrap();
                    (g.value(l).item(), g.grad(v).unwrap().to_vec())
                } else {
                    (g.value(l).item(), Vec::new())
                }
            };
            let (_, analytic) = loss_at(&x, true);
            let h = 1e-5;
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for j in (0..1024).step_by(37) {
                let mut p = x.clone();
                p.data_mut()[j] += h;
                let mut m = x.clone();
                m.data_mut()[j] -= h;
                let fd = (loss_at(&p, false).0 - loss_at(&m, false).0) / (2.0 * h);
                num += (fd - analytic[j]).powi(2);
                den += fd.powi(2).max(analytic[j].powi(2));
            }
            assert!(num.sqrt() / den.sqrt().max(1e-12) < 1e-3, "{name}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn replay_and_range(seed in 0u64..10_000, color in proptest::bool::ANY, per_image in proptest::bool::ANY) {
            let name = if color { "color_attack" } else { "grayscale_attack" };
            let spec = TransformSpec { per_image, ..TransformSpec::preset(name).unwrap() };
            let x = pattern(3, 32);
            let a = spec.apply_tensor(&x, &mut ChaCha8Rng::seed_from_u64(seed), 32).unwrap();
            let b = spec.apply_tensor(&x, &mut ChaCha8Rng::seed_from_u64(seed), 32).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.shape(), &[3, 1, 32, 32]);
            prop_assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn crop_window_fits(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (top, left, h, w) = crop_window(&mut rng, 32, 32, [0.85, 1.0], [0.9, 1.1]);
            prop_assert!(h >= 1.0 && w >= 1.0);
            prop_assert!(top + h <= 32.0 && left + w <= 32.0);
        }
    }
}
