use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Arch, Checkpoint};
use super::init::uniform_fan_in;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchDiscriminatorConfig {
    pub channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub stride: usize,
    /// Embedding width; the 1x1 head narrows it to half, a quarter, then 1.
    pub width: usize,
}

impl Default for PatchDiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            image_size: 32,
            patch_size: 8,
            stride: 4,
            width: 128,
        }
    }
}

impl PatchDiscriminatorConfig {
    /// Full-image discriminator: one patch covering the whole input.
    pub fn full_image(channels: usize, image_size: usize, width: usize) -> Self {
        Self {
            channels,
            image_size,
            patch_size: image_size,
            stride: image_size,
            width,
        }
    }

    /// Side of the patch-logit grid.
    pub fn grid(&self) -> usize {
        (self.image_size - self.patch_size) / self.stride + 1
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 || self.patch_size > self.image_size {
            return Err(Error::Geometry(format!(
                "patch {} / stride {} on a {}px image",
                self.patch_size, self.stride, self.image_size
            )));
        }
        if self.width < 4 || self.channels == 0 {
            return Err(Error::InvalidArgument(format!("discriminator config {self:?}")));
        }
        Ok(())
    }
}

pub struct DiscriminatorOutput {
    /// `[N, 1, g, g]`, one logit per patch.
    pub patch_logits: Var,
    /// `[N]`, per-sample sum of the patch logits.
    pub total: Var,
    pub params: Vec<Var>,
}

/// An embedding conv whose kernel equals the patch and whose stride is
/// the patch step, then three 1x1 convs producing one logit per patch.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    config: PatchDiscriminatorConfig,
    params: ParamStore,
}

impl PatchDiscriminator {
    pub fn new(config: PatchDiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, k, w) = (config.channels, config.patch_size, config.width);
        let mut params = ParamStore::new();
        let fan = c * k * k;
        params.push("embed.weight", uniform_fan_in(&mut rng, &[w, c, k, k], fan));
        params.push("embed.bias", uniform_fan_in(&mut rng, &[w], fan));
        let widths = [w, w / 2, w / 4, 1];
        for i in 0..3 {
            let (ci, co) = (widths[i], widths[i + 1]);
            params.push(format!("head{i}.weight"), uniform_fan_in(&mut rng, &[co, ci, 1, 1], ci));
            params.push(format!("head{i}.bias"), uniform_fan_in(&mut rng, &[co], ci));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &PatchDiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<DiscriminatorOutput> {
        let s = g.shape(x).to_vec();
        let cfg = &self.config;
        if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(Error::Geometry(format!(
                "discriminator expects [N, {}, {}, {}], got {s:?}",
                cfg.channels, cfg.image_size, cfg.image_size
            )));
        }
        let p = self.params.bind(g, trainable);
        let mut h = g.conv2d(x, p[0], Some(p[1]), cfg.stride, 0)?;
        h = g.leaky_relu(h, LEAKY_SLOPE);
        for i in 0..3 {
            h = g.conv2d(h, p[2 + 2 * i], Some(p[3 + 2 * i]), 1, 0)?;
            if i < 2 {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        let total = g.sum_per_sample(h);
        Ok(DiscriminatorOutput {
            patch_logits: h,
            total,
            params: p,
        })
    }

    pub fn to_checkpoint(&self, seed: u64, epoch: usize) -> Checkpoint {
        let mut ck = Checkpoint::new(Arch::PatchDiscriminator(self.config.clone()), seed, epoch);
        ck.extend_params(&self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let Arch::PatchDiscriminator(config) = &ck.arch else {
            return Err(Error::CorruptCheckpoint(format!(
                "expected a patch discriminator, found {:?}",
                ck.arch
            )));
        };
        let mut model = Self::new(config.clone(), 0)?;
        ck.restore_params(&mut model.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;

    fn run(d: &PatchDiscriminator, x: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = d.forward(&mut g, xv, false).unwrap();
        (g.detach(out.patch_logits), g.detach(out.total))
    }

    fn image(seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(&[2, 1, 32, 32], |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((s >> 33) as f64 / (1u64 << 31) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn default_grid_is_seven_by_seven() {
        let d = PatchDiscriminator::new(PatchDiscriminatorConfig::default(), 1).unwrap();
        let (patches, total) = run(&d, &image(1));
        assert_eq!(patches.shape(), &[2, 1, 7, 7]);
        assert_eq!(total.shape(), &[2]);
        assert_eq!(d.config().num_patches(), 49);
    }

    #[test]
    fn full_image_gives_single_logit() {
        let d = PatchDiscriminator::new(PatchDiscriminatorConfig::full_image(1, 32, 16), 1).unwrap();
        let (patches, _) = run(&d, &image(2));
        assert_eq!(patches.shape(), &[2, 1, 1, 1]);
    }

    #[test]
    fn zero_head_gives_bias_per_patch() {
        let mut d = PatchDiscriminator::new(PatchDiscriminatorConfig::default(), 1).unwrap();
        let last_w = d.params().len() - 2;
        d.params_mut().get_mut(last_w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        d.params_mut().get_mut(last_w + 1).data_mut()[0] = 0.25;
        let (patches, total) = run(&d, &image(3));
        assert!(patches.data().iter().all(|&v| v == 0.25));
        assert_eq!(total.data(), &[49.0 * 0.25, 49.0 * 0.25]);
    }

    #[test]
    fn wrong_geometry_is_rejected() {
        let d = PatchDiscriminator::new(PatchDiscriminatorConfig::default(), 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 28, 28]));
        assert!(d.forward(&mut g, x, false).is_err());
        let cfg = PatchDiscriminatorConfig {
            patch_size: 40,
            ..Default::default()
        };
        assert!(PatchDiscriminator::new(cfg, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn total_is_sum_of_patches(seed in 0u64..1000) {
            let d = PatchDiscriminator::new(
                PatchDiscriminatorConfig { width: 16, ..Default::default() },
                seed,
            ).unwrap();
            let (patches, total) = run(&d, &image(seed));
            for (i, t) in total.data().iter().enumerate() {
                let s: f64 = patches.sample(i).iter().sum();
                prop_assert_eq!(*t, s);
            }
        }

        #[test]
        fn patch_logit_depends_only_on_its_patch(seed in 0u64..1000, pi in 0usize..7, pj in 0usize..7,
                                                 r in 0usize..32, c in 0usize..32) {
            let d = PatchDiscriminator::new(
                PatchDiscriminatorConfig { width: 16, ..Default::default() },
                seed,
            ).unwrap();
            let x = image(seed);
            let mut y = x.clone();
            y.data_mut()[r * 32 + c] += 0.7;
            let (a, _) = run(&d, &x);
            let (b, _) = run(&d, &y);
            let inside = (pi * 4..pi * 4 + 8).contains(&r) && (pj * 4..pj * 4 + 8).contains(&c);
            if !inside {
                prop_assert_eq!(a.data()[pi * 7 + pj], b.data()[pi * 7 + pj]);
            }
        }
    }
}
