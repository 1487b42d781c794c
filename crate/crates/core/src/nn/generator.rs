use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Arch, Checkpoint};
use super::init::uniform_fan_in;
use super::Mode;
use crate::autodiff::{BnState, Graph, ParamStore, RunningStats, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Channels of the 4x4 seed map; halved by each of the first two stages.
    pub base_width: usize,
    pub channels: usize,
    pub batch_norm: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 100,
            base_width: 256,
            channels: 1,
            batch_norm: true,
        }
    }
}

impl GeneratorConfig {
    pub fn widths(&self) -> [usize; 4] {
        let b = self.base_width;
        [b, b / 2, b / 4, self.channels]
    }
}

/// Latent projection to a 4x4 map followed by three stride-2 transposed
/// convolutions (kernel 4, padding 1) up to 32x32, tanh on the output.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    bn: Vec<RunningStats>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        if config.latent_dim == 0 || config.base_width < 4 || config.channels == 0 {
            return Err(Error::InvalidArgument(format!("generator config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.widths();
        let mut params = ParamStore::new();
        let proj = w[0] * 16;
        params.push("proj.weight", uniform_fan_in(&mut rng, &[proj, config.latent_dim], config.latent_dim));
        params.push("proj.bias", uniform_fan_in(&mut rng, &[proj], config.latent_dim));
        let mut bn = Vec::new();
        if config.batch_norm {
            params.push("proj_bn.weight", Tensor::full(&[w[0]], 1.0));
            params.push("proj_bn.bias", Tensor::zeros(&[w[0]]));
            bn.push(RunningStats::new(w[0]));
        }
        for s in 0..3 {
            let (ci, co) = (w[s], w[s + 1]);
            // framework convention: fan_in of a transposed conv uses dim 1
            let fan_in = co * 16;
            params.push(format!("up{s}.weight"), uniform_fan_in(&mut rng, &[ci, co, 4, 4], fan_in));
            params.push(format!("up{s}.bias"), uniform_fan_in(&mut rng, &[co], fan_in));
            if config.batch_norm && s < 2 {
                params.push(format!("up{s}_bn.weight"), Tensor::full(&[co], 1.0));
                params.push(format!("up{s}_bn.bias"), Tensor::zeros(&[co]));
                bn.push(RunningStats::new(co));
            }
        }
        Ok(Self { config, params, bn })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[RunningStats] {
        &self.bn
    }

    /// Draws `n` standard-normal latent vectors.
    pub fn sample_latent(&self, n: usize, rng: &mut impl rand::Rng) -> Tensor {
        Tensor::from_fn(&[n, self.config.latent_dim], |_| StandardNormal.sample(rng))
    }

    /// Runs the network on `z` (`[N, latent_dim]`). Returns the image node
    /// and the parameter bindings (leaves with gradients iff `trainable`).
    pub fn forward(&mut self, g: &mut Graph, z: Var, mode: Mode, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "generator expects [N, {}] latents, got {shape:?}",
                self.config.latent_dim
            )));
        }
        let n = shape[0];
        let pv = self.params.bind(g, trainable);
        let w = self.config.widths();
        let bn_on = self.config.batch_norm;
        let mut bn_iter = self.bn.iter_mut();
        let mut k = 0;
        let mut next = || {
            k += 1;
            pv[k - 1]
        };
        let mut h = g.linear(z, next(), Some(next()))?;
        h = g.reshape(h, &[n, w[0], 4, 4])?;
        let norm = |g: &mut Graph, h: Var, gm: Var, bt: Var, stats: &mut RunningStats| -> Result<Var> {
            match mode {
                Mode::Train => g.batch_norm(h, gm, bt, BnState::Train(stats)),
                Mode::Eval => g.batch_norm(h, gm, bt, BnState::Eval(stats)),
            }
        };
        if bn_on {
            let (gm, bt) = (next(), next());
            h = norm(g, h, gm, bt, bn_iter.next().expect("bn layer"))?;
        }
        h = g.relu(h);
        for s in 0..3 {
            let (wt, b) = (next(), next());
            h = g.conv_transpose2d(h, wt, Some(b), 2, 1)?;
            if s < 2 {
                if bn_on {
                    let (gm, bt) = (next(), next());
                    h = norm(g, h, gm, bt, bn_iter.next().expect("bn layer"))?;
                }
                h = g.relu(h);
            } else {
                h = g.tanh(h);
            }
        }
        Ok((h, pv))
    }

    /// Images for the given latents with running statistics, no tape kept.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let mut this = self.clone();
        let (x, _) = this.forward(&mut g, zv, Mode::Eval, false)?;
        Ok(g.detach(x))
    }

    /// `n` replicas under a fixed seed, generated in chunks of 256.
    pub fn sample_replicas(&self, n: usize, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = self.sample_latent(n, &mut rng);
        if n == 0 {
            return Ok(Tensor::zeros(&[0, self.config.channels, 32, 32]));
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + 256).min(n);
            let idx: Vec<usize> = (start..end).collect();
            parts.push(self.generate(&z.select(&idx))?);
            start = end;
        }
        Tensor::concat(&parts)
    }

    pub fn to_checkpoint(&self, seed: u64, epoch: usize) -> Checkpoint {
        let mut ck = Checkpoint::new(Arch::Generator(self.config.clone()), seed, epoch);
        ck.extend_params(&self.params);
        ck.extend_bn(&self.bn);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let Arch::Generator(config) = &ck.arch else {
            return Err(Error::CorruptCheckpoint(format!("expected a generator, found {:?}", ck.arch)));
        };
        let mut model = Self::new(config.clone(), 0)?;
        ck.restore_params(&mut model.params)?;
        ck.restore_bn(&mut model.bn)?;
        Ok(model)
    }
}
