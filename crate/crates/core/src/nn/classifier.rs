use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Arch, Checkpoint};
use super::init::uniform_fan_in;
use super::Mode;
use crate::autodiff::{BnState, Graph, ParamStore, RunningStats, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub image_size: usize,
    pub widths: Vec<usize>,
    /// Width of the hidden dense layer over the flattened last block;
    /// 0 selects global average pooling followed by one linear layer.
    pub hidden: usize,
    pub classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            image_size: 32,
            widths: vec![16, 32, 64],
            hidden: 64,
            classes: 10,
        }
    }
}

impl ClassifierConfig {
    pub fn feature_dim(&self) -> usize {
        if self.hidden > 0 {
            self.hidden
        } else {
            *self.widths.last().unwrap_or(&self.channels)
        }
    }

    /// Side of the last block's output map.
    pub fn final_side(&self) -> usize {
        self.image_size >> self.widths.len()
    }
}

pub struct ClassifierOutput {
    /// `[N, C]` log-posteriors.
    pub log_probs: Var,
    /// `[N, d]` penultimate features: the hidden dense layer, or the
    /// pooled last block without one.
    pub features: Var,
    /// Inputs of each batch-norm layer, in order.
    pub pre_bn: Vec<Var>,
    pub params: Vec<Var>,
}

/// Blocks of conv3x3 -> BN -> ReLU -> 2x2 max-pool, then either a dense
/// ReLU layer over the flattened map or global average pooling, and a
/// linear layer to the logits.
#[derive(Debug)]
pub struct Classifier {
    config: ClassifierConfig,
    params: ParamStore,
    bn: Vec<RunningStats>,
    forward_calls: AtomicUsize,
}

impl Clone for Classifier {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            bn: self.bn.clone(),
            forward_calls: AtomicUsize::new(self.forward_calls()),
        }
    }
}

impl Classifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.widths.is_empty() || config.classes < 2 {
            return Err(Error::InvalidArgument(format!("classifier config {config:?}")));
        }
        if config.image_size >> config.widths.len() == 0 {
            return Err(Error::Geometry(format!(
                "{} pooling blocks do not fit a {}px input",
                config.widths.len(),
                config.image_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut bn = Vec::new();
        let mut c = config.channels;
        for (i, &w) in config.widths.iter().enumerate() {
            params.push(format!("block{i}.conv.weight"), uniform_fan_in(&mut rng, &[w, c, 3, 3], c * 9));
            params.push(format!("block{i}.conv.bias"), uniform_fan_in(&mut rng, &[w], c * 9));
            params.push(format!("block{i}.bn.weight"), Tensor::full(&[w], 1.0));
            params.push(format!("block{i}.bn.bias"), Tensor::zeros(&[w]));
            bn.push(RunningStats::new(w));
            c = w;
        }
        if config.hidden > 0 {
            let flat = c * config.final_side() * config.final_side();
            params.push("fc1.weight", uniform_fan_in(&mut rng, &[config.hidden, flat], flat));
            params.push("fc1.bias", uniform_fan_in(&mut rng, &[config.hidden], flat));
            c = config.hidden;
        }
        params.push("fc.weight", uniform_fan_in(&mut rng, &[config.classes, c], c));
        params.push("fc.bias", uniform_fan_in(&mut rng, &[config.classes], c));
        Ok(Self {
            config,
            params,
            bn,
            forward_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
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

    /// Number of forward passes run so far.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// Training-mode pass: batch statistics, running stats updated.
    pub fn forward_train(&mut self, g: &mut Graph, x: Var) -> Result<ClassifierOutput> {
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.run(g, x, Mode::Train, true, &mut bn);
        self.bn = bn;
        out
    }

    /// Evaluation-mode pass with running statistics. Parameters are
    /// placed on the tape as constants unless `trainable` is set.
    pub fn forward_eval(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<ClassifierOutput> {
        let mut bn = self.bn.clone();
        self.run(g, x, Mode::Eval, trainable, &mut bn)
    }

    fn run(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        trainable: bool,
        bn: &mut [RunningStats],
    ) -> Result<ClassifierOutput> {
        let cfg = &self.config;
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(Error::Shape(format!(
                "classifier expects [N, {}, {}, {}], got {s:?}",
                cfg.channels, cfg.image_size, cfg.image_size
            )));
        }
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let p = self.params.bind(g, trainable);
        let mut h = x;
        let mut pre_bn = Vec::with_capacity(cfg.widths.len());
        for (i, stats) in bn.iter_mut().enumerate() {
            let base = 4 * i;
            h = g.conv2d(h, p[base], Some(p[base + 1]), 1, 1)?;
            pre_bn.push(h);
            h = match mode {
                Mode::Train => g.batch_norm(h, p[base + 2], p[base + 3], BnState::Train(stats))?,
                Mode::Eval => g.batch_norm(h, p[base + 2], p[base + 3], BnState::Eval(stats))?,
            };
            h = g.relu(h);
            h = g.max_pool2(h)?;
        }
        let n = p.len();
        let features = if cfg.hidden > 0 {
            let s = g.shape(h).to_vec();
            let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
            let z = g.linear(flat, p[n - 4], Some(p[n - 3]))?;
            g.relu(z)
        } else {
            g.global_avg_pool(h)?
        };
        let logits = g.linear(features, p[n - 2], Some(p[n - 1]))?;
        let log_probs = g.log_softmax(logits)?;
        Ok(ClassifierOutput {
            log_probs,
            features,
            pre_bn,
            params: p,
        })
    }

    /// Evaluation-mode log-posteriors and features, in chunks.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = x.batch_len();
        let mut lp = Vec::new();
        let mut feats = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + 256).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut g = Graph::new();
            let xv = g.constant(x.select(&idx));
            let out = self.forward_eval(&mut g, xv, false)?;
            lp.push(g.detach(out.log_probs));
            feats.push(g.detach(out.features));
            start = end;
        }
        if lp.is_empty() {
            return Ok((
                Tensor::zeros(&[0, self.config.classes]),
                Tensor::zeros(&[0, self.config.feature_dim()]),
            ));
        }
        Ok((Tensor::concat(&lp)?, Tensor::concat(&feats)?))
    }

    pub fn to_checkpoint(&self, seed: u64, epoch: usize) -> Checkpoint {
        let mut ck = Checkpoint::new(Arch::Classifier(self.config.clone()), seed, epoch);
        ck.extend_params(&self.params);
        ck.extend_bn(&self.bn);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let Arch::Classifier(config) = &ck.arch else {
            return Err(Error::CorruptCheckpoint(format!("expected a classifier, found {:?}", ck.arch)));
        };
        let mut model = Self::new(config.clone(), 0)?;
        ck.restore_params(&mut model.params)?;
        ck.restore_bn(&mut model.bn)?;
        Ok(model)
    }
}
