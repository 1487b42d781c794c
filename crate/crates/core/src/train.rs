//! Supervised training of target and evaluation classifiers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Optimizer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{Classifier, ClassifierConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierRecipe {
    pub arch: ClassifierConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs after which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for ClassifierRecipe {
    fn default() -> Self {
        Self {
            arch: ClassifierConfig::default(),
            epochs: 20,
            batch_size: 256,
            lr: 2.5e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![10, 15, 18],
            gamma: 0.1,
            seed: 0,
        }
    }
}

impl ClassifierRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.lr > 0.0) || !(self.gamma > 0.0) || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("classifier recipe needs lr, gamma > 0 and momentum, weight_decay >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch > m).count();
        self.lr * self.gamma.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub recipe: ClassifierRecipe,
    pub epochs: Vec<ClassifierEpoch>,
    pub val_acc: f64,
    pub val_size: usize,
}

pub fn accuracy(classifier: &Classifier, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let (lp, _) = classifier.predict(&ds.images)?;
    metrics::topk_accuracy(&lp, &ds.labels, 1)
}

/// Minibatch SGD on the mean negative log-likelihood with a step schedule.
pub fn train_classifier(train: &Dataset, val: &Dataset, recipe: &ClassifierRecipe) -> Result<(Classifier, TrainReport)> {
    recipe.validate()?;
    if train.num_classes() != recipe.arch.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the classifier predicts {}",
            train.num_classes(),
            recipe.arch.classes
        )));
    }
    let mut model = Classifier::new(recipe.arch.clone(), recipe.seed)?;
    let mut opt = Optimizer::sgd(recipe.lr, recipe.momentum, recipe.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed ^ 0x7EA1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(recipe.epochs);
    for epoch in 1..=recipe.epochs {
        let lr = recipe.lr_at(epoch);
        opt.set_lr(lr);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(recipe.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(train.images.select(chunk));
            let out = model.forward_train(&mut g, x)?;
            let picked = g.gather(out.log_probs, &labels)?;
            let m = g.mean(picked);
            let loss = g.scale(m, -1.0);
            g.ensure_finite(loss, "classifier loss")?;
            g.backward(loss)?;
            let lp = g.value(out.log_probs);
            correct += (metrics::topk_accuracy(lp, &labels, 1)? * labels.len() as f64).round() as usize;
            seen += labels.len();
            loss_sum += g.value(loss).item() * labels.len() as f64;
            model.params_mut().accumulate_grads(&g, &out.params);
            opt.step(model.params_mut())?;
        }
        epochs.push(ClassifierEpoch {
            epoch,
            lr,
            loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
        });
    }
    let val_acc = accuracy(&model, val)?;
    Ok((
        model,
        TrainReport {
            recipe: recipe.clone(),
            epochs,
            val_acc,
            val_size: val.len(),
        },
    ))
}
