use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{BmiConfig, BmiInit};
use crate::autodiff::{Graph, Optimizer, Tensor};
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::Classifier;

pub struct BmiOutput {
    pub images: Tensor,
    /// `(step, mean p(y|x))` at every recorded step, including 0 and the end.
    pub posterior_curve: Vec<(usize, f64)>,
}

/// Gradient descent on `-log p(y|x)` directly in pixel space, for `n`
/// independent images. The batch loss is a sum, so each image follows its
/// own gradient.
pub fn bmi_attack(classifier: &Classifier, y: usize, cfg: &BmiConfig, n: usize, seed: u64) -> Result<BmiOutput> {
    let c = classifier.config();
    if y >= c.classes {
        return Err(Error::InvalidArgument(format!("class {y} outside {} classes", c.classes)));
    }
    let shape = [n, c.channels, c.image_size, c.image_size];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = match cfg.init {
        BmiInit::Zeros => Tensor::zeros(&shape),
        BmiInit::Noise => Tensor::from_fn(&shape, |_| {
            cfg.init_sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        }),
    };
    let mut curve = Vec::new();
    if n == 0 {
        return Ok(BmiOutput {
            images: x,
            posterior_curve: curve,
        });
    }
    let mut opt = Optimizer::sgd(cfg.lr, 0.0, 0.0);
    let every = cfg.record_every.max(1);
    for step in 0..=cfg.steps {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = classifier.forward_eval(&mut g, xv, false)?;
        let p = losses::class_posterior(&mut g, out.log_probs, y)?;
        if step % every == 0 || step == cfg.steps {
            let pm = g.value(p).data().iter().sum::<f64>() / n as f64;
            curve.push((step, pm));
        }
        if step == cfg.steps {
            break;
        }
        let lp = g.log_floor(p, losses::POSTERIOR_FLOOR);
        let s = g.sum(lp);
        let loss = g.scale(s, -1.0);
        g.backward(loss)?;
        let grad = g.grad(xv).map(|t| t.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
        x.set_requires_grad(true);
        x.clear_grad();
        x.accumulate_grad(&grad);
        opt.step_tensors(&mut [&mut x])
            .map_err(|e| Error::divergence(format!("bmi class {y}: {e}"), Some(step)))?;
        if !x.is_finite() {
            return Err(Error::divergence(format!("bmi class {y}: non-finite pixels"), Some(step)));
        }
        if cfg.clamp {
            x.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        }
    }
    x.set_requires_grad(false);
    Ok(BmiOutput {
        images: x,
        posterior_curve: curve,
    })
}
