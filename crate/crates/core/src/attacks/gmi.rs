use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::GmiConfig;
use crate::autodiff::{Graph, Optimizer, Tensor};
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::{Classifier, Generator, Mode, PatchDiscriminator};

pub struct GmiOutput {
    pub images: Tensor,
    pub latents: Tensor,
    /// Mean objective `-(lambda log p + log sigmoid(D))` per recorded step.
    pub loss_curve: Vec<f64>,
}

/// Optimises `n` latents of a frozen generator to maximise
/// `lambda log p(y|G(z)) + log sigmoid(D(G(z)))` with Adam.
pub fn gmi_attack(
    generator: &Generator,
    discriminator: &PatchDiscriminator,
    classifier: &Classifier,
    y: usize,
    cfg: &GmiConfig,
    n: usize,
    seed: u64,
) -> Result<GmiOutput> {
    if y >= classifier.config().classes {
        return Err(Error::InvalidArgument(format!(
            "class {y} outside {} classes",
            classifier.config().classes
        )));
    }
    let mut gen = generator.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = gen.sample_latent(n, &mut rng).with_requires_grad(true);
    let mut opt = Optimizer::adam(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    if n > 0 {
        for step in 0..cfg.steps {
            let mut g = Graph::new();
            let zv = g.input(z.clone());
            let (x, _) = gen.forward(&mut g, zv, Mode::Eval, false)?;
            let d = discriminator.forward(&mut g, x, false)?;
            let realism = losses::g_adv_loss(&mut g, d.total)?;
            let loss = if cfg.lambda > 0.0 {
                let out = classifier.forward_eval(&mut g, x, false)?;
                let p = losses::class_posterior(&mut g, out.log_probs, y)?;
                let id = losses::identity_loss(&mut g, p, cfg.lambda);
                g.add(realism, id)?
            } else {
                realism
            };
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::divergence(format!("gmi class {y}: non-finite objective"), Some(step)));
            }
            curve.push(lv);
            g.backward(loss)?;
            z.clear_grad();
            z.accumulate_grad(g.grad(zv).expect("latent gradient"));
            opt.step_tensors(&mut [&mut z])
                .map_err(|e| Error::divergence(format!("gmi class {y}: {e}"), Some(step)))?;
        }
    }
    let z = z.with_requires_grad(false);
    let images = if n == 0 {
        Tensor::zeros(&[0, gen.config().channels, 32, 32])
    } else {
        gen.generate(&z)?
    };
    Ok(GmiOutput {
        images,
        latents: z,
        loss_curve: curve,
    })
}
