use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, AttackConfig, AttackRun, EpochLosses, Method};
use crate::autodiff::{Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, GeneratorTerms};
use crate::nn::{Classifier, Generator, Mode, PatchDiscriminator};

pub struct PatchMiOutput {
    pub generator: Generator,
    pub discriminator: PatchDiscriminator,
    pub run: AttackRun,
}

#[derive(Default)]
struct Sums {
    steps: usize,
    d: f64,
    adv: f64,
    id: Option<f64>,
    bn: Option<f64>,
}

impl Sums {
    fn add(opt: &mut Option<f64>, v: Option<f64>) {
        if let Some(v) = v {
            *opt = Some(opt.unwrap_or(0.0) + v);
        }
    }

    fn mean(&self, epoch: usize) -> EpochLosses {
        let k = self.steps.max(1) as f64;
        EpochLosses {
            epoch,
            steps: self.steps,
            d_loss: self.d / k,
            g_adv: self.adv / k,
            identity: self.id.map(|v| v / k),
            bn: self.bn.map(|v| v / k),
        }
    }
}

/// Trains one generator for class `y` against a patch discriminator on
/// the auxiliary images. Each step makes one discriminator update on a
/// real and a generated batch, then one generator update on the
/// adversarial, identity and BN-statistics terms. With `lambda = 0` the
/// classifier is never evaluated and the result is a plain GAN.
///
/// `on_epoch` runs after every epoch with the current networks.
pub fn patchmi_train(
    aux: &Dataset,
    classifier: &Classifier,
    y: usize,
    cfg: &AttackConfig,
    on_epoch: &mut dyn FnMut(usize, &Generator, &PatchDiscriminator) -> Result<()>,
) -> Result<PatchMiOutput> {
    cfg.validate()?;
    let use_classifier = cfg.loss.uses_classifier();
    if use_classifier && y >= classifier.config().classes {
        return Err(Error::InvalidArgument(format!(
            "class {y} outside {} classes",
            classifier.config().classes
        )));
    }
    let [c, h, w] = aux.image_shape();
    let dcfg = &cfg.discriminator;
    if c != dcfg.channels || h != dcfg.image_size || w != dcfg.image_size {
        return Err(Error::Shape(format!(
            "auxiliary images {:?} do not match the discriminator input",
            [c, h, w]
        )));
    }
    let started = Instant::now();
    let calls_before = classifier.forward_calls();
    let mut gen = Generator::new(cfg.generator.clone(), derive_seed(cfg.seed, "generator", y as u64))?;
    let mut disc = PatchDiscriminator::new(dcfg.clone(), derive_seed(cfg.seed, "discriminator", y as u64))?;
    let mut g_opt = cfg.optimizer.build();
    let mut d_opt = cfg.optimizer.build();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "patchmi-loop", y as u64));
    let transformed = !cfg.transform.is_identity();
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut last_good: Option<EpochLosses> = None;
    let mut order: Vec<usize> = (0..aux.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = Sums::default();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let fail = |e: Error, last: &Option<EpochLosses>| {
                if e.is_divergence() {
                    Error::divergence(
                        format!("patchmi class {y} epoch {epoch}: {e}; last finite losses {last:?}"),
                        Some(step),
                    )
                } else {
                    e
                }
            };
            let b = chunk.len();
            let real = aux.images.select(chunk);
            let z = gen.sample_latent(b, &mut rng);
            let mut g = Graph::new();
            let zv = g.constant(z);
            let (fake, gvars) = gen.forward(&mut g, zv, Mode::Train, true)?;

            let d_value = {
                let mut gd = Graph::new();
                let rv = gd.constant(real);
                let fv = gd.constant(g.detach(fake));
                let dr = disc.forward(&mut gd, rv, true)?;
                let df = disc.forward(&mut gd, fv, true)?;
                let ld = losses::d_loss(&mut gd, dr.total, df.total, cfg.loss.real_label)
                    .map_err(|e| fail(e, &last_good))?;
                gd.backward(ld)?;
                disc.params_mut().accumulate_grads(&gd, &dr.params);
                disc.params_mut().accumulate_grads(&gd, &df.params);
                d_opt.step(disc.params_mut()).map_err(|e| fail(e, &last_good))?;
                gd.value(ld).item()
            };

            let df = disc.forward(&mut g, fake, false)?;
            let adv = losses::g_adv_loss(&mut g, df.total).map_err(|e| fail(e, &last_good))?;
            let (identity, bn) = if use_classifier {
                generator_class_terms(&mut g, classifier, fake, y, cfg, transformed, &mut rng)?
            } else {
                (None, None)
            };
            let read = |g: &Graph, v: Option<Var>| v.map(|v| g.value(v).item());
            let (adv_v, id_v, bn_v) = (g.value(adv).item(), read(&g, identity), read(&g, bn));
            let total = losses::total_generator_loss(&mut g, GeneratorTerms { adv, identity, bn }, cfg.loss.bn_weight)
                .map_err(|e| fail(e, &last_good))?;
            g.backward(total)?;
            gen.params_mut().accumulate_grads(&g, &gvars);
            g_opt.step(gen.params_mut()).map_err(|e| fail(e, &last_good))?;

            sums.steps += 1;
            sums.d += d_value;
            sums.adv += adv_v;
            Sums::add(&mut sums.id, id_v);
            Sums::add(&mut sums.bn, bn_v);
            step += 1;
        }
        let losses = sums.mean(epoch);
        last_good = Some(losses.clone());
        curves.push(losses);
        on_epoch(epoch, &gen, &disc)?;
    }

    let run = AttackRun {
        method: Method::Patchmi,
        class: Some(y),
        config: cfg.clone(),
        curves,
        steps: step,
        classifier_calls: classifier.forward_calls() - calls_before,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(PatchMiOutput {
        generator: gen,
        discriminator: disc,
        run,
    })
}

/// Identity term on the (optionally ensembled) posterior and the
/// BN-statistics term of the first classifier branch.
fn generator_class_terms(
    g: &mut Graph,
    classifier: &Classifier,
    fake: Var,
    y: usize,
    cfg: &AttackConfig,
    transformed: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<Var>, Option<Var>)> {
    let size = cfg.discriminator.image_size;
    let mut pre_bn = None;
    let plain = if !transformed || cfg.loss.use_ensemble {
        let out = classifier.forward_eval(g, fake, false)?;
        pre_bn = Some(out.pre_bn);
        Some(losses::class_posterior(g, out.log_probs, y)?)
    } else {
        None
    };
    let warped = if transformed {
        let xt = cfg.transform.apply(g, fake, rng, size)?;
        let out = classifier.forward_eval(g, xt, false)?;
        pre_bn.get_or_insert(out.pre_bn);
        Some(losses::class_posterior(g, out.log_probs, y)?)
    } else {
        None
    };
    let posterior = match (plain, warped) {
        (Some(p), Some(pt)) => losses::ensemble_posterior(g, p, pt)?,
        (Some(p), None) | (None, Some(p)) => p,
        (None, None) => unreachable!("at least one branch runs"),
    };
    let identity = losses::identity_loss(g, posterior, cfg.loss.lambda);
    let bn = if cfg.loss.bn_weight > 0.0 {
        Some(losses::bn_statistics_loss(g, classifier.bn_stats(), &pre_bn.expect("branch ran"))?)
    } else {
        None
    };
    Ok((Some(identity), bn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::TransformSpec;
    use crate::data::{synth_glyphs, GlyphSpec};
    use crate::nn::{ClassifierConfig, GeneratorConfig, PatchDiscriminatorConfig};

    fn small_cfg(lambda: f64) -> AttackConfig {
        let mut cfg = AttackConfig {
            epochs: 2,
            batch_size: 8,
            generator: GeneratorConfig {
                base_width: 16,
                latent_dim: 16,
                ..Default::default()
            },
            discriminator: PatchDiscriminatorConfig {
                width: 16,
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.loss.lambda = lambda;
        cfg
    }

    fn aux() -> Dataset {
        synth_glyphs(&GlyphSpec::aux(4, 4, 0)).unwrap()
    }

    #[test]
    fn lambda_zero_skips_the_classifier() {
        let c = Classifier::new(ClassifierConfig::default(), 0).unwrap();
        let out = patchmi_train(&aux(), &c, 0, &small_cfg(0.0), &mut |_, _, _| Ok(())).unwrap();
        assert_eq!(c.forward_calls(), 0);
        assert_eq!(out.run.classifier_calls, 0);
        assert!(out.run.curves.iter().all(|e| e.identity.is_none() && e.bn.is_none()));
        assert_eq!(out.run.steps, 4);
    }

    #[test]
    fn full_objective_is_deterministic_and_keeps_the_target_frozen() {
        let c = Classifier::new(ClassifierConfig::default(), 0).unwrap();
        let before = c.params().tensors().to_vec();
        let cfg = small_cfg(30.0);
        let mut epochs = Vec::new();
        let a = patchmi_train(&aux(), &c, 3, &cfg, &mut |e, _, _| {
            epochs.push(e);
            Ok(())
        })
        .unwrap();
        assert_eq!(epochs, vec![1, 2]);
        assert_eq!(c.params().tensors(), &before[..]);
        assert!(a.run.curves_finite());
        assert!(a.run.curves.iter().all(|e| e.identity.is_some() && e.bn.is_some()));
        // two classifier passes per step: plain and transformed
        assert_eq!(a.run.classifier_calls, 2 * a.run.steps);
        let b = patchmi_train(&aux(), &c, 3, &cfg, &mut |_, _, _| Ok(())).unwrap();
        assert_eq!(a.generator.params().tensors(), b.generator.params().tensors());
        assert_eq!(a.run.curves, b.run.curves);
        let mut plain = cfg.clone();
        plain.transform = TransformSpec::identity();
        let p = patchmi_train(&aux(), &c, 3, &plain, &mut |_, _, _| Ok(())).unwrap();
        assert_eq!(p.run.classifier_calls, p.run.steps);
    }

    #[test]
    fn mismatched_aux_geometry_is_rejected() {
        let c = Classifier::new(ClassifierConfig::default(), 0).unwrap();
        let mut cfg = small_cfg(0.0);
        cfg.discriminator.image_size = 16;
        assert!(patchmi_train(&aux(), &c, 0, &cfg, &mut |_, _, _| Ok(())).is_err());
    }
}
