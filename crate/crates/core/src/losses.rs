//! Scalar objectives for discriminator and generator updates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, RunningStats, Tensor, Var};
use crate::error::{Error, Result};

pub const POSTERIOR_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackLossConfig {
    pub lambda: f64,
    pub real_label: f64,
    pub bn_weight: f64,
    pub use_ensemble: bool,
}

impl Default for AttackLossConfig {
    fn default() -> Self {
        Self {
            lambda: 30.0,
            real_label: 0.6,
            bn_weight: 1.0,
            use_ensemble: true,
        }
    }
}

impl AttackLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.real_label > 0.0 && self.real_label <= 1.0) {
            return Err(Error::Config(format!(
                "real_label must lie in (0, 1], got {}",
                self.real_label
            )));
        }
        if !(self.bn_weight >= 0.0 && self.bn_weight.is_finite()) {
            return Err(Error::Config(format!("bn_weight must be >= 0, got {}", self.bn_weight)));
        }
        Ok(())
    }

    /// With `lambda = 0` the classifier is not consulted at all, so the
    /// BN-statistics term is dropped with the identity term.
    pub fn uses_classifier(&self) -> bool {
        self.lambda > 0.0
    }
}

fn check_finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::divergence(format!("non-finite {what}"), None))
    }
}

/// Mean binary cross-entropy of logits `a` against constant target `t`,
/// as `softplus(a) - t*a`.
pub fn bce_with_logits(g: &mut Graph, a: Var, t: f64) -> Var {
    let sp = g.softplus(a);
    let ta = g.scale(a, t);
    let d = g.sub(sp, ta).expect("same shape");
    g.mean(d)
}

/// Discriminator loss: BCE of the real totals against `real_label` plus
/// BCE of the fake totals against 0, each averaged over its batch.
pub fn d_loss(g: &mut Graph, real_total: Var, fake_total: Var, real_label: f64) -> Result<Var> {
    check_finite(g, real_total, "real logits")?;
    check_finite(g, fake_total, "fake logits")?;
    let real = bce_with_logits(g, real_total, real_label);
    let fake = bce_with_logits(g, fake_total, 0.0);
    g.add(real, fake)
}

/// Non-saturating generator loss `mean(-log sigmoid(total))`.
pub fn g_adv_loss(g: &mut Graph, fake_total: Var) -> Result<Var> {
    check_finite(g, fake_total, "fake logits")?;
    let neg = g.scale(fake_total, -1.0);
    let sp = g.softplus(neg);
    Ok(g.mean(sp))
}

/// `p(y | x)` for each row of a `[N, C]` log-posterior node.
pub fn class_posterior(g: &mut Graph, log_probs: Var, y: usize) -> Result<Var> {
    let n = g.shape(log_probs)[0];
    let picked = g.gather(log_probs, &vec![y; n])?;
    Ok(g.exp(picked))
}

/// Average of the plain and transformed branch posteriors.
pub fn ensemble_posterior(g: &mut Graph, p: Var, p_transformed: Var) -> Result<Var> {
    let s = g.add(p, p_transformed)?;
    Ok(g.scale(s, 0.5))
}

/// `-lambda * mean(log max(p, 1e-12))`.
pub fn identity_loss(g: &mut Graph, posterior: Var, lambda: f64) -> Var {
    let lp = g.log_floor(posterior, POSTERIOR_FLOOR);
    let m = g.mean(lp);
    g.scale(m, -lambda)
}

/// Sum over layers of squared distances between the batch mean/variance
/// of each pre-BN activation and the layer's running mean/variance.
pub fn bn_statistics_loss(g: &mut Graph, stats: &[RunningStats], pre_bn: &[Var]) -> Result<Var> {
    if stats.is_empty() || stats.len() != pre_bn.len() {
        return Err(Error::InvalidArgument(format!(
            "{} BN layers but {} activations",
            stats.len(),
            pre_bn.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (s, &h) in stats.iter().zip(pre_bn) {
        let n = g.shape(h)[0];
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let c = s.channels();
        let mu = g.channel_mean(h)?;
        let var = g.channel_var(h)?;
        let rm = g.constant(Tensor::new(vec![c], s.mean.clone())?);
        let rv = g.constant(Tensor::new(vec![c], s.var.clone())?);
        let dm = g.sub(mu, rm)?;
        let dv = g.sub(var, rv)?;
        let dm2 = g.square(dm);
        let dv2 = g.square(dv);
        let a = g.sum(dm2);
        let b = g.sum(dv2);
        let layer = g.add(a, b)?;
        total = Some(match total {
            None => layer,
            Some(t) => g.add(t, layer)?,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Generator-side components on one generated batch.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub adv: Var,
    pub identity: Option<Var>,
    pub bn: Option<Var>,
}

/// `adv + identity + bn_weight * bn`, absent terms contributing nothing.
pub fn total_generator_loss(g: &mut Graph, terms: GeneratorTerms, bn_weight: f64) -> Result<Var> {
    let mut total = terms.adv;
    if let Some(id) = terms.identity {
        total = g.add(total, id)?;
    }
    if let Some(bn) = terms.bn {
        let w = g.scale(bn, bn_weight);
        total = g.add(total, w)?;
    }
    check_finite(g, total, "generator loss")?;
    Ok(total)
}
