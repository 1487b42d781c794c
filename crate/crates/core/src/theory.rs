//! Exact checks of the divergence bounds on small discrete distributions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SLACK: f64 = 1e-9;

/// `sum p log(p/q)` with `0 log 0 = 0`; `+inf` when `p > 0 = q`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            s += a * (a / b).ln();
        }
    }
    s
}

/// Jensen-Shannon divergence, in nats.
pub fn js(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Finite joint `p(x, y)` stored row-major as `[support][classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub support: usize,
    pub classes: usize,
    pub p: Vec<f64>,
}

impl Joint {
    pub fn new(support: usize, classes: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != support * classes || p.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("joint must be a non-negative table".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("joint sums to {total}")));
        }
        Ok(Self { support, classes, p })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.p[x * self.classes + y]
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        self.p.chunks(self.classes).map(|r| r.iter().sum()).collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|y| (0..self.support).map(|x| self.at(x, y)).sum())
            .collect()
    }

    /// `p(y | x)`, zero where `p(x) = 0`.
    pub fn posterior(&self, y: usize) -> Vec<f64> {
        self.marginal_x()
            .iter()
            .enumerate()
            .map(|(x, &px)| if px > 0.0 { self.at(x, y) / px } else { 0.0 })
            .collect()
    }

    /// Bayes conditional `p(x | y)`.
    pub fn conditional(&self, y: usize) -> Vec<f64> {
        let py = self.marginal_y()[y];
        (0..self.support).map(|x| self.at(x, y) / py).collect()
    }
}

fn dirichlet(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Dirichlet(1) joint with roughly `sparsity` of its cells zeroed, so that
/// posteriors of exactly 0 and 1 occur.
pub fn random_joint(rng: &mut impl Rng, support: usize, classes: usize, sparsity: f64) -> Joint {
    loop {
        let mut p = dirichlet(rng, support * classes);
        for v in &mut p {
            if rng.gen::<f64>() < sparsity {
                *v = 0.0;
            }
        }
        let s: f64 = p.iter().sum();
        if s > 0.0 {
            p.iter_mut().for_each(|v| *v /= s);
            let s2: f64 = p.iter().sum();
            if (s2 - 1.0).abs() <= 1e-12 {
                return Joint {
                    support,
                    classes,
                    p,
                };
            }
        }
    }
}

/// Random attacker distribution on a random non-empty subset of `allowed`.
/// Returns `None` when the drawn subset is empty.
fn random_attacker(rng: &mut impl Rng, allowed: &[bool]) -> Option<Vec<f64>> {
    let mask: Vec<bool> = allowed.iter().map(|&a| a && rng.gen::<bool>()).collect();
    let k = mask.iter().filter(|&&m| m).count();
    if k == 0 {
        return None;
    }
    let w = dirichlet(rng, k);
    let mut it = w.into_iter();
    Some(mask.iter().map(|&m| if m { it.next().unwrap() } else { 0.0 }).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub trials: usize,
    pub support: usize,
    pub classes: usize,
    pub seed: u64,
    pub disc_trials: usize,
    pub disc_support: usize,
    pub disc_lr: f64,
    pub disc_max_iters: usize,
    pub disc_tolerance: f64,
    pub disc_pass_fraction: f64,
    /// Flips the sign of the posterior term in the bounds (self-test).
    pub inject_fault: bool,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            support: 16,
            classes: 4,
            seed: 0,
            disc_trials: 100,
            disc_support: 8,
            disc_lr: 2.0,
            disc_max_iters: 50_000,
            disc_tolerance: 0.05,
            disc_pass_fraction: 0.95,
            inject_fault: false,
        }
    }
}

impl TheoryConfig {
    pub fn trial_rng(&self, stream: u64, trial: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(trial as u64);
        rng
    }

    fn posterior_sign(&self) -> f64 {
        if self.inject_fault {
            -1.0
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub trials: usize,
    pub checks: usize,
    pub violations: usize,
    pub rejections: usize,
    /// Smallest `rhs - lhs` seen (most negative is the worst violation).
    pub min_slack: f64,
    pub max_slack: f64,
    pub tightest_trial: Option<usize>,
}

impl BoundReport {
    fn new(trials: usize) -> Self {
        Self {
            trials,
            min_slack: f64::INFINITY,
            max_slack: f64::NEG_INFINITY,
            ..Default::default()
        }
    }

    fn record(&mut self, trial: usize, slack: f64) {
        self.checks += 1;
        if slack < -SLACK {
            self.violations += 1;
        }
        if slack < self.min_slack {
            self.min_slack = slack;
            self.tightest_trial = Some(trial);
        }
        self.max_slack = self.max_slack.max(slack);
    }
}

/// `JS(q || p(x|y)) <= JS(q || p(x)) - 1/2 E_q[log p(y|x)]`, with `q`
/// supported where `p(y|x) > 0` and `p(x|y)` the Bayes conditional.
pub fn verify_theorem1(cfg: &TheoryConfig) -> BoundReport {
    let mut rep = BoundReport::new(cfg.trials);
    for t in 0..cfg.trials {
        let mut rng = cfg.trial_rng(1, t);
        loop {
            let joint = random_joint(&mut rng, cfg.support, cfg.classes, 0.3);
            let y = rng.gen_range(0..cfg.classes);
            if joint.marginal_y()[y] <= 0.0 {
                rep.rejections += 1;
                continue;
            }
            let post = joint.posterior(y);
            let allowed: Vec<bool> = post.iter().map(|&r| r > 0.0).collect();
            let Some(q) = random_attacker(&mut rng, &allowed) else {
                rep.rejections += 1;
                continue;
            };
            let lhs = js(&q, &joint.conditional(y));
            let e_log: f64 = q
                .iter()
                .zip(&post)
                .filter(|(&qx, _)| qx > 0.0)
                .map(|(qx, r)| qx * r.ln())
                .sum();
            let rhs = js(&q, &joint.marginal_x()) - cfg.posterior_sign() * 0.5 * e_log;
            rep.record(t, rhs - lhs);
            break;
        }
    }
    rep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    /// Pointwise bound with unit coefficient on `-log p(y|x)`.
    pub lemma1: BoundReport,
    /// The same bound with coefficient 1/2, reported for comparison only.
    pub lemma1_half_coefficient: BoundReport,
    /// `max |lhs - rhs|` of the pointwise equality.
    pub lemma2: BoundReport,
    pub lemma2_max_residual: f64,
}

fn lemma1_terms(q: f64, px: f64, r: f64) -> (f64, f64, f64) {
    let pxy = px * r;
    let lhs = (2.0 * q / (q + pxy)).ln();
    let base = (2.0 * q / (q + px)).ln();
    (lhs, base, -r.ln())
}

/// Pointwise Lemma 1 at every `x` in the attacker's support and Lemma 2 at
/// every `x` in the class support, with the class prior fixed at `y`,
/// i.e. `p(x|y) = p(x) p(y|x)`.
pub fn verify_lemmas(cfg: &TheoryConfig) -> LemmaReport {
    let mut l1 = BoundReport::new(cfg.trials);
    let mut half = BoundReport::new(cfg.trials);
    let mut l2 = BoundReport::new(cfg.trials);
    let mut l2_max = 0.0f64;
    let sign = cfg.posterior_sign();
    for t in 0..cfg.trials {
        let mut rng = cfg.trial_rng(2, t);
        let joint = random_joint(&mut rng, cfg.support, cfg.classes, 0.3);
        let y = rng.gen_range(0..cfg.classes);
        let px = joint.marginal_x();
        let post = joint.posterior(y);
        let allowed: Vec<bool> = post.iter().map(|&r| r > 0.0).collect();
        match random_attacker(&mut rng, &allowed) {
            None => {
                l1.rejections += 1;
                half.rejections += 1;
            }
            Some(q) => {
                for x in 0..cfg.support {
                    if q[x] > 0.0 {
                        let (lhs, base, pen) = lemma1_terms(q[x], px[x], post[x]);
                        l1.record(t, base + sign * pen - lhs);
                        half.record(t, base + sign * 0.5 * pen - lhs);
                    }
                }
            }
        }

        // class y owns its support exclusively
        let exclusive = exclusive_joint(&mut rng, cfg.support, cfg.classes, y);
        let px = exclusive.marginal_x();
        let post = exclusive.posterior(y);
        let q = dirichlet(&mut rng, cfg.support);
        for x in 0..cfg.support {
            let pxy = px[x] * post[x];
            if pxy > 0.0 {
                let lhs = (2.0 * pxy / (q[x] + pxy)).ln();
                let rhs = (2.0 * px[x] / (q[x] + px[x])).ln();
                let r = (lhs - rhs).abs();
                l2_max = l2_max.max(r);
                l2.record(t, -r);
            }
        }
    }
    LemmaReport {
        lemma1: l1,
        lemma1_half_coefficient: half,
        lemma2: l2,
        lemma2_max_residual: l2_max,
    }
}

/// Joint in which every `x` with mass under class `y` has no mass under
/// any other class.
pub fn exclusive_joint(rng: &mut impl Rng, support: usize, classes: usize, y: usize) -> Joint {
    loop {
        let owner: Vec<bool> = (0..support).map(|_| rng.gen::<bool>()).collect();
        if !owner.iter().any(|&o| o) {
            continue;
        }
        let mut p = dirichlet(rng, support * classes);
        for x in 0..support {
            for c in 0..classes {
                if owner[x] != (c == y) {
                    p[x * classes + c] = 0.0;
                }
            }
        }
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        if let Ok(j) = Joint::new(support, classes, p) {
            return j;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorReport {
    pub trials: usize,
    pub converged: usize,
    pub pass_fraction: f64,
    pub worst_residual: f64,
    pub median_residual: f64,
    pub passed: bool,
}

/// Trains one logit per support point by gradient descent on the GAN
/// cross-entropy and returns `sigmoid(D)`. Points with `p + q = 0` get no
/// gradient and stay at 0.5.
pub fn train_tabular_discriminator(p: &[f64], q: &[f64], lr: f64, max_iters: usize) -> Vec<f64> {
    let mut d = vec![0.0f64; p.len()];
    let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
    for _ in 0..max_iters {
        let mut gmax = 0.0f64;
        for x in 0..p.len() {
            // d/dD of -p log s(D) - q log(1 - s(D))
            let g = (p[x] + q[x]) * sig(d[x]) - p[x];
            d[x] -= lr * g;
            gmax = gmax.max(g.abs());
        }
        if gmax < 1e-12 {
            break;
        }
    }
    d.iter().map(|&a| sig(a)).collect()
}

/// Largest gap between the trained discriminator and `p / (p + q)`.
pub fn discriminator_residual(p: &[f64], q: &[f64], sigma: &[f64]) -> f64 {
    (0..p.len())
        .filter(|&x| p[x] + q[x] > 0.0)
        .map(|x| (sigma[x] - p[x] / (p[x] + q[x])).abs())
        .fold(0.0, f64::max)
}

pub fn verify_optimal_discriminator(cfg: &TheoryConfig) -> DiscriminatorReport {
    let mut residuals = Vec::with_capacity(cfg.disc_trials);
    for t in 0..cfg.disc_trials {
        let mut rng = cfg.trial_rng(3, t);
        let p = dirichlet(&mut rng, cfg.disc_support);
        let q = dirichlet(&mut rng, cfg.disc_support);
        let s = train_tabular_discriminator(&p, &q, cfg.disc_lr, cfg.disc_max_iters);
        residuals.push(discriminator_residual(&p, &q, &s));
    }
    let converged = residuals.iter().filter(|&&r| r < cfg.disc_tolerance).count();
    let mut sorted = residuals.clone();
    sorted.sort_by(f64::total_cmp);
    let pass_fraction = converged as f64 / cfg.disc_trials.max(1) as f64;
    DiscriminatorReport {
        trials: cfg.disc_trials,
        converged,
        pass_fraction,
        worst_residual: sorted.last().copied().unwrap_or(0.0),
        median_residual: sorted.get(sorted.len() / 2).copied().unwrap_or(0.0),
        passed: pass_fraction >= cfg.disc_pass_fraction,
    }
}

/// Binary field over a `1 x len` strip with 2-pixel patches at stride 1.
/// Patch `i` covers pixels `(i, i+1)`; its neighbourhood is pixel `i`, the
/// pixel it shares with the previous patch (empty for the first patch).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchField {
    pub len: usize,
    /// Probability of each of the `2^len` configurations; bit `k` of the
    /// index is pixel `k`.
    pub probs: Vec<f64>,
}

impl PatchField {
    /// Builds a field from a table, rejecting tables for which the product
    /// of patch conditionals does not reproduce the joint.
    pub fn from_table(len: usize, probs: Vec<f64>) -> Result<Self> {
        if len < 2 || probs.len() != 1 << len {
            return Err(Error::InvalidArgument(format!("field of length {len} with {} cells", probs.len())));
        }
        let f = Self { len, probs };
        for cfg in 0..1usize << f.len {
            let prod: f64 = (0..f.num_patches()).map(|i| f.patch_conditional(cfg, i)).product();
            if (prod - f.probs[cfg]).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "patch conditionals do not factor the joint at configuration {cfg:0w$b}",
                    w = f.len
                )));
            }
        }
        Ok(f)
    }

    /// Binary Markov chain with the given start distribution and
    /// transition rows.
    pub fn markov(len: usize, start: [f64; 2], trans: [[f64; 2]; 2]) -> Result<Self> {
        let probs = (0..1usize << len)
            .map(|cfg| {
                let bit = |k: usize| (cfg >> k) & 1;
                let mut p = start[bit(0)];
                for k in 1..len {
                    p *= trans[bit(k - 1)][bit(k)];
                }
                p
            })
            .collect();
        Self::from_table(len, probs)
    }

    pub fn num_patches(&self) -> usize {
        self.len - 1
    }

    /// Marginal probability that the pixels in `pixels` take the values
    /// they have in `cfg`.
    fn marginal(&self, cfg: usize, pixels: &[usize]) -> f64 {
        let mask: usize = pixels.iter().map(|&k| 1 << k).sum();
        self.probs
            .iter()
            .enumerate()
            .filter(|(c, _)| c & mask == cfg & mask)
            .map(|(_, p)| p)
            .sum()
    }

    /// `p(x_i | x_{-i})` for patch `i` in configuration `cfg`.
    pub fn patch_conditional(&self, cfg: usize, i: usize) -> f64 {
        let joint = self.marginal(cfg, &[i, i + 1]);
        if i == 0 {
            return joint;
        }
        let nb = self.marginal(cfg, &[i]);
        if nb > 0.0 {
            joint / nb
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchReport {
    pub configurations: usize,
    pub patches: usize,
    pub max_residual: f64,
    pub passed: bool,
}

/// `log p(x)/q(x) = sum_i log p(x_i|x_-i)/q(x_i|x_-i)` for every
/// configuration with positive mass under both fields.
pub fn verify_patch_decomposition(p: &PatchField, q: &PatchField) -> Result<PatchReport> {
    if p.len != q.len {
        return Err(Error::InvalidArgument("fields of different length".into()));
    }
    let mut max_residual = 0.0f64;
    let mut configurations = 0;
    for cfg in 0..1usize << p.len {
        if p.probs[cfg] <= 0.0 || q.probs[cfg] <= 0.0 {
            continue;
        }
        configurations += 1;
        let lhs = (p.probs[cfg] / q.probs[cfg]).ln();
        let rhs: f64 = (0..p.num_patches())
            .map(|i| (p.patch_conditional(cfg, i) / q.patch_conditional(cfg, i)).ln())
            .sum();
        max_residual = max_residual.max((lhs - rhs).abs());
    }
    Ok(PatchReport {
        configurations,
        patches: p.num_patches(),
        max_residual,
        passed: max_residual < SLACK,
    })
}

pub fn random_chain(rng: &mut impl Rng, len: usize) -> Result<PatchField> {
    let mut b = || rng.gen_range(0.05..0.95);
    let (s, t0, t1) = (b(), b(), b());
    PatchField::markov(len, [s, 1.0 - s], [[t0, 1.0 - t0], [t1, 1.0 - t1]])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoReport {
    pub trials: usize,
    /// Max `|I - (E[KL] + H(y) + E[log p_hat])|`.
    pub max_chain_residual: f64,
    pub violations: usize,
    /// Trials with `p_hat = 0` where `q(y|x) > 0` (right side is `-inf`).
    pub infinite_rhs: usize,
    pub min_slack: f64,
}

/// Mutual information of a joint and the terms of its lower bound with
/// respect to a surrogate posterior table `p_hat[x][y]`.
pub struct InfoTerms {
    pub mutual_information: f64,
    pub expected_kl: f64,
    pub entropy_y: f64,
    pub expected_log_p_hat: f64,
}

pub fn info_terms(joint: &Joint, p_hat: &[f64]) -> InfoTerms {
    let px = joint.marginal_x();
    let py = joint.marginal_y();
    let hy = entropy(&py);
    let mut h_y_given_x = 0.0;
    let mut e_kl = 0.0;
    let mut e_log = 0.0;
    for x in 0..joint.support {
        if px[x] <= 0.0 {
            continue;
        }
        let qx: Vec<f64> = (0..joint.classes).map(|y| joint.at(x, y) / px[x]).collect();
        let ph = &p_hat[x * joint.classes..(x + 1) * joint.classes];
        h_y_given_x += px[x] * entropy(&qx);
        e_kl += px[x] * kl(&qx, ph);
        for y in 0..joint.classes {
            if qx[y] > 0.0 {
                e_log += px[x] * qx[y] * ph[y].ln();
            }
        }
    }
    InfoTerms {
        mutual_information: hy - h_y_given_x,
        expected_kl: e_kl,
        entropy_y: hy,
        expected_log_p_hat: e_log,
    }
}

pub fn verify_proposition1(cfg: &TheoryConfig) -> InfoReport {
    let mut rep = InfoReport {
        trials: cfg.trials,
        max_chain_residual: 0.0,
        violations: 0,
        infinite_rhs: 0,
        min_slack: f64::INFINITY,
    };
    for t in 0..cfg.trials {
        let mut rng = cfg.trial_rng(4, t);
        let joint = random_joint(&mut rng, cfg.support, cfg.classes, 0.3);
        let mut p_hat = Vec::with_capacity(cfg.support * cfg.classes);
        for _ in 0..cfg.support {
            p_hat.extend(dirichlet(&mut rng, cfg.classes));
        }
        // occasionally a surrogate that rules out a class somewhere
        if rng.gen::<f64>() < 0.05 {
            let x = rng.gen_range(0..cfg.support);
            let row = &mut p_hat[x * cfg.classes..(x + 1) * cfg.classes];
            row[rng.gen_range(0..cfg.classes)] = 0.0;
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let terms = info_terms(&joint, &p_hat);
        let e_log = cfg.posterior_sign() * terms.expected_log_p_hat;
        if !terms.expected_log_p_hat.is_finite() {
            rep.infinite_rhs += 1;
            continue;
        }
        let chain = terms.expected_kl + terms.entropy_y + terms.expected_log_p_hat;
        rep.max_chain_residual = rep.max_chain_residual.max((terms.mutual_information - chain).abs());
        let slack = terms.mutual_information - e_log;
        rep.min_slack = rep.min_slack.min(slack);
        if slack < -SLACK {
            rep.violations += 1;
        }
    }
    rep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub config: TheoryConfig,
    pub theorem1: BoundReport,
    pub lemmas: LemmaReport,
    pub optimal_discriminator: DiscriminatorReport,
    pub patch_decomposition: PatchReport,
    pub proposition1: InfoReport,
}

impl TheoryReport {
    pub fn violations(&self) -> usize {
        self.theorem1.violations
            + self.lemmas.lemma1.violations
            + self.lemmas.lemma2.violations
            + self.proposition1.violations
            + (self.proposition1.max_chain_residual >= SLACK) as usize
            + (!self.patch_decomposition.passed) as usize
            + (!self.optimal_discriminator.passed) as usize
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }
}

/// Runs every check. Patch fields are random binary chains of length 4.
pub fn run_all(cfg: &TheoryConfig) -> Result<TheoryReport> {
    if cfg.support == 0 || cfg.classes < 2 || cfg.disc_support == 0 {
        return Err(Error::Config(format!(
            "theory harness needs support >= 1 and classes >= 2, got {} and {}",
            cfg.support, cfg.classes
        )));
    }
    let mut rng = cfg.trial_rng(5, 0);
    let p = random_chain(&mut rng, 4)?;
    let q = random_chain(&mut rng, 4)?;
    Ok(TheoryReport {
        config: cfg.clone(),
        theorem1: verify_theorem1(cfg),
        lemmas: verify_lemmas(cfg),
        optimal_discriminator: verify_optimal_discriminator(cfg),
        patch_decomposition: verify_patch_decomposition(&p, &q)?,
        proposition1: verify_proposition1(cfg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    #[test]
    fn kl_and_js_closed_forms() {
        assert_eq!(kl(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((kl(&[1.0, 0.0], &[0.5, 0.5]) - LN_2).abs() < 1e-15);
        assert_eq!(kl(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
        assert!((js(&[1.0, 0.0], &[0.0, 1.0]) - LN_2).abs() < 1e-15);
        assert_eq!(js(&[0.2, 0.8], &[0.2, 0.8]), 0.0);
    }

    #[test]
    fn theorem1_with_q_equal_to_conditional() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let joint = random_joint(&mut rng, 16, 4, 0.3);
        let y = (0..4).find(|&y| joint.marginal_y()[y] > 0.0).unwrap();
        let q = joint.conditional(y);
        let post = joint.posterior(y);
        let e: f64 = q.iter().zip(&post).filter(|(a, _)| **a > 0.0).map(|(a, r)| a * r.ln()).sum();
        assert_eq!(js(&q, &joint.conditional(y)), 0.0);
        assert!(js(&q, &joint.marginal_x()) - 0.5 * e >= 0.0);
    }

    #[test]
    fn lemma1_gap_at_half_posterior() {
        // q = p(x) = 0.2, p(y|x) = 1 gives equality; p(y|x) = 0.5 a strict gap
        let (lhs, base, pen) = lemma1_terms(0.2, 0.2, 1.0);
        assert!((lhs - base).abs() < 1e-15 && pen == 0.0);
        let (lhs, base, pen) = lemma1_terms(0.2, 0.2, 0.5);
        assert!((pen - LN_2).abs() < 1e-15);
        let direct = (2.0 * 0.2 / (0.2 + 0.1f64)).ln();
        assert!((lhs - direct).abs() < 1e-15);
        assert!(base + pen - lhs > 0.0);
    }

    #[test]
    fn half_coefficient_form_can_fail() {
        // attacker mass small next to the target marginal
        let (lhs, base, pen) = lemma1_terms(1e-3, 0.5, 0.1);
        assert!(base + pen - lhs >= 0.0);
        assert!(base + 0.5 * pen - lhs < 0.0);
    }

    #[test]
    fn discriminator_edge_cases() {
        let s = train_tabular_discriminator(&[0.25; 4], &[0.25; 4], 2.0, 1000);
        assert!(s.iter().all(|v| (v - 0.5).abs() < 1e-12));
        let s = train_tabular_discriminator(&[1.0, 0.0], &[0.0, 1.0], 2.0, 50_000);
        assert!(s[0] > 0.99 && s[1] < 0.01);
    }

    #[test]
    fn single_patch_and_equal_fields() {
        let p = PatchField::markov(2, [0.3, 0.7], [[0.6, 0.4], [0.1, 0.9]]).unwrap();
        let q = PatchField::markov(2, [0.5, 0.5], [[0.2, 0.8], [0.7, 0.3]]).unwrap();
        let r = verify_patch_decomposition(&p, &q).unwrap();
        assert_eq!(r.patches, 1);
        assert!(r.passed);
        let r = verify_patch_decomposition(&p, &p).unwrap();
        assert_eq!(r.max_residual, 0.0);
    }

    #[test]
    fn non_factorising_field_is_rejected() {
        // pixel 2 depends on pixel 0 given pixel 1
        let mut probs = vec![0.0; 8];
        probs[0b000] = 0.3;
        probs[0b101] = 0.3;
        probs[0b100] = 0.2;
        probs[0b001] = 0.2;
        assert!(PatchField::from_table(3, probs).is_err());
    }

    #[test]
    fn proposition1_residual_is_entropy_for_true_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let joint = random_joint(&mut rng, 16, 4, 0.0);
        let px = joint.marginal_x();
        let p_hat: Vec<f64> = (0..16 * 4).map(|i| joint.p[i] / px[i / 4]).collect();
        let t = info_terms(&joint, &p_hat);
        assert!(t.expected_kl.abs() < 1e-12);
        assert!((t.mutual_information - t.expected_log_p_hat - t.entropy_y).abs() < 1e-12);
        let uniform = vec![0.25; 64];
        let t = info_terms(&joint, &uniform);
        assert!((t.expected_log_p_hat + 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn independent_variables_have_zero_information() {
        let px = [0.1, 0.2, 0.3, 0.4];
        let py = [0.5, 0.25, 0.25];
        let p: Vec<f64> = (0..12).map(|i| px[i / 3] * py[i % 3]).collect();
        let joint = Joint::new(4, 3, p).unwrap();
        let p_hat: Vec<f64> = (0..12).map(|i| py[i % 3]).collect();
        let t = info_terms(&joint, &p_hat);
        assert!(t.mutual_information.abs() < 1e-12);
        assert!((t.expected_log_p_hat + entropy(&py)).abs() < 1e-12);
    }

    #[test]
    fn injected_fault_is_detected() {
        let cfg = TheoryConfig {
            trials: 200,
            disc_trials: 4,
            inject_fault: true,
            ..Default::default()
        };
        let rep = run_all(&cfg).unwrap();
        assert!(rep.theorem1.violations > 0);
        assert!(!rep.passed());
    }

    proptest! {
        #[test]
        fn divergence_ranges(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = dirichlet(&mut rng, 6);
            let q = dirichlet(&mut rng, 6);
            let j = js(&p, &q);
            prop_assert!((0.0..=LN_2 + 1e-15).contains(&j));
            prop_assert!((j - js(&q, &p)).abs() < 1e-12);
            prop_assert!(kl(&p, &q) >= 0.0);
        }

        #[test]
        fn random_chains_decompose(seed in 0u64..100_000, len in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_chain(&mut rng, len).unwrap();
            let q = random_chain(&mut rng, len).unwrap();
            let r = verify_patch_decomposition(&p, &q).unwrap();
            prop_assert_eq!(r.configurations, 1 << len);
            prop_assert!(r.passed, "{}", r.max_residual);
        }
    }
}
