//! Attack engines: pixel-space (BMI), latent-space (GMI) and the
//! patch-adversarial generator (Patch-MI), plus shared configuration.

mod bmi;
mod gmi;
mod patchmi;

pub use bmi::{bmi_attack, BmiOutput};
pub use gmi::{gmi_attack, GmiOutput};
pub use patchmi::{patchmi_train, PatchMiOutput};

use serde::{Deserialize, Serialize};

use crate::augment::TransformSpec;
use crate::autodiff::{Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::losses::AttackLossConfig;
use crate::nn::{GeneratorConfig, PatchDiscriminatorConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bmi,
    Gmi,
    Patchmi,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Bmi => "bmi",
            Method::Gmi => "gmi",
            Method::Patchmi => "patchmi",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bmi" => Ok(Method::Bmi),
            "gmi" => Ok(Method::Gmi),
            "patchmi" => Ok(Method::Patchmi),
            other => Err(Error::Config(format!(
                "unknown attack method {other:?} (expected bmi, gmi or patchmi)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllClasses {
    All,
}

/// A single class id or the string `"all"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetClass {
    Class(usize),
    All(AllClasses),
}

impl Default for TargetClass {
    fn default() -> Self {
        TargetClass::All(AllClasses::All)
    }
}

impl TargetClass {
    pub fn classes(&self, num_classes: usize) -> Result<Vec<usize>> {
        match *self {
            TargetClass::All(_) => Ok((0..num_classes).collect()),
            TargetClass::Class(c) if c < num_classes => Ok(vec![c]),
            TargetClass::Class(c) => Err(Error::Config(format!(
                "target class {c} outside {num_classes} classes"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn build(&self) -> Optimizer {
        Optimizer::new(OptimizerKind::Adam {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BmiInit {
    Zeros,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BmiConfig {
    pub steps: usize,
    pub lr: f64,
    pub init: BmiInit,
    pub init_sigma: f64,
    /// Clamp pixels to the normalised image range after every step.
    pub clamp: bool,
    /// Posterior of the target class is recorded every this many steps.
    pub record_every: usize,
}

impl Default for BmiConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.1,
            init: BmiInit::Noise,
            init_sigma: 0.01,
            clamp: true,
            record_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmiConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Epochs of the λ = 0 full-image GAN trained on the auxiliary set.
    pub pretrain_epochs: usize,
}

impl Default for GmiConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.02,
            lambda: 100.0,
            pretrain_epochs: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub method: Method,
    pub target_class: TargetClass,
    pub loss: AttackLossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub transform: TransformSpec,
    pub generator: GeneratorConfig,
    pub discriminator: PatchDiscriminatorConfig,
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Images generated per class for evaluation.
    pub replicas: usize,
    pub bmi: BmiConfig,
    pub gmi: GmiConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: Method::Patchmi,
            target_class: TargetClass::default(),
            loss: AttackLossConfig::default(),
            epochs: 30,
            batch_size: 64,
            optimizer: AdamConfig::default(),
            transform: TransformSpec::preset("grayscale_attack").expect("built-in preset"),
            generator: GeneratorConfig::default(),
            discriminator: PatchDiscriminatorConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            replicas: 1000,
            bmi: BmiConfig::default(),
            gmi: GmiConfig::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.transform.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.generator.channels != self.discriminator.channels {
            return Err(Error::Config(format!(
                "generator emits {} channels but the discriminator reads {}",
                self.generator.channels, self.discriminator.channels
            )));
        }
        if !(self.optimizer.lr > 0.0) || !(self.bmi.lr > 0.0) || !(self.gmi.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.gmi.lambda < 0.0 {
            return Err(Error::Config("gmi.lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mean losses over one epoch. Terms that were not computed are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub steps: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub identity: Option<f64>,
    pub bn: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRun {
    pub method: Method,
    pub class: Option<usize>,
    pub config: AttackConfig,
    pub curves: Vec<EpochLosses>,
    pub steps: usize,
    pub classifier_calls: usize,
    pub wall_seconds: f64,
}

impl AttackRun {
    pub fn curves_finite(&self) -> bool {
        self.curves.iter().all(|c| {
            c.d_loss.is_finite()
                && c.g_adv.is_finite()
                && c.identity.map_or(true, f64::is_finite)
                && c.bn.map_or(true, f64::is_finite)
        })
    }

    pub fn curves_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::from("epoch,steps,d_loss,g_adv,identity,bn\n");
        for c in &self.curves {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.epoch,
                c.steps,
                c.d_loss,
                c.g_adv,
                opt(c.identity),
                opt(c.bn)
            ));
        }
        s
    }
}

/// Stable seed derivation from a master seed, a role tag and an index.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = master ^ 0x243F_6A88_85A3_08D3;
    for b in tag.bytes().chain(index.to_le_bytes()) {
        h = splitmix(h ^ b as u64);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
