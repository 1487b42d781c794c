//! Run configuration and the train / attack / evaluate workflow behind
//! the command-line front end. Every step reads one `RunConfig` and
//! writes under a single output root:
//!
//! ```text
//! <root>/classifiers/{resolved.toml, target.ckpt, evaluation.ckpt, report.json}
//! <root>/attacks/<method>/{resolved.toml, run.json, samples.ckpt, grid.pgm|ppm}
//! <root>/attacks/<method>/class<y>/{curves.csv, generator.ckpt, discriminator.ckpt}
//! <root>/attacks/gmi/gan/{curves.csv, generator.ckpt, discriminator.ckpt}
//! <root>/evaluation/{resolved.toml, <method>.json, <method>.txt}
//! ```

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    bmi_attack, derive_seed, gmi_attack, patchmi_train, AttackConfig, AttackRun, Method,
};
use crate::augment::TransformSpec;
use crate::autodiff::Tensor;
use crate::data::{self, Dataset, GlyphSpec, IdxOptions};
use crate::error::{Error, Result};
use crate::metrics::{self, EvaluationReport};
use crate::theory::{self, TheoryConfig, TheoryReport};
use crate::nn::{Arch, Checkpoint, Classifier, Generator, PatchDiscriminator, PatchDiscriminatorConfig};
use crate::train::{train_classifier, ClassifierRecipe, TrainReport};

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(GlyphSpec),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        resize_to: Option<usize>,
        #[serde(default)]
        transpose: bool,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(spec) => data::synth_glyphs(spec),
            DataSource::Idx {
                images,
                labels,
                resize_to,
                transpose,
            } => {
                let images = data::require_file(images)?;
                let labels = data::require_file(labels)?;
                let opts = IdxOptions {
                    resize_to: *resize_to,
                    transpose: *transpose,
                };
                data::load_idx_with(&images, &labels, opts)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Private data of the target classifier.
    pub target: DataSource,
    /// Public data available to the attacker.
    pub aux: DataSource,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            target: DataSource::Synthetic(GlyphSpec::target(200, 1)),
            aux: DataSource::Synthetic(GlyphSpec::aux(20, 32, 2)),
            train_fraction: 0.9,
            split_seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Neighbourhood size of the manifold metrics.
    pub k: usize,
    /// Real images per class scored against; 0 uses all of them.
    pub real_per_class: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { k: 5, real_per_class: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Samples per class shown in the image grid.
    pub grid_columns: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { grid_columns: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Classes attacked concurrently.
    pub jobs: usize,
    pub data: DataConfig,
    pub classifier: ClassifierRecipe,
    pub evaluation_classifier: ClassifierRecipe,
    pub attack: AttackConfig,
    pub metrics: MetricsConfig,
    pub output: OutputConfig,
    pub theory: TheoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut evaluation_classifier = ClassifierRecipe::default();
        evaluation_classifier.arch.widths = vec![16, 32, 64, 64];
        evaluation_classifier.seed = 1;
        Self {
            seed: 0,
            out_dir: None,
            jobs: 1,
            data: DataConfig::default(),
            classifier: ClassifierRecipe::default(),
            evaluation_classifier,
            attack: AttackConfig::default(),
            metrics: MetricsConfig::default(),
            output: OutputConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fully expanded TOML; loading it reproduces this config exactly.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the resolved TOML, ignoring the output root and the
    /// job count, which do not change results.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = None;
        c.jobs = 1;
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Replaces the master seed and re-derives every component seed
    /// from it. Derived seeds keep to 63 bits, the TOML integer range.
    pub fn with_master_seed(mut self, seed: u64) -> Self {
        let derive_seed = |master, tag: &str, index| derive_seed(master, tag, index) >> 1;
        self.seed = seed;
        for (src, tag) in [(&mut self.data.target, "target-data"), (&mut self.data.aux, "aux-data")] {
            if let DataSource::Synthetic(spec) = src {
                spec.seed = derive_seed(seed, tag, 0);
            }
        }
        self.data.split_seed = derive_seed(seed, "split", 0);
        self.classifier.seed = derive_seed(seed, "target-classifier", 0);
        self.evaluation_classifier.seed = derive_seed(seed, "evaluation-classifier", 0);
        self.attack.seed = derive_seed(seed, "attack", 0);
        self.theory.seed = derive_seed(seed, "theory", 0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        self.classifier.validate()?;
        self.evaluation_classifier.validate()?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.train_fraction must lie in (0, 1), got {}",
                self.data.train_fraction
            )));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.metrics.k == 0 {
            return Err(Error::Config("metrics.k must be at least 1".into()));
        }
        if self.classifier.seed == self.evaluation_classifier.seed
            && self.classifier.arch == self.evaluation_classifier.arch
        {
            return Err(Error::Config(
                "target and evaluation classifiers must differ in seed or architecture".into(),
            ));
        }
        Ok(())
    }
}

pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub aux: Dataset,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let target = cfg.data.target.load()?;
    let aux = cfg.data.aux.load()?;
    if target.image_shape() != aux.image_shape() {
        return Err(Error::Config(format!(
            "target images {:?} and auxiliary images {:?} differ in shape",
            target.image_shape(),
            aux.image_shape()
        )));
    }
    let (train, val) = data::split(&target, cfg.data.train_fraction, cfg.data.split_seed)?;
    Ok(PreparedData { train, val, aux })
}

pub struct TrainedClassifiers {
    pub target: Classifier,
    pub evaluation: Classifier,
    pub target_report: TrainReport,
    pub evaluation_report: TrainReport,
}

/// Trains the target and the evaluation classifier on the same split.
pub fn train_classifiers(cfg: &RunConfig, data: &PreparedData) -> Result<TrainedClassifiers> {
    let (target, target_report) = train_classifier(&data.train, &data.val, &cfg.classifier)?;
    let (evaluation, evaluation_report) = train_classifier(&data.train, &data.val, &cfg.evaluation_classifier)?;
    Ok(TrainedClassifiers {
        target,
        evaluation,
        target_report,
        evaluation_report,
    })
}

/// Attack outputs: one image batch per attacked class.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub method: Method,
    pub classes: Vec<usize>,
    pub images: Vec<Tensor>,
}

impl Samples {
    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(
            Arch::Samples {
                method: self.method.name().to_string(),
            },
            seed,
            0,
        );
        for (y, t) in self.classes.iter().zip(&self.images) {
            ck.tensors.push((format!("class{y}"), t.clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let Arch::Samples { method } = &ck.arch else {
            return Err(Error::CorruptCheckpoint(format!("expected attack samples, found {:?}", ck.arch)));
        };
        let method = method.parse()?;
        let mut classes = Vec::with_capacity(ck.tensors.len());
        let mut images = Vec::with_capacity(ck.tensors.len());
        for (name, t) in &ck.tensors {
            let y = name
                .strip_prefix("class")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::CorruptCheckpoint(format!("unexpected sample tensor {name}")))?;
            if t.shape().len() != 4 {
                return Err(Error::CorruptCheckpoint(format!("{name}: shape {:?}", t.shape())));
            }
            classes.push(y);
            images.push(t.clone());
        }
        Ok(Self { method, classes, images })
    }

    /// The first `cols` samples of each class side by side, one row per
    /// class, with a 2 px black gutter. Returns PGM for one channel and
    /// PPM for three.
    pub fn grid(&self, cols: usize) -> Result<Vec<u8>> {
        let first = self
            .images
            .first()
            .ok_or_else(|| Error::InvalidArgument("no samples to draw".into()))?;
        let [c, h, w] = [first.shape()[1], first.shape()[2], first.shape()[3]];
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("grid needs 1 or 3 channels, got {c}")));
        }
        let gap = 2;
        let cols = cols.max(1);
        let width = cols * (w + gap) + gap;
        let height = self.images.len() * (h + gap) + gap;
        let mut pix = vec![0u8; width * height * c];
        for (row, t) in self.images.iter().enumerate() {
            if t.shape()[1..] != [c, h, w] {
                return Err(Error::Shape(format!("class batches differ in shape: {:?}", t.shape())));
            }
            for col in 0..cols.min(t.batch_len()) {
                let img = &t.data()[col * c * h * w..(col + 1) * c * h * w];
                for i in 0..h {
                    for j in 0..w {
                        let (py, px) = (gap + row * (h + gap) + i, gap + col * (w + gap) + j);
                        for ch in 0..c {
                            let v = data::denormalize(img[ch * h * w + i * w + j]).clamp(0.0, 1.0);
                            pix[(py * width + px) * c + ch] = (v * 255.0).round() as u8;
                        }
                    }
                }
            }
        }
        let magic = if c == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
        out.extend_from_slice(&pix);
        Ok(out)
    }
}

/// Per-class record of one attack run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    pub wall_seconds: f64,
    /// Patch-MI training run.
    pub run: Option<AttackRun>,
    /// `(step, value)`: target posterior for BMI, objective for GMI.
    pub curve: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub method: Method,
    pub config_hash: String,
    pub classes: Vec<ClassSummary>,
    /// The λ = 0 full-image GAN that GMI searches.
    pub pretrain: Option<AttackRun>,
    pub wall_seconds: f64,
}

impl ClassSummary {
    fn curve_csv(&self, method: Method) -> String {
        if let Some(run) = &self.run {
            return run.curves_csv();
        }
        let col = if method == Method::Bmi { "posterior" } else { "objective" };
        let mut s = format!("step,{col}\n");
        for (step, v) in &self.curve {
            s.push_str(&format!("{step},{v}\n"));
        }
        s
    }
}

pub struct AttackOutput {
    pub samples: Samples,
    pub report: AttackReport,
}

/// Runs `f(0..n)` on up to `jobs` threads; results keep index order.
/// After the first error no new items are started.
fn par_map<T: Send>(jobs: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                if r.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    let mut out = Vec::with_capacity(n);
    let mut first_err = None;
    for slot in slots {
        match slot.into_inner().expect("slot lock") {
            Some(Ok(v)) => out.push(v),
            Some(Err(e)) => {
                first_err.get_or_insert(e);
            }
            None => {}
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn save_pair(dir: &Path, gen: &Generator, disc: &PatchDiscriminator, seed: u64, epoch: usize) -> Result<()> {
    gen.to_checkpoint(seed, epoch).save(dir.join("generator.ckpt"))?;
    disc.to_checkpoint(seed, epoch).save(dir.join("discriminator.ckpt"))
}

/// Epoch hook that keeps the latest finished epoch on disk, so a later
/// divergence leaves the last good networks behind.
fn checkpointer(dir: Option<PathBuf>, every: usize, seed: u64) -> impl FnMut(usize, &Generator, &PatchDiscriminator) -> Result<()> {
    move |epoch, gen, disc| match &dir {
        Some(d) if every > 0 && epoch % every == 0 => save_pair(d, gen, disc, seed, epoch),
        _ => Ok(()),
    }
}

/// Full-image GAN configuration searched by GMI.
pub fn gmi_gan_config(cfg: &AttackConfig) -> AttackConfig {
    let d = &cfg.discriminator;
    let mut gan = cfg.clone();
    gan.loss.lambda = 0.0;
    gan.transform = TransformSpec::identity();
    gan.discriminator = PatchDiscriminatorConfig::full_image(d.channels, d.image_size, d.width);
    gan.epochs = cfg.gmi.pretrain_epochs;
    gan.seed = derive_seed(cfg.seed, "gmi-gan", 0);
    gan
}

/// Runs one attack method on every configured class. When `out` is given,
/// checkpoints and curves are written below it as the run proceeds.
pub fn run_attack(
    cfg: &RunConfig,
    method: Method,
    target: &Classifier,
    aux: &Dataset,
    out: Option<&Path>,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<AttackOutput> {
    let mut acfg = cfg.attack.clone();
    acfg.method = method;
    acfg.validate()?;
    let started = Instant::now();
    let classes = acfg.target_class.classes(target.config().classes)?;
    let class_dir = |y: usize| -> Result<Option<PathBuf>> {
        match out {
            Some(root) => {
                let d = root.join(format!("class{y}"));
                create_dir(&d)?;
                Ok(Some(d))
            }
            None => Ok(None),
        }
    };
    let mut pretrain = None;
    let gan = if method == Method::Gmi {
        let gcfg = gmi_gan_config(&acfg);
        let dir = match out {
            Some(root) => {
                let d = root.join("gan");
                create_dir(&d)?;
                Some(d)
            }
            None => None,
        };
        progress(&format!("gmi: training the full-image GAN for {} epochs", gcfg.epochs));
        let mut hook = checkpointer(dir.clone(), gcfg.checkpoint_every, gcfg.seed);
        let trained = patchmi_train(aux, target, 0, &gcfg, &mut hook)?;
        let mut run = trained.run;
        run.class = None;
        if let Some(d) = &dir {
            save_pair(d, &trained.generator, &trained.discriminator, gcfg.seed, gcfg.epochs)?;
            write(&d.join("curves.csv"), run.curves_csv())?;
        }
        pretrain = Some(run);
        Some((trained.generator, trained.discriminator))
    } else {
        None
    };

    let n = acfg.replicas;
    let results = par_map(cfg.jobs, classes.len(), |i| {
        let y = classes[i];
        let t0 = Instant::now();
        let dir = class_dir(y)?;
        let (images, run, curve) = match method {
            Method::Bmi => {
                let o = bmi_attack(target, y, &acfg.bmi, n, derive_seed(acfg.seed, "bmi", y as u64))?;
                (o.images, None, o.posterior_curve)
            }
            Method::Gmi => {
                let (gen, disc) = gan.as_ref().expect("pretrained above");
                let o = gmi_attack(gen, disc, target, y, &acfg.gmi, n, derive_seed(acfg.seed, "gmi", y as u64))?;
                let curve = o.loss_curve.into_iter().enumerate().collect();
                (o.images, None, curve)
            }
            Method::Patchmi => {
                let mut hook = checkpointer(dir.clone(), acfg.checkpoint_every, acfg.seed);
                let trained = patchmi_train(aux, target, y, &acfg, &mut hook).map_err(|e| match (&dir, e) {
                    (Some(d), Error::Divergence { what, step }) if acfg.checkpoint_every > 0 => Error::Divergence {
                        what: format!("{what}; last good checkpoint kept in {}", d.display()),
                        step,
                    },
                    (_, e) => e,
                })?;
                if let Some(d) = &dir {
                    save_pair(d, &trained.generator, &trained.discriminator, acfg.seed, acfg.epochs)?;
                }
                let images = trained
                    .generator
                    .sample_replicas(n, derive_seed(acfg.seed, "replicas", y as u64))?;
                (images, Some(trained.run), Vec::new())
            }
        };
        let summary = ClassSummary {
            class: y,
            wall_seconds: t0.elapsed().as_secs_f64(),
            run,
            curve,
        };
        if let Some(d) = &dir {
            write(&d.join("curves.csv"), summary.curve_csv(method))?;
        }
        progress(&format!("{}: class {y} done in {:.1}s", method.name(), summary.wall_seconds));
        Ok((images, summary))
    })?;
    let (images, summaries): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let mut resolved = cfg.clone();
    resolved.attack.method = method;
    Ok(AttackOutput {
        samples: Samples {
            method,
            classes,
            images,
        },
        report: AttackReport {
            method,
            config_hash: resolved.hash()?,
            classes: summaries,
            pretrain,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    })
}

/// Scores attack samples with the evaluation classifier against the real
/// training images of each attacked class.
pub fn evaluate_samples(
    samples: &Samples,
    evaluation: &Classifier,
    real: &Dataset,
    metrics_cfg: &MetricsConfig,
    config_hash: &str,
) -> Result<EvaluationReport> {
    let mut rows = Vec::with_capacity(samples.classes.len());
    let mut gen_feats = Vec::with_capacity(samples.classes.len());
    let mut real_feats = Vec::with_capacity(samples.classes.len());
    for (&y, images) in samples.classes.iter().zip(&samples.images) {
        let mut idx = real.class_indices(y);
        if metrics_cfg.real_per_class > 0 {
            idx.truncate(metrics_cfg.real_per_class);
        }
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!("no real images of class {y}")));
        }
        let (row, g, r) = metrics::evaluate_class(evaluation, images, y, &real.images.select(&idx), metrics_cfg.k)?;
        rows.push(row);
        gen_feats.push(g);
        real_feats.push(r);
    }
    let aggregate = metrics::aggregate(&rows, &gen_feats, &real_feats)?;
    Ok(EvaluationReport {
        method: samples.method.name().to_string(),
        config_hash: config_hash.to_string(),
        classes: rows,
        aggregate,
    })
}

/// Output layout below one root directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn classifiers(&self) -> PathBuf {
        self.root.join("classifiers")
    }

    pub fn attack(&self, method: Method) -> PathBuf {
        self.root.join("attacks").join(method.name())
    }

    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation")
    }

    pub fn theory(&self) -> PathBuf {
        self.root.join("theory")
    }

    pub fn target_classifier(&self) -> PathBuf {
        self.classifiers().join("target.ckpt")
    }

    pub fn evaluation_classifier(&self) -> PathBuf {
        self.classifiers().join("evaluation.ckpt")
    }

    pub fn samples(&self, method: Method) -> PathBuf {
        self.attack(method).join("samples.ckpt")
    }

    fn prepare(&self, dir: &Path, cfg: &RunConfig) -> Result<()> {
        create_dir(dir)?;
        write(&dir.join("resolved.toml"), cfg.to_toml()?)
    }
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found; run the producing step first")),
        ));
    }
    Checkpoint::load(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub config_hash: String,
    pub target: TrainReport,
    pub evaluation: TrainReport,
}

pub fn cmd_train_classifier(cfg: &RunConfig, layout: &Layout) -> Result<ClassifierSummary> {
    let dir = layout.classifiers();
    layout.prepare(&dir, cfg)?;
    let data = prepare_data(cfg)?;
    let trained = train_classifiers(cfg, &data)?;
    let epochs = cfg.classifier.epochs;
    trained
        .target
        .to_checkpoint(cfg.classifier.seed, epochs)
        .save(layout.target_classifier())?;
    trained
        .evaluation
        .to_checkpoint(cfg.evaluation_classifier.seed, cfg.evaluation_classifier.epochs)
        .save(layout.evaluation_classifier())?;
    let summary = ClassifierSummary {
        config_hash: cfg.hash()?,
        target: trained.target_report,
        evaluation: trained.evaluation_report,
    };
    write(&dir.join("report.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

pub fn cmd_attack(
    cfg: &RunConfig,
    method: Method,
    layout: &Layout,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<AttackReport> {
    let target = Classifier::from_checkpoint(&load_checkpoint(&layout.target_classifier(), "target classifier")?)?;
    let dir = layout.attack(method);
    let mut resolved = cfg.clone();
    resolved.attack.method = method;
    layout.prepare(&dir, &resolved)?;
    let data = prepare_data(cfg)?;
    let out = run_attack(cfg, method, &target, &data.aux, Some(&dir), progress)?;
    out.samples.to_checkpoint(cfg.attack.seed).save(layout.samples(method))?;
    let ext = if out.samples.images[0].shape()[1] == 1 { "pgm" } else { "ppm" };
    write(&dir.join(format!("grid.{ext}")), out.samples.grid(cfg.output.grid_columns)?)?;
    write(&dir.join("run.json"), serde_json::to_vec_pretty(&out.report)?)?;
    Ok(out.report)
}

/// Evaluates the stored samples of each method in `methods`, or of every
/// method with samples on disk when it is empty.
pub fn cmd_evaluate(cfg: &RunConfig, methods: &[Method], layout: &Layout) -> Result<Vec<EvaluationReport>> {
    let methods: Vec<Method> = if methods.is_empty() {
        [Method::Bmi, Method::Gmi, Method::Patchmi]
            .into_iter()
            .filter(|&m| layout.samples(m).is_file())
            .collect()
    } else {
        methods.to_vec()
    };
    if methods.is_empty() {
        return Err(Error::io(
            layout.root.join("attacks"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no attack samples found; run `attack` first"),
        ));
    }
    let evaluation = Classifier::from_checkpoint(&load_checkpoint(&layout.evaluation_classifier(), "evaluation classifier")?)?;
    let dir = layout.evaluation();
    layout.prepare(&dir, cfg)?;
    let data = prepare_data(cfg)?;
    let hash = cfg.hash()?;
    let mut reports = Vec::with_capacity(methods.len());
    for m in methods {
        let samples = Samples::from_checkpoint(&load_checkpoint(&layout.samples(m), "attack samples")?)?;
        let report = evaluate_samples(&samples, &evaluation, &data.train, &cfg.metrics, &hash)?;
        write(&dir.join(format!("{}.json", m.name())), serde_json::to_vec_pretty(&report)?)?;
        write(&dir.join(format!("{}.txt", m.name())), report.table())?;
        reports.push(report);
    }
    Ok(reports)
}

/// Runs the divergence-bound harness and writes its JSON report.
pub fn cmd_verify_theory(cfg: &RunConfig, layout: &Layout) -> Result<TheoryReport> {
    let dir = layout.theory();
    layout.prepare(&dir, cfg)?;
    let report = theory::run_all(&cfg.theory)?;
    write(&dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}
