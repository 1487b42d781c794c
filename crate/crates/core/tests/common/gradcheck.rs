//! Central finite-difference checks of every differentiable op and of the
//! composite losses on random small instances.

use patchmi::augment::TransformSpec;
use patchmi::autodiff::{AffineMap, BnState, Graph, RunningStats, Tensor, Var};
use patchmi::losses::{self, GeneratorTerms};
use patchmi::nn::{
    Classifier, ClassifierConfig, Generator, GeneratorConfig, Mode, PatchDiscriminator, PatchDiscriminatorConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;

type R = ChaCha8Rng;
type Loss = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

fn normal(rng: &mut R, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn uniform(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Norm-wise relative error between central differences and the tape.
pub fn relative_error(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.clone().with_requires_grad(true)))
        .collect();
    let l = f(&mut g, &vars);
    g.backward(l).expect("scalar loss");
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut work = inputs.to_vec();
        for j in 0..t.numel() {
            let x0 = work[k].data()[j];
            work[k].data_mut()[j] = x0 + STEP;
            let up = eval(&work);
            work[k].data_mut()[j] = x0 - STEP;
            let down = eval(&work);
            work[k].data_mut()[j] = x0;
            let fd = (up - down) / (2.0 * STEP);
            num += (fd - analytic[j]).powi(2);
            den += fd.powi(2).max(analytic[j].powi(2));
        }
    }
    num.sqrt() / den.sqrt().max(1e-12)
}

/// Scalar loss: dot product of `y` with a fixed random tensor.
fn projector(r: Tensor) -> impl Fn(&mut Graph, Var) -> Var {
    move |g, y| {
        let c = g.constant(r.clone());
        let p = g.mul(y, c).expect("projection shape");
        g.sum(p)
    }
}

fn unary_case(kind: &'static str) -> impl Fn(&mut R) -> (Vec<Tensor>, Loss) {
    move |rng| {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..6)];
        let x = match kind {
            "log_floor" => uniform(rng, &shape, 0.1, 2.0),
            _ => normal(rng, &shape),
        };
        let proj = projector(normal(rng, &shape));
        let c: f64 = rng.sample(StandardNormal);
        let f: Loss = Box::new(move |g, v| {
            let y = match kind {
                "relu" => g.relu(v[0]),
                "leaky_relu" => g.leaky_relu(v[0], 0.2),
                "sigmoid" => g.sigmoid(v[0]),
                "tanh" => g.tanh(v[0]),
                "softplus" => g.softplus(v[0]),
                "exp" => g.exp(v[0]),
                "log_floor" => g.log_floor(v[0], 1e-12),
                "square" => g.square(v[0]),
                "scale" => g.scale(v[0], c),
                "add_scalar" => g.add_scalar(v[0], c),
                _ => unreachable!(),
            };
            proj(g, y)
        });
        (vec![x], f)
    }
}

fn binary_case(kind: &'static str) -> impl Fn(&mut R) -> (Vec<Tensor>, Loss) {
    move |rng| {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..6)];
        let a = normal(rng, &shape);
        let b = normal(rng, &shape);
        let proj = projector(normal(rng, &shape));
        let f: Loss = Box::new(move |g, v| {
            let y = match kind {
                "add" => g.add(v[0], v[1]),
                "sub" => g.sub(v[0], v[1]),
                _ => g.mul(v[0], v[1]),
            }
            .expect("same shape");
            proj(g, y)
        });
        (vec![a, b], f)
    }
}

fn conv_case(rng: &mut R) -> (Vec<Tensor>, Loss) {
    let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
    let h = rng.gen_range(3..8);
    let k = rng.gen_range(1..4.min(h) + 1);
    let (s, p) = (rng.gen_range(1..3), rng.gen_range(0..2));
    let out = (h + 2 * p - k) / s + 1;
    let x = normal(rng, &[n, c, h, h]);
    let w = normal(rng, &[o, c, k, k]);
    let b = normal(rng, &[o]);
    let proj = projector(normal(rng, &[n, o, out, out]));
    let f: Loss = Box::new(move |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), s, p).expect("geometry");
        proj(g, y)
    });
    (vec![x, w, b], f)
}

fn conv_transpose_case(rng: &mut R) -> (Vec<Tensor>, Loss) {
    let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
    let h = rng.gen_range(2..5);
    let k = rng.gen_range(2..5);
    let s = rng.gen_range(1..3);
    let p = rng.gen_range(0..2).min((k - 1) / 2);
    let out = (h - 1) * s + k - 2 * p;
    let x = normal(rng, &[n, c, h, h]);
    let w = normal(rng, &[c, o, k, k]);
    let b = normal(rng, &[o]);
    let proj = projector(normal(rng, &[n, o, out, out]));
    let f: Loss = Box::new(move |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), s, p).expect("geometry");
        proj(g, y)
    });
    (vec![x, w, b], f)
}

fn batch_norm_case(train: bool) -> impl Fn(&mut R) -> (Vec<Tensor>, Loss) {
    move |rng| {
        let (n, c, h) = (rng.gen_range(2..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let shape = [n, c, h, h];
        let x = normal(rng, &shape);
        let gamma = normal(rng, &[c]);
        let beta = normal(rng, &[c]);
        let stats = RunningStats {
            mean: normal(rng, &[c]).into_data(),
            var: uniform(rng, &[c], 0.2, 2.0).into_data(),
            momentum: 0.1,
            eps: 1e-5,
        };
        let proj = projector(normal(rng, &shape));
        let f: Loss = Box::new(move |g, v| {
            let mut s = stats.clone();
            let state = if train { BnState::Train(&mut s) } else { BnState::Eval(&stats) };
            let y = g.batch_norm(v[0], v[1], v[2], state).expect("bn");
            proj(g, y)
        });
        (vec![x, gamma, beta], f)
    }
}

fn linear_case(rng: &mut R) -> (Vec<Tensor>, Loss) {
    let (n, i, o) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5));
    let x = normal(rng, &[n, i]);
    let w = normal(rng, &[o, i]);
    let b = normal(rng, &[o]);
    let proj = projector(normal(rng, &[n, o]));
    let f: Loss = Box::new(move |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2])).expect("linear");
        proj(g, y)
    });
    (vec![x, w, b], f)
}

fn log_softmax_gather_case(rng: &mut R) -> (Vec<Tensor>, Loss) {
    let (n, c) = (rng.gen_range(1..4), rng.gen_range(2..6));
    let x = normal(rng, &[n, c]);
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let proj = projector(normal(rng, &[n, c]));
    let f: Loss = Box::new(move |g, v| {
        let lp = g.log_softmax(v[0]).expect("2-D");
        let a = proj(g, lp);
        let picked = g.gather(lp, &idx).expect("indices");
        let b = g.sum(picked);
        g.add(a, b).expect("scalars")
    });
    (vec![x], f)
}

fn spatial_case(kind: &'static str) -> impl Fn(&mut R) -> (Vec<Tensor>, Loss) {
    move |rng| {
        let (n, c) = (rng.gen_range(1..3), rng.gen_range(1..3));
        let h = 2 * rng.gen_range(1..4);
        let x = normal(rng, &[n, c, h, h]);
        let pad = rng.gen_range(1..3);
        let fill: f64 = rng.sample(StandardNormal);
        let flags: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let maps: Vec<AffineMap> = (0..n)
            .map(|_| {
                let t = rng.gen_range(-0.5..0.5f64);
                let (sn, cs) = t.sin_cos();
                AffineMap([cs, -sn, rng.gen_range(-1.0..1.0), sn, cs, rng.gen_range(-1.0..1.0)])
            })
            .collect();
        let out = rng.gen_range(2..7);
        let mut probe = Graph::new();
        let xv = probe.constant(x.clone());
        let y = match kind {
            "max_pool2" => probe.max_pool2(xv).unwrap(),
            "global_avg_pool" => probe.global_avg_pool(xv).unwrap(),
            "pad" => probe.pad(xv, pad, fill).unwrap(),
            "hflip" => probe.hflip(xv, &flags).unwrap(),
            "resample" => probe.resample(xv, &maps, out, out).unwrap(),
            "reshape" => probe.reshape(xv, &[n, c * h * h]).unwrap(),
            "channel_stats" => probe.channel_var(xv).unwrap(),
            _ => probe.sum_per_sample(xv),
        };
        let proj = projector(normal(rng, probe.shape(y)));
        let f: Loss = Box::new(move |g, v| {
            let y = match kind {
                "max_pool2" => g.max_pool2(v[0]).unwrap(),
                "global_avg_pool" => g.global_avg_pool(v[0]).unwrap(),
                "pad" => g.pad(v[0], pad, fill).unwrap(),
                "hflip" => g.hflip(v[0], &flags).unwrap(),
                "resample" => g.resample(v[0], &maps, out, out).unwrap(),
                "reshape" => g.reshape(v[0], &[n, c * h * h]).unwrap(),
                "channel_stats" => {
                    let m = g.channel_mean(v[0]).unwrap();
                    let s = g.channel_var(v[0]).unwrap();
                    let m2 = g.square(m);
                    g.add(m2, s).unwrap()
                }
                _ => g.sum_per_sample(v[0]),
            };
            let l = proj(g, y);
            if kind == "reductions" {
                let m = g.mean(v[0]);
                g.add(l, m).unwrap()
            } else {
                l
            }
        });
        (vec![x], f)
    }
}

fn transform_case(rng: &mut R) -> (Vec<Tensor>, Loss) {
    let n = rng.gen_range(1..3);
    let x = uniform(rng, &[n, 1, 32, 32], -1.0, 1.0);
    let seed: u64 = rng.gen();
    let spec = TransformSpec::preset("grayscale_attack").expect("preset");
    let proj = projector(normal(rng, &[n, 1, 32, 32]));
    let f: Loss = Box::new(move |g, v| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let y = spec.apply(g, v[0], &mut r, 32).expect("transform");
        proj(g, y)
    });
    (vec![x], f)
}

fn d_loss_case(rng: &mut R) -> (Vec<Tensor>, Loss) {
    let n = rng.gen_range(1..6);
    let real = normal(rng, &[n]);
    let fake = normal(rng, &[n]);
    let label = rng.gen_range(0.5..1.0);
    let f: Loss = Box::new(move |g, v| losses::d_loss(g, v[0], v[1], label).unwrap());
    (vec![real, fake], f)
}

fn g_adv_case(rng: &mut R) -> (Vec<Tensor>, Loss) {
    let n = rng.gen_range(1..6);
    let fake = normal(rng, &[n]);
    let f: Loss = Box::new(|g, v| losses::g_adv_loss(g, v[0]).unwrap());
    (vec![fake], f)
}

fn identity_case(ensemble: bool) -> impl Fn(&mut R) -> (Vec<Tensor>, Loss) {
    move |rng| {
        let (n, c) = (rng.gen_range(1..4), rng.gen_range(2..5));
        let y = rng.gen_range(0..c);
        let lambda = rng.gen_range(0.5..40.0);
        let a = normal(rng, &[n, c]);
        let b = normal(rng, &[n, c]);
        let f: Loss = Box::new(move |g, v| {
            let la = g.log_softmax(v[0]).unwrap();
            let mut p = losses::class_posterior(g, la, y).unwrap();
            if ensemble {
                let lb = g.log_softmax(v[1]).unwrap();
                let pb = losses::class_posterior(g, lb, y).unwrap();
                p = losses::ensemble_posterior(g, p, pb).unwrap();
            }
            losses::identity_loss(g, p, lambda)
        });
        (vec![a, b], f)
    }
}

fn random_stats(rng: &mut R, c: usize) -> RunningStats {
    RunningStats {
        mean: normal(rng, &[c]).into_data(),
        var: uniform(rng, &[c], 0.2, 2.0).into_data(),
        momentum: 0.1,
        eps: 1e-5,
    }
}

fn bn_loss_case(rng: &mut R) -> (Vec<Tensor>, Loss) {
    let n = rng.gen_range(2..4);
    let (c1, c2) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let h1 = normal(rng, &[n, c1, 3, 3]);
    let h2 = normal(rng, &[n, c2, 2, 2]);
    let stats = vec![random_stats(rng, c1), random_stats(rng, c2)];
    let f: Loss = Box::new(move |g, v| losses::bn_statistics_loss(g, &stats, &v[..2]).unwrap());
    (vec![h1, h2], f)
}

fn total_loss_case(rng: &mut R) -> (Vec<Tensor>, Loss) {
    let n = rng.gen_range(2..4);
    let c = rng.gen_range(2..4);
    let fake = normal(rng, &[n]);
    let logits = normal(rng, &[n, 3]);
    let act = normal(rng, &[n, c, 2, 2]);
    let stats = vec![random_stats(rng, c)];
    let (lambda, w) = (rng.gen_range(1.0..30.0), rng.gen_range(0.0..2.0));
    let f: Loss = Box::new(move |g, v| {
        let adv = losses::g_adv_loss(g, v[0]).unwrap();
        let lp = g.log_softmax(v[1]).unwrap();
        let p = losses::class_posterior(g, lp, 1).unwrap();
        let id = losses::identity_loss(g, p, lambda);
        let bn = losses::bn_statistics_loss(g, &stats, &v[2..3]).unwrap();
        let terms = GeneratorTerms {
            adv,
            identity: Some(id),
            bn: Some(bn),
        };
        losses::total_generator_loss(g, terms, w).unwrap()
    });
    (vec![fake, logits, act], f)
}

fn classifier_case(rng: &mut R) -> (Vec<Tensor>, Loss) {
    let cfg = ClassifierConfig {
        channels: 1,
        image_size: 8,
        widths: vec![2, 3],
        hidden: rng.gen_range(0..2) * 4,
        classes: 3,
    };
    let clf = Classifier::new(cfg, rng.gen()).unwrap();
    let y = rng.gen_range(0..3);
    let x = uniform(rng, &[2, 1, 8, 8], -1.0, 1.0);
    let stats = clf.bn_stats().to_vec();
    let f: Loss = Box::new(move |g, v| {
        let out = clf.forward_eval(g, v[0], false).unwrap();
        let p = losses::class_posterior(g, out.log_probs, y).unwrap();
        let id = losses::identity_loss(g, p, 30.0);
        let bn = losses::bn_statistics_loss(g, &stats, &out.pre_bn).unwrap();
        g.add(id, bn).unwrap()
    });
    (vec![x], f)
}

fn discriminator_case(rng: &mut R) -> (Vec<Tensor>, Loss) {
    let cfg = PatchDiscriminatorConfig {
        channels: 1,
        image_size: 8,
        patch_size: 4,
        stride: rng.gen_range(1..3) * 2,
        width: 4,
    };
    let d = PatchDiscriminator::new(cfg, rng.gen()).unwrap();
    let real = uniform(rng, &[2, 1, 8, 8], -1.0, 1.0);
    let fake = uniform(rng, &[2, 1, 8, 8], -1.0, 1.0);
    let f: Loss = Box::new(move |g, v| {
        let r = d.forward(g, v[0], false).unwrap();
        let q = d.forward(g, v[1], false).unwrap();
        losses::d_loss(g, r.total, q.total, 0.6).unwrap()
    });
    (vec![real, fake], f)
}

fn generator_case(rng: &mut R) -> (Vec<Tensor>, Loss) {
    let cfg = GeneratorConfig {
        latent_dim: 3,
        base_width: 4,
        channels: 1,
        batch_norm: true,
    };
    let gen = Generator::new(cfg, rng.gen()).unwrap();
    let d = PatchDiscriminator::new(
        PatchDiscriminatorConfig {
            channels: 1,
            image_size: 32,
            patch_size: 8,
            stride: 8,
            width: 4,
        },
        rng.gen(),
    )
    .unwrap();
    let z = normal(rng, &[2, 3]);
    let train = rng.gen::<bool>();
    let f: Loss = Box::new(move |g, v| {
        let mut gen = gen.clone();
        let mode = if train { Mode::Train } else { Mode::Eval };
        let (x, _) = gen.forward(g, v[0], mode, false).unwrap();
        let out = d.forward(g, x, false).unwrap();
        losses::g_adv_loss(g, out.total).unwrap()
    });
    (vec![z], f)
}

type Builder = Box<dyn Fn(&mut R) -> (Vec<Tensor>, Loss)>;

fn cases() -> Vec<(&'static str, Builder)> {
    let mut v: Vec<(&'static str, Builder)> = vec![
        ("conv2d", Box::new(conv_case)),
        ("conv_transpose2d", Box::new(conv_transpose_case)),
        ("batch_norm_train", Box::new(batch_norm_case(true))),
        ("batch_norm_eval", Box::new(batch_norm_case(false))),
        ("linear", Box::new(linear_case)),
        ("log_softmax_gather", Box::new(log_softmax_gather_case)),
    ];
    for k in [
        "relu", "leaky_relu", "sigmoid", "tanh", "softplus", "exp", "log_floor", "square", "scale", "add_scalar",
    ] {
        v.push((k, Box::new(unary_case(k))));
    }
    for k in ["add", "sub", "mul"] {
        v.push((k, Box::new(binary_case(k))));
    }
    for k in [
        "max_pool2",
        "global_avg_pool",
        "pad",
        "hflip",
        "resample",
        "reshape",
        "channel_stats",
        "reductions",
    ] {
        v.push((k, Box::new(spatial_case(k))));
    }
    v.push(("transform_pipeline", Box::new(transform_case)));
    v.push(("d_loss", Box::new(d_loss_case)));
    v.push(("g_adv_loss", Box::new(g_adv_case)));
    v.push(("identity_loss", Box::new(identity_case(false))));
    v.push(("ensemble_identity_loss", Box::new(identity_case(true))));
    v.push(("bn_statistics_loss", Box::new(bn_loss_case)));
    v.push(("total_generator_loss", Box::new(total_loss_case)));
    v.push(("classifier_identity_bn", Box::new(classifier_case)));
    v.push(("discriminator_d_loss", Box::new(discriminator_case)));
    v.push(("generator_g_adv", Box::new(generator_case)));
    v
}

/// Worst relative error per case over `INSTANCES` seeded instances.
pub fn run_suite() -> Vec<CaseResult> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, build))| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x6AAD_0000 + i as u64);
            let worst = (0..INSTANCES)
                .map(|_| {
                    let (inputs, f) = build(&mut rng);
                    relative_error(&inputs, &*f)
                })
                .fold(0.0f64, f64::max);
            CaseResult {
                name,
                instances: INSTANCES,
                worst,
            }
        })
        .collect()
}
