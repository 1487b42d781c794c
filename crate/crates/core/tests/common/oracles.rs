//! Independent reference implementations of the evaluation metrics.

use nalgebra::DMatrix;
use patchmi::autodiff::Tensor;
use patchmi::metrics::{self, FID_RIDGE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn moments(x: &Tensor) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mu = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mu.iter_mut().zip(x.sample(i)) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let r = x.sample(i);
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (r[a] - mu[a]) * (r[b] - mu[b]) / (n as f64 - 1.0);
            }
        }
    }
    for a in 0..d {
        cov[(a, a)] += FID_RIDGE;
    }
    (mu, cov)
}

/// `|mu_r - mu_g|^2 + tr(S_r) + tr(S_g) - 2 sum_i sqrt(lambda_i(S_r S_g))`,
/// with the eigenvalues of the non-symmetric product taken from its Schur
/// form.
pub fn fid_oracle(real: &Tensor, gen: &Tensor) -> f64 {
    let (mr, cr) = moments(real);
    let (mg, cg) = moments(gen);
    let prod = &cr * &cg;
    let tr_sqrt: f64 = prod.complex_eigenvalues().iter().map(|z| z.sqrt().re).sum();
    let dm: f64 = mr.iter().zip(&mg).map(|(a, b)| (a - b) * (a - b)).sum();
    dm + cr.trace() + cg.trace() - 2.0 * tr_sqrt
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Brute-force precision, coverage and density with squared distances.
pub fn knn_oracle(real: &Tensor, gen: &Tensor, k: usize) -> (f64, f64, f64) {
    let (nr, ng) = (real.shape()[0], gen.shape()[0]);
    let radii2: Vec<f64> = (0..nr)
        .map(|i| {
            let mut d: Vec<f64> = (0..nr).filter(|&j| j != i).map(|j| sq(real.sample(i), real.sample(j))).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect();
    let inside = |j: usize, i: usize| sq(gen.sample(j), real.sample(i)) <= radii2[i];
    let precise = (0..ng).filter(|&j| (0..nr).any(|i| inside(j, i))).count();
    let covered = (0..nr).filter(|&i| (0..ng).any(|j| inside(j, i))).count();
    let hits: usize = (0..ng).map(|j| (0..nr).filter(|&i| inside(j, i)).count()).sum();
    (
        precise as f64 / ng as f64,
        covered as f64 / nr as f64,
        hits as f64 / (k * ng) as f64,
    )
}

fn gaussian_set(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64, scale: f64) -> Tensor {
    let mix: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for a in 0..d {
            data.push(shift + (0..d).map(|b| mix[a * d + b] * z[b]).sum::<f64>());
        }
    }
    Tensor::new(vec![n, d], data).unwrap()
}

pub struct FidSuite {
    pub trials: usize,
    pub max_abs_err: f64,
    pub max_self: f64,
}

/// Random 5-D sets: implementation against oracle, and FID(X, X).
pub fn fid_suite(trials: usize) -> FidSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1D);
    let (mut max_abs_err, mut max_self) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let (nr, ng) = (rng.gen_range(8..80), rng.gen_range(8..80));
        let (sr, shift, sg) = (rng.gen_range(0.2..2.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.2..2.0));
        let real = gaussian_set(&mut rng, nr, 5, 0.0, sr);
        let gen = gaussian_set(&mut rng, ng, 5, shift, sg);
        let ours = metrics::fid(&real, &gen).unwrap();
        max_abs_err = max_abs_err.max((ours - fid_oracle(&real, &gen)).abs());
        max_self = max_self.max(metrics::fid(&real, &real).unwrap().abs());
    }
    FidSuite {
        trials,
        max_abs_err,
        max_self,
    }
}

pub struct KnnSuite {
    pub trials: usize,
    pub mismatches: usize,
}

/// Random instances with n <= 20; every other trial sits on an integer
/// grid so that ball-boundary ties occur.
pub fn knn_suite(trials: usize) -> KnnSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4B4E4E);
    let mut mismatches = 0;
    for t in 0..trials {
        let d = rng.gen_range(1..4);
        let nr = rng.gen_range(3..=20);
        let ng = rng.gen_range(1..=20);
        let k = rng.gen_range(1..nr.min(6));
        let grid = t % 2 == 1;
        let mut draw = |n: usize| {
            let v: Vec<f64> = (0..n * d)
                .map(|_| {
                    if grid {
                        rng.gen_range(-2i32..=2) as f64
                    } else {
                        rng.sample(StandardNormal)
                    }
                })
                .collect();
            Tensor::new(vec![n, d], v).unwrap()
        };
        let real = draw(nr);
        let gen = draw(ng);
        let m = metrics::knn_manifold(&real, &gen, k).unwrap();
        if (m.precision, m.coverage, m.density) != knn_oracle(&real, &gen, k) {
            mismatches += 1;
        }
    }
    KnnSuite { trials, mismatches }
}
