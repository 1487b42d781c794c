//! Attack accuracy, confidence, Frechet distance and k-NN manifold
//! metrics over evaluation-classifier features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::Classifier;

pub const FID_RIDGE: f64 = 1e-6;
pub const DEFAULT_K: usize = 5;

fn rows(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] => Ok((n, d)),
        ref s => Err(Error::Shape(format!("{what}: expected [n, d], got {s:?}"))),
    }
}

/// True iff fewer than `k` classes beat class `y` on row `row`; ties go to
/// the lower class index.
fn in_top_k(row: &[f64], y: usize, k: usize) -> bool {
    let py = row[y];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(c, &p)| p > py || (p == py && c < y))
        .count();
    ahead < k
}

/// Fraction of rows of `scores` (`[N, C]`, posteriors or log-posteriors)
/// whose entry for `labels[i]` is among the `k` largest.
pub fn topk_accuracy(scores: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (n, c) = rows(scores, "topk_accuracy")?;
    if k == 0 || k > c {
        return Err(Error::InvalidArgument(format!("k = {k} with {c} classes")));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (row, &y) in scores.data().chunks(c).zip(labels) {
        if y >= c {
            return Err(Error::InvalidArgument(format!("label {y} with {c} classes")));
        }
        hits += in_top_k(row, y, k) as usize;
    }
    Ok(hits as f64 / n as f64)
}

/// Mean of `p(labels[i] | x_i)` from `[N, C]` log-posteriors.
pub fn mean_confidence(log_probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = rows(log_probs, "mean_confidence")?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let s: f64 = log_probs
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| row[y].exp())
        .sum();
    Ok(s / n as f64)
}

fn mean_cov(x: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mu = m.row_mean().transpose();
    let mut centered = m;
    for mut r in centered.row_iter_mut() {
        r -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two `[n, d]` feature sets.
pub fn fid(real: &Tensor, gen: &Tensor) -> Result<f64> {
    let (nr, d) = rows(real, "fid real")?;
    let (ng, dg) = rows(gen, "fid generated")?;
    if d != dg {
        return Err(Error::Shape(format!("feature widths {d} vs {dg}")));
    }
    if nr <= d || ng <= d {
        return Err(Error::InvalidArgument(format!(
            "fid needs more than {d} samples per set, got {nr} and {ng}"
        )));
    }
    let (mu_r, mut cov_r) = mean_cov(real);
    let (mu_g, mut cov_g) = mean_cov(gen);
    for i in 0..d {
        cov_r[(i, i)] += FID_RIDGE;
        cov_g[(i, i)] += FID_RIDGE;
    }
    Ok(frechet(&mu_r, &cov_r, &mu_g, &cov_g))
}

/// Frechet distance from moments, clamped at 0.
pub fn frechet(mu_r: &DVector<f64>, cov_r: &DMatrix<f64>, mu_g: &DVector<f64>, cov_g: &DMatrix<f64>) -> f64 {
    let s = psd_sqrt(cov_r);
    let inner = &s * cov_g * &s;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = mu_r - mu_g;
    (diff.dot(&diff) + cov_r.trace() + cov_g.trace() - 2.0 * tr_sqrt).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifold {
    pub precision: f64,
    pub coverage: f64,
    pub density: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// k-NN precision, coverage and density. Each real point owns the ball
/// reaching its k-th nearest other real point; the boundary is inside.
pub fn knn_manifold(real: &Tensor, gen: &Tensor, k: usize) -> Result<Manifold> {
    let (nr, d) = rows(real, "knn real")?;
    let (ng, dg) = rows(gen, "knn generated")?;
    if d != dg {
        return Err(Error::Shape(format!("feature widths {d} vs {dg}")));
    }
    if k == 0 || k >= nr {
        return Err(Error::InvalidArgument(format!("k = {k} needs more than k real points, got {nr}")));
    }
    if ng == 0 {
        return Err(Error::InvalidArgument("no generated points".into()));
    }
    let radii: Vec<f64> = (0..nr)
        .map(|i| {
            let mut ds: Vec<f64> = (0..nr)
                .filter(|&j| j != i)
                .map(|j| dist(real.sample(i), real.sample(j)))
                .collect();
            let (_, kth, _) = ds.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect();
    let mut covered = vec![false; nr];
    let mut inside_any = 0usize;
    let mut hits = 0usize;
    for j in 0..ng {
        let gj = gen.sample(j);
        let mut any = false;
        for (i, &r) in radii.iter().enumerate() {
            if dist(gj, real.sample(i)) <= r {
                hits += 1;
                any = true;
                covered[i] = true;
            }
        }
        inside_any += any as usize;
    }
    Ok(Manifold {
        precision: inside_any as f64 / ng as f64,
        coverage: covered.iter().filter(|&&c| c).count() as f64 / nr as f64,
        density: hits as f64 / (k * ng) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Class id, or `None` for the aggregate row.
    pub class: Option<usize>,
    pub acc_at_1: f64,
    pub acc_at_5: f64,
    pub mean_confidence: f64,
    pub fid: f64,
    pub precision: f64,
    pub coverage: f64,
    pub density: f64,
    pub k: usize,
    pub n_real: usize,
    pub n_gen: usize,
}

/// Per-class rows plus an aggregate row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub config_hash: String,
    pub classes: Vec<MetricsReport>,
    pub aggregate: MetricsReport,
}

/// Scores generated images of class `y` against real images of that class.
/// Returns the report and the generated/real features.
pub fn evaluate_class(
    eval: &Classifier,
    images: &Tensor,
    y: usize,
    real: &Tensor,
    k: usize,
) -> Result<(MetricsReport, Tensor, Tensor)> {
    let (lp, gen_f) = eval.predict(images)?;
    let (_, real_f) = eval.predict(real)?;
    let labels = vec![y; images.batch_len()];
    let top5 = 5.min(eval.config().classes);
    let m = knn_manifold(&real_f, &gen_f, k)?;
    let report = MetricsReport {
        class: Some(y),
        acc_at_1: topk_accuracy(&lp, &labels, 1)?,
        acc_at_5: topk_accuracy(&lp, &labels, top5)?,
        mean_confidence: mean_confidence(&lp, &labels)?,
        fid: fid(&real_f, &gen_f)?,
        precision: m.precision,
        coverage: m.coverage,
        density: m.density,
        k,
        n_real: real.batch_len(),
        n_gen: images.batch_len(),
    };
    Ok((report, gen_f, real_f))
}

/// Aggregate row: accuracy and confidence are sample-weighted means,
/// manifold metrics the mean over classes, and FID is computed on the
/// pooled features of all classes.
pub fn aggregate(per_class: &[MetricsReport], gen_feats: &[Tensor], real_feats: &[Tensor]) -> Result<MetricsReport> {
    if per_class.is_empty() {
        return Err(Error::InvalidArgument("no classes to aggregate".into()));
    }
    let n_gen: usize = per_class.iter().map(|r| r.n_gen).sum();
    let weighted = |f: fn(&MetricsReport) -> f64| {
        per_class.iter().map(|r| f(r) * r.n_gen as f64).sum::<f64>() / n_gen.max(1) as f64
    };
    let mean = |f: fn(&MetricsReport) -> f64| per_class.iter().map(f).sum::<f64>() / per_class.len() as f64;
    let pooled = fid(&Tensor::concat(real_feats)?, &Tensor::concat(gen_feats)?)?;
    Ok(MetricsReport {
        class: None,
        acc_at_1: weighted(|r| r.acc_at_1),
        acc_at_5: weighted(|r| r.acc_at_5),
        mean_confidence: weighted(|r| r.mean_confidence),
        fid: pooled,
        precision: mean(|r| r.precision),
        coverage: mean(|r| r.coverage),
        density: mean(|r| r.density),
        k: per_class[0].k,
        n_real: per_class.iter().map(|r| r.n_real).sum(),
        n_gen,
    })
}

impl EvaluationReport {
    /// Plain-text table: Acc@1, Acc@5, Confidence, Precision, Coverage,
    /// Density, FID.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>8} {:>8} {:>10} {:>9} {:>9} {:>8} {:>10}\n",
            "class", "Acc@1", "Acc@5", "Confidence", "Precision", "Coverage", "Density", "FID"
        );
        for r in self.classes.iter().chain(std::iter::once(&self.aggregate)) {
            let label = r.class.map_or_else(|| "all".to_string(), |c| c.to_string());
            s.push_str(&format!(
                "{:<10} {:>8.4} {:>8.4} {:>10.4} {:>9.4} {:>9.4} {:>8.4} {:>10.4}\n",
                label, r.acc_at_1, r.acc_at_5, r.mean_confidence, r.precision, r.coverage, r.density, r.fid
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(n: usize, d: usize, v: Vec<f64>) -> Tensor {
        Tensor::new(vec![n, d], v).unwrap()
    }

    #[test]
    fn topk_hand_built() {
        let p = t2(3, 3, vec![0.7, 0.2, 0.1, 0.3, 0.3, 0.4, 0.1, 0.5, 0.4]);
        assert_eq!(topk_accuracy(&p, &[0, 0, 2], 1).unwrap(), 1.0 / 3.0);
        assert_eq!(topk_accuracy(&p, &[0, 0, 2], 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&p, &[1, 1, 0], 3).unwrap(), 1.0);
        assert!(topk_accuracy(&p, &[0, 0, 0], 4).is_err());
    }

    #[test]
    fn topk_tie_break_is_index_order() {
        let u = t2(1, 10, vec![0.1; 10]);
        assert_eq!(topk_accuracy(&u, &[0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&u, &[1], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&u, &[4], 5).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&u, &[5], 5).unwrap(), 0.0);
    }

    #[test]
    fn confidence_values() {
        let u = t2(2, 4, vec![(0.25f64).ln(); 8]);
        assert!((mean_confidence(&u, &[0, 3]).unwrap() - 0.25).abs() < 1e-15);
        let lp = t2(2, 2, vec![0.0, f64::NEG_INFINITY, (0.5f64).ln(), (0.5f64).ln()]);
        assert!((mean_confidence(&lp, &[0, 1]).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn fid_closed_form_one_dimension() {
        let mu_r = DVector::from_vec(vec![0.0]);
        let mu_g = DVector::from_vec(vec![1.0]);
        let c = DMatrix::from_vec(1, 1, vec![1.0]);
        assert!((frechet(&mu_r, &c, &mu_g, &c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fid_needs_enough_samples() {
        let x = t2(3, 3, vec![0.0; 9]);
        assert!(fid(&x, &x).is_err());
    }

    #[test]
    fn knn_self_and_far() {
        let real = t2(6, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5, 2.0, 2.0]);
        let m = knn_manifold(&real, &real, 2).unwrap();
        assert_eq!((m.precision, m.coverage), (1.0, 1.0));
        let far = t2(2, 2, vec![100.0, 100.0, -100.0, 50.0]);
        let m = knn_manifold(&real, &far, 2).unwrap();
        assert_eq!((m.precision, m.coverage, m.density), (0.0, 0.0, 0.0));
        assert!(knn_manifold(&real, &far, 6).is_err());
    }

    fn grid_points(seed: u64, n: usize, d: usize) -> Tensor {
        let mut s = seed.wrapping_add(17);
        Tensor::from_fn(&[n, d], |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) % 64) as f64 / 8.0
        })
    }

    proptest! {
        #[test]
        fn fid_is_symmetric_and_nonnegative(seed in 0u64..10_000) {
            let a = grid_points(seed, 12, 3);
            let b = grid_points(seed + 1, 15, 3);
            let ab = fid(&a, &b).unwrap();
            let ba = fid(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-6);
        }

        #[test]
        fn manifold_metrics_survive_isometry(seed in 0u64..10_000, shift in -4i32..4) {
            let real = grid_points(seed, 10, 2);
            let gen = grid_points(seed + 5, 8, 2);
            // coordinate swap with a sign flip and an exact translation
            let map = |t: &Tensor| {
                let mut out = t.clone();
                for r in out.data_mut().chunks_mut(2) {
                    let (x, y) = (r[0], r[1]);
                    r[0] = -y + shift as f64;
                    r[1] = x + 0.5;
                }
                out
            };
            let a = knn_manifold(&real, &gen, 3).unwrap();
            let b = knn_manifold(&map(&real), &map(&gen), 3).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn accuracy_at_one_le_at_five(seed in 0u64..10_000) {
            let p = grid_points(seed, 6, 10);
            let labels: Vec<usize> = (0..6).map(|i| (i * 7 + seed as usize) % 10).collect();
            prop_assert!(topk_accuracy(&p, &labels, 1).unwrap() <= topk_accuracy(&p, &labels, 5).unwrap());
        }
    }
}
