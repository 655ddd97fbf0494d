use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::{index, SliceRandom};

use crate::error::{Error, Result};
use crate::rng;

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn check_rows(op: &'static str, rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape(op, "feature rows must be non-empty and of equal width"));
    }
    Ok(d)
}

fn gaussian_fit(rows: &[Vec<f64>], d: usize, regularizer: f64) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len() as f64;
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    for i in 0..d {
        cov[(i, i)] += regularizer;
    }
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// `regularizer` is added to both covariance diagonals. Without it each set
/// needs more samples than dimensions.
pub fn fid(real: &[Vec<f64>], generated: &[Vec<f64>], regularizer: f64) -> Result<f64> {
    let d = check_rows("fid", real)?;
    if check_rows("fid", generated)? != d {
        return Err(Error::shape("fid", "feature widths differ"));
    }
    let min_n = real.len().min(generated.len());
    if min_n < 2 || (regularizer <= 0.0 && min_n < d + 1) {
        return Err(Error::invalid(format!(
            "fid needs at least {} samples per set without a regularizer, got {min_n}",
            d + 1
        )));
    }
    let (m1, s1) = gaussian_fit(real, d, regularizer);
    let (m2, s2) = gaussian_fit(generated, d, regularizer);
    let r1 = psd_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let value = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::NonFinite("fid"));
    }
    Ok(value.max(0.0))
}

/// Mean L2 distance over `n_pairs` distinct unordered pairs.
///
/// Uses every pair, in lexicographic order, when `n_pairs` equals the number of
/// pairs; otherwise a seeded sample of distinct pairs.
pub fn diversity(feats: &[Vec<f64>], n_pairs: usize, seed: u64) -> Result<f64> {
    check_rows("diversity", feats)?;
    let n = feats.len();
    let total = n * (n - 1) / 2;
    if n_pairs == 0 || n_pairs > total {
        return Err(Error::invalid(format!(
            "diversity asked for {n_pairs} pairs of {n} samples ({total} available)"
        )));
    }
    let pair = |k: usize| -> (usize, usize) {
        // Row-major decode of the k-th pair (i < j).
        let mut i = 0;
        let mut k = k;
        while k >= n - 1 - i {
            k -= n - 1 - i;
            i += 1;
        }
        (i, i + 1 + k)
    };
    let picks: Vec<usize> = if n_pairs == total {
        (0..total).collect()
    } else {
        let mut v = index::sample(&mut rng::stream(seed, "eval.diversity"), total, n_pairs).into_vec();
        v.sort_unstable();
        v
    };
    let sum: f64 = picks
        .into_iter()
        .map(|k| {
            let (i, j) = pair(k);
            euclid(&feats[i], &feats[j])
        })
        .sum();
    Ok(sum / n_pairs as f64)
}

/// Mean distance between disjoint random pairs of samples of one prompt,
/// averaged over prompts.
pub fn mmodality(per_prompt: &[Vec<Vec<f64>>], seed: u64) -> Result<f64> {
    if per_prompt.is_empty() {
        return Err(Error::invalid("mmodality needs at least one prompt"));
    }
    let mut total = 0.0;
    for (p, group) in per_prompt.iter().enumerate() {
        check_rows("mmodality", group)?;
        if group.len() < 2 {
            return Err(Error::invalid(format!(
                "prompt {p} has {} samples, need 2",
                group.len()
            )));
        }
        let mut order: Vec<usize> = (0..group.len()).collect();
        order.shuffle(&mut rng::indexed_stream(seed, "eval.mmodality", p as u64));
        let pairs: Vec<f64> = order
            .chunks_exact(2)
            .map(|c| euclid(&group[c[0]], &group[c[1]]))
            .collect();
        total += pairs.iter().sum::<f64>() / pairs.len() as f64;
    }
    Ok(total / per_prompt.len() as f64)
}

/// Motion-to-text retrieval hit rates at ranks 1, 2, 3.
///
/// Each motion's true text competes with `pool − 1` seeded distractors; ties
/// rank the true text first.
pub fn r_precision(text_feats: &[Vec<f64>], motion_feats: &[Vec<f64>], pool: usize, seed: u64) -> Result<[f64; 3]> {
    let d = check_rows("r_precision", text_feats)?;
    if check_rows("r_precision", motion_feats)? != d || text_feats.len() != motion_feats.len() {
        return Err(Error::shape("r_precision", "text and motion features must pair up"));
    }
    let n = text_feats.len();
    if pool < 2 || pool > n {
        return Err(Error::invalid(format!("retrieval pool {pool} needs 2..={n}")));
    }
    let mut hits = [0usize; 3];
    for (i, m) in motion_feats.iter().enumerate() {
        let mut r = rng::indexed_stream(seed, "eval.rprecision", i as u64);
        let truth = euclid(m, &text_feats[i]);
        let beaten = index::sample(&mut r, n - 1, pool - 1)
            .into_iter()
            .map(|k| if k >= i { k + 1 } else { k })
            .filter(|&k| euclid(m, &text_feats[k]) < truth)
            .count();
        for (k, h) in hits.iter_mut().enumerate() {
            if beaten <= k {
                *h += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / n as f64))
}
