//! Coordination and representation metrics.

use serde::{Deserialize, Serialize};

use crate::environment::Vec2;
use crate::error::{Error, Result};

/// Best circular-lag agreement between two planar paths: for each lag the
/// Pearson correlation of every axis is taken against the lagged ideal path
/// and averaged over axes; the maximum over lags is returned.
pub fn max_cross_correlation(generated: &[Vec2], ideal: &[Vec2]) -> Result<f64> {
    Ok(best_lag(generated, ideal)?.1)
}

/// `(lag, score)` of [`max_cross_correlation`]; the lag pairs
/// `generated[i]` with `ideal[(i + lag) % T]`.
pub fn best_lag(generated: &[Vec2], ideal: &[Vec2]) -> Result<(usize, f64)> {
    let n = generated.len();
    if n != ideal.len() || n < 2 {
        return Err(Error::Contract(format!(
            "cross-correlation needs equal lengths of at least 2 (got {} and {})",
            n,
            ideal.len()
        )));
    }
    let centered = |path: &[Vec2], axis: usize| -> Result<(Vec<f64>, f64)> {
        let mean = path.iter().map(|p| p[axis]).sum::<f64>() / n as f64;
        let c: Vec<f64> = path.iter().map(|p| p[axis] - mean).collect();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::MetricUndefined(format!("axis {axis} has zero variance")));
        }
        Ok((c, norm))
    };
    let axes = [0, 1]
        .iter()
        .map(|&k| Ok((centered(generated, k)?, centered(ideal, k)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut best = (0, f64::NEG_INFINITY);
    for lag in 0..n {
        let mut score = 0.0;
        for ((g, gn), (r, rn)) in &axes {
            let dot: f64 = (0..n).map(|i| g[i] * r[(i + lag) % n]).sum();
            score += dot / (gn * rn) / 2.0;
        }
        if score > best.1 {
            best = (lag, score);
        }
    }
    Ok(best)
}

/// Ranks starting at 1 with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract("pearson needs two equal-length samples of size >= 2".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::MetricUndefined("constant sample".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Upper triangle (row-major, diagonal excluded) of the Euclidean distance
/// matrix of `points`.
pub fn pairwise_distances<P: AsRef<[f64]>>(points: &[P]) -> Vec<f64> {
    let n = points.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (points[i].as_ref(), points[j].as_ref());
            out.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsaResult {
    pub spearman_rho: f64,
    pub n_pairs: usize,
}

/// Rank agreement between the dissimilarity structures of a message
/// sequence and the positions it was inferred along.
pub fn rsa_score<M: AsRef<[f64]>, P: AsRef<[f64]>>(messages: &[M], positions: &[P]) -> Result<RsaResult> {
    let n = messages.len();
    if n != positions.len() || n < 3 {
        return Err(Error::Contract(format!(
            "RSA needs equal lengths of at least 3 (got {} and {})",
            n,
            positions.len()
        )));
    }
    let dm = pairwise_distances(messages);
    let dp = pairwise_distances(positions);
    let rho = spearman(&dm, &dp).map_err(|e| match e {
        Error::MetricUndefined(_) => Error::MetricUndefined("all pairwise distances are equal".into()),
        other => other,
    })?;
    Ok(RsaResult {
        spearman_rho: rho,
        n_pairs: dm.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and population standard deviation; NaN for an empty sample.
pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len();
    if n == 0 {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    MeanStd {
        mean,
        std: var.sqrt(),
        n,
    }
}
