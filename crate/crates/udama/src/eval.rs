//! Regression metrics and distribution-shift diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bin count for Hellinger histograms.
pub const DEFAULT_HELLINGER_BINS: usize = 20;

/// Mean and standard deviation of one metric across folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
}

impl MetricStat {
    /// Aggregates fold values into mean ± population std.
    pub fn from_folds(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MetricStat { mean, std: var.sqrt() }
    }
}

/// Cross-validated evaluation of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub n_folds: usize,
    pub r2: MetricStat,
    pub corr: MetricStat,
    pub mse: MetricStat,
    pub mae: MetricStat,
    pub hellinger: MetricStat,
}

/// (R², Pearson correlation, MSE, MAE) of predictions against truth.
///
/// R² = 1 - Σ(t-p)²/Σ(t-mean(t))², which can be negative for predictors
/// worse than the truth's own mean.
pub fn compute_metrics(pred: &[f64], truth: &[f64]) -> Result<(f64, f64, f64, f64)> {
    let n = pred.len();
    if n < 2 || truth.len() != n {
        return Err(Error::contract(format!(
            "compute_metrics needs two equal-length vectors of n >= 2, got {} and {}",
            n,
            truth.len()
        )));
    }
    let mean_t = truth.iter().sum::<f64>() / n as f64;
    let mean_p = pred.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean_t) * (t - mean_t)).sum();
    if ss_tot == 0.0 {
        return Err(Error::contract("correlation and R² are undefined for constant truth"));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p) * (t - p)).sum();
    let r2 = 1.0 - ss_res / ss_tot;

    let mut cov = 0.0;
    let mut var_p = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        cov += (p - mean_p) * (t - mean_t);
        var_p += (p - mean_p) * (p - mean_p);
    }
    let corr = if var_p == 0.0 { 0.0 } else { cov / (var_p.sqrt() * ss_tot.sqrt()) };

    let mse = ss_res / n as f64;
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n as f64;
    Ok((r2, corr, mse, mae))
}

/// Normalized histogram over `bins` equal-width bins spanning `range`;
/// out-of-range samples are clipped into the edge bins.
pub fn label_histogram(samples: &[f64], bins: usize, range: (f64, f64)) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::contract("label_histogram on empty samples"));
    }
    if bins < 2 {
        return Err(Error::contract(format!("label_histogram needs bins >= 2, got {bins}")));
    }
    let (lo, hi) = range;
    if !(lo < hi) {
        return Err(Error::contract(format!("label_histogram needs lo < hi, got ({lo}, {hi})")));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in samples {
        let ix = (((s - lo) / width).floor() as i64).clamp(0, bins as i64 - 1) as usize;
        counts[ix] += 1;
    }
    let total = samples.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

/// Hellinger distance between two pre-binned probability vectors:
/// (1/√2)·‖√p - √q‖₂, in [0, 1].
pub fn hellinger_from_histograms(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.is_empty() || p.len() != q.len() {
        return Err(Error::contract(format!(
            "hellinger needs equal non-empty histograms, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    let sum_sq: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum();
    Ok((0.5 * sum_sq).sqrt())
}

/// Shared binning range over the union of two sample sets. A degenerate
/// range (all samples equal) is widened by ±0.5.
pub fn union_range(p_samples: &[f64], q_samples: &[f64]) -> Result<(f64, f64)> {
    if p_samples.is_empty() || q_samples.is_empty() {
        return Err(Error::contract("union_range on empty samples"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in p_samples.iter().chain(q_samples) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    Ok((lo, hi))
}

/// Hellinger distance between two sample sets, binned over the shared
/// range of their union.
pub fn hellinger_distance(p_samples: &[f64], q_samples: &[f64], bins: usize) -> Result<f64> {
    let range = union_range(p_samples, q_samples)?;
    let p = label_histogram(p_samples, bins, range)?;
    let q = label_histogram(q_samples, bins, range)?;
    hellinger_from_histograms(&p, &q)
}
