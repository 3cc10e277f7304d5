//! Confidence protector: threshold calibration, the reclassification gate,
//! and rank-test diagnostics for score distributions.
//!
//! Two threshold semantics coexist deliberately. Quantile mode places the
//! threshold at the nearest-rank lower (1-prot) percentile of the scores of
//! correctly classified training samples and flags S <= threshold. Absolute
//! mode compares S < prot directly. prot=0 always reclassifies and prot=1
//! never does, in both modes.

use crate::classifier::{logits, softmax, ClassifierParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Quantile,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    Always,
    Never,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectorCalibration {
    pub correct_scores: Vec<f32>,
    pub prot: f64,
    pub mode: ThresholdMode,
    pub threshold: ThresholdRule,
}

/// S(x) for every training example the classifier gets right, in dataset
/// order.
pub fn collect_correct_scores(params: &ClassifierParams, dataset: &Dataset) -> Result<Vec<f32>> {
    if dataset.len() == 0 {
        return Err(Error::Data("dataset is empty".into()));
    }
    let mut scores = Vec::new();
    for i in 0..dataset.len() {
        let probs = softmax(&logits(params, dataset.example(i))?)?;
        let mut best = 0;
        for c in 1..probs.len() {
            if probs[c] > probs[best] {
                best = c;
            }
        }
        if best == dataset.label(i) {
            scores.push(probs[best]);
        }
    }
    if scores.is_empty() {
        return Err(Error::Calibration(
            "no correctly classified samples to calibrate from".into(),
        ));
    }
    Ok(scores)
}

/// Nearest-rank index for the lower alpha percentile: k = max(1, ceil(alpha*n)).
/// The tiny slack absorbs float error in alpha*n when the product is an exact
/// integer (for example (1-0.7)*10).
fn nearest_rank(alpha: f64, n: usize) -> usize {
    let k = (alpha * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

pub fn calibrate_threshold(
    scores: &[f32],
    prot: f64,
    mode: ThresholdMode,
) -> Result<ProtectorCalibration> {
    if !(0.0..=1.0).contains(&prot) {
        return Err(Error::Parameter(format!("prot must lie in [0, 1], got {prot}")));
    }
    let threshold = if prot == 0.0 {
        ThresholdRule::Always
    } else if prot == 1.0 {
        ThresholdRule::Never
    } else {
        match mode {
            ThresholdMode::Absolute => ThresholdRule::Value(prot),
            ThresholdMode::Quantile => {
                if scores.is_empty() {
                    return Err(Error::Calibration(
                        "quantile mode needs at least one score".into(),
                    ));
                }
                let mut sorted = scores.to_vec();
                sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
                let k = nearest_rank(1.0 - prot, sorted.len());
                ThresholdRule::Value(sorted[k - 1] as f64)
            }
        }
    };
    Ok(ProtectorCalibration { correct_scores: scores.to_vec(), prot, mode, threshold })
}

/// The gate: quantile mode uses S <= threshold, absolute mode uses
/// S < threshold. Comparison happens in the score's own precision so a score
/// sitting exactly on the configured boundary behaves as written.
pub fn should_reclassify(s_value: f32, calibration: &ProtectorCalibration) -> bool {
    match calibration.threshold {
        ThresholdRule::Always => true,
        ThresholdRule::Never => false,
        ThresholdRule::Value(thr) => match calibration.mode {
            ThresholdMode::Quantile => s_value <= thr as f32,
            ThresholdMode::Absolute => s_value < thr as f32,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankTestResult {
    pub u_statistic: f64,
    pub p_value: f64,
    pub cohens_d: f64,
}

/// Doubled midranks of the pooled sample (doubling keeps tied ranks integer),
/// plus the tie-run lengths.
fn doubled_midranks(pooled: &[(f32, bool)]) -> (Vec<u64>, Vec<u64>) {
    let n = pooled.len();
    let mut dbl = vec![0u64; n];
    let mut tie_runs = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // Ranks are 1-based; a run i..=j has doubled midrank (i+1)+(j+1).
        let d = (i + j + 2) as u64;
        for item in dbl.iter_mut().take(j + 1).skip(i) {
            *item = d;
        }
        tie_runs.push((j - i + 1) as u64);
        i = j + 1;
    }
    (dbl, tie_runs)
}

/// Exact two-sided permutation p-value for the U statistic, by dynamic
/// programming over the distribution of rank sums of size-n_a subsets.
fn exact_p(dbl_ranks: &[u64], n_a: usize, u2_obs: i64) -> f64 {
    let n = dbl_ranks.len();
    let n_b = n - n_a;
    let s_max: u64 = {
        let mut sorted = dbl_ranks.to_vec();
        sorted.sort_unstable();
        sorted[n - n_a..].iter().sum()
    };
    // dp[j][s]: number of ways to pick j elements with doubled-rank sum s.
    let mut dp = vec![vec![0u64; s_max as usize + 1]; n_a + 1];
    dp[0][0] = 1;
    for &d in dbl_ranks {
        for j in (0..n_a).rev() {
            for s in 0..=(s_max.saturating_sub(d)) as usize {
                if dp[j][s] > 0 {
                    let ways = dp[j][s];
                    dp[j + 1][s + d as usize] += ways;
                }
            }
        }
    }
    let center = (n_a * n_b) as i64;
    let target = (u2_obs - center).abs();
    let mut extreme = 0u64;
    let mut total = 0u64;
    for (s, &ways) in dp[n_a].iter().enumerate() {
        if ways == 0 {
            continue;
        }
        total += ways;
        let u2 = s as i64 - (n_a * (n_a + 1)) as i64;
        if (u2 - center).abs() >= target {
            extreme += ways;
        }
    }
    extreme as f64 / total as f64
}

/// Normal approximation with tie-corrected variance and continuity
/// correction, two-sided.
fn normal_p(u: f64, n_a: usize, n_b: usize, tie_runs: &[u64]) -> f64 {
    let na = n_a as f64;
    let nb = n_b as f64;
    let n = na + nb;
    let mean = na * nb / 2.0;
    let tie_term: f64 = tie_runs.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let diff = u - mean;
    if diff == 0.0 {
        return 1.0;
    }
    let z = (diff.abs() - 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    (2.0 * (1.0 - normal.cdf(z.max(0.0)))).min(1.0)
}

/// Exact permutation p for small problems (n_a*n_b <= 400), normal
/// approximation beyond that.
pub fn mann_whitney(sample_a: &[f32], sample_b: &[f32]) -> Result<RankTestResult> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::Parameter("both samples must be non-empty".into()));
    }
    if sample_a.iter().chain(sample_b).any(|v| v.is_nan()) {
        return Err(Error::Numeric("samples contain NaN".into()));
    }
    let n_a = sample_a.len();
    let n_b = sample_b.len();
    let mut pooled: Vec<(f32, bool)> = sample_a
        .iter()
        .map(|&v| (v, true))
        .chain(sample_b.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_unstable_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let (dbl, tie_runs) = doubled_midranks(&pooled);

    // U_a = R_a - n_a(n_a+1)/2, computed on doubled ranks to stay integer.
    let r2_a: u64 = pooled
        .iter()
        .zip(&dbl)
        .filter(|((_, is_a), _)| *is_a)
        .map(|(_, &d)| d)
        .sum();
    let u2 = r2_a as i64 - (n_a * (n_a + 1)) as i64;
    let u = u2 as f64 / 2.0;

    let p_value = if n_a * n_b <= 400 {
        exact_p(&dbl, n_a, u2)
    } else {
        normal_p(u, n_a, n_b, &tie_runs)
    };

    let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
    let mean_a = mean(sample_a);
    let mean_b = mean(sample_b);
    let ssq = |s: &[f32], m: f64| s.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
    let cohens_d = if n_a + n_b <= 2 {
        if mean_a == mean_b {
            0.0
        } else {
            f64::INFINITY.copysign(mean_a - mean_b)
        }
    } else {
        let pooled_var = (ssq(sample_a, mean_a) + ssq(sample_b, mean_b)) / (n_a + n_b - 2) as f64;
        if pooled_var == 0.0 {
            if mean_a == mean_b {
                0.0
            } else {
                f64::INFINITY.copysign(mean_a - mean_b)
            }
        } else {
            (mean_a - mean_b) / pooled_var.sqrt()
        }
    };

    Ok(RankTestResult { u_statistic: u, p_value, cohens_d })
}
