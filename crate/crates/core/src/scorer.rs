//! Candidate re-ranking by denoising error.
//!
//! For each evaluation timestep one noise draw and one noised input are
//! shared by every candidate, so candidate comparisons are paired. A
//! candidate's score is the mean squared noise-prediction error under its
//! condition; positive and combined modes select the argmin, negative mode
//! the argmax of the negative-condition error.

use rand::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::CandidateSet;
use crate::diffusion::{forward_diffuse, predict_noise, simple_loss, Condition, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Positive,
    Negative,
    Combined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerConfig {
    pub t_eval: usize,
    pub lambda: f64,
    pub mode: ScoreMode,
    pub k: usize,
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_eval < 1 {
            return Err(Error::Parameter("t_eval must be at least 1".into()));
        }
        if self.k < 1 {
            return Err(Error::Parameter("K must be at least 1".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Parameter(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.mode == ScoreMode::Combined && self.lambda < 1.0 {
            return Err(Error::Parameter(format!(
                "combined mode requires lambda >= 1, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Midpoint-stratified timesteps over [1, t_max]: the i-th of t_eval steps is
/// ceil((2i+1) * t_max / (2 * t_eval)). Strictly increasing, endpoints stay
/// inside the schedule, and t_eval = t_max yields every timestep once.
pub fn choose_timesteps(t_eval: usize, t_max: usize) -> Result<Vec<usize>> {
    if t_eval < 1 || t_eval > t_max {
        return Err(Error::Parameter(format!(
            "t_eval must lie in [1, {t_max}], got {t_eval}"
        )));
    }
    Ok((0..t_eval)
        .map(|i| ((2 * i + 1) * t_max + 2 * t_eval - 1) / (2 * t_eval))
        .collect())
}

/// Positive condition {C_i} and negative condition holding the other K-1
/// candidates in base-rank order.
pub fn build_condition_pair(candidates: &CandidateSet, i: usize) -> Result<(Condition, Condition)> {
    if i >= candidates.k() {
        return Err(Error::Index(format!(
            "candidate {i} out of range for K={}",
            candidates.k()
        )));
    }
    if candidates.k() < 2 {
        return Err(Error::Condition(
            "negative conditions need at least two candidates".into(),
        ));
    }
    let pos = Condition::positive(candidates.labels()[i]);
    let others: Vec<usize> = candidates
        .labels()
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &l)| l)
        .collect();
    Ok((pos, Condition::negative(others)?))
}

/// eps_neg + lambda * (eps_pos - eps_neg). lambda = 1 returns eps_pos
/// bit for bit rather than round-tripping through the arithmetic.
pub fn combine_noise(eps_pos: &[f32], eps_neg: &[f32], lambda: f64) -> Result<Vec<f32>> {
    if eps_pos.len() != eps_neg.len() {
        return Err(Error::Shape(format!(
            "eps_pos has {} elements but eps_neg has {}",
            eps_pos.len(),
            eps_neg.len()
        )));
    }
    if lambda == 1.0 {
        return Ok(eps_pos.to_vec());
    }
    Ok(eps_pos
        .iter()
        .zip(eps_neg)
        .map(|(&p, &n)| {
            let n = n as f64;
            (n + lambda * (p as f64 - n)) as f32
        })
        .collect())
}

/// Per-candidate, per-timestep squared errors plus their row means.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrace {
    labels: Vec<usize>,
    timesteps: Vec<usize>,
    errors: Vec<Vec<f64>>,
    mean_errors: Vec<f64>,
}

impl ScoreTrace {
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn errors(&self) -> &[Vec<f64>] {
        &self.errors
    }

    pub fn mean_errors(&self) -> &[f64] {
        &self.mean_errors
    }

    /// Rows of (candidate label, timestep, error).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("candidate,timestep,error\n");
        for (j, label) in self.labels.iter().enumerate() {
            for (ti, &t) in self.timesteps.iter().enumerate() {
                out.push_str(&format!("{label},{t},{}\n", self.errors[j][ti]));
            }
        }
        out
    }
}

/// Score every candidate with shared per-timestep noise. The rng stream is
/// consumed timestep-major: d draws per timestep, none per candidate.
pub fn score_candidates<R: Rng>(
    x: &[f32],
    candidates: &CandidateSet,
    model: &Denoiser,
    schedule: &NoiseSchedule,
    config: &ScorerConfig,
    rng: &mut R,
) -> Result<ScoreTrace> {
    config.validate()?;
    let k = candidates.k();
    let timesteps = choose_timesteps(config.t_eval, schedule.t_max())?;

    // Conditions are fixed per candidate; build them before the loop.
    let mut conds: Vec<(Condition, Option<Condition>)> = Vec::with_capacity(k);
    for j in 0..k {
        match config.mode {
            ScoreMode::Positive => {
                conds.push((Condition::positive(candidates.labels()[j]), None));
            }
            ScoreMode::Negative | ScoreMode::Combined => {
                let (pos, neg) = build_condition_pair(candidates, j)?;
                conds.push((pos, Some(neg)));
            }
        }
    }

    let mut errors = vec![vec![0.0_f64; timesteps.len()]; k];
    for (ti, &t) in timesteps.iter().enumerate() {
        let eps: Vec<f32> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
        let x_t = forward_diffuse(x, t, &eps, schedule)?;
        for (j, (pos, neg)) in conds.iter().enumerate() {
            let pred = match config.mode {
                ScoreMode::Positive => predict_noise(model, &x_t, t, pos, schedule)?,
                ScoreMode::Negative => {
                    predict_noise(model, &x_t, t, neg.as_ref().unwrap(), schedule)?
                }
                ScoreMode::Combined => {
                    let p = predict_noise(model, &x_t, t, pos, schedule)?;
                    let n = predict_noise(model, &x_t, t, neg.as_ref().unwrap(), schedule)?;
                    combine_noise(&p, &n, config.lambda)?
                }
            };
            errors[j][ti] = simple_loss(&eps, &pred)?;
        }
    }

    let mean_errors: Vec<f64> = errors
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    Ok(ScoreTrace {
        labels: candidates.labels().to_vec(),
        timesteps,
        errors,
        mean_errors,
    })
}

#[cfg(test)]
pub(crate) fn trace_for_tests(
    labels: Vec<usize>,
    timesteps: Vec<usize>,
    errors: Vec<Vec<f64>>,
) -> ScoreTrace {
    let mean_errors = errors
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    ScoreTrace { labels, timesteps, errors, mean_errors }
}

/// Winning label for a trace: argmin of mean error in positive/combined mode,
/// argmax in negative mode, first index winning ties (base rank).
pub fn select_label(trace: &ScoreTrace, candidates: &CandidateSet, mode: ScoreMode) -> Result<usize> {
    if trace.labels != candidates.labels() {
        return Err(Error::Contract("trace does not belong to this candidate set".into()));
    }
    let means = &trace.mean_errors;
    let mut best = 0;
    for j in 1..means.len() {
        let better = match mode {
            ScoreMode::Positive | ScoreMode::Combined => means[j] < means[best],
            ScoreMode::Negative => means[j] > means[best],
        };
        if better {
            best = j;
        }
    }
    Ok(candidates.labels()[best])
}
