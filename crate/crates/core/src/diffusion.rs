//! Forward diffusion process and the denoiser abstraction.
//!
//! The forward process corrupts a clean vector x0 into
//! x_t = sqrt(a_t)*x0 + sqrt(1-a_t)*eps with a_t the cumulative product of
//! (1 - beta_s). A `Denoiser` predicts the injected noise from (x_t, t) and a
//! class condition; the network backend is trainable, the analytic Gaussian
//! backend is a closed-form oracle used for correctness checks.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::net::{net_forward, NetParams};

/// Linear beta schedule and its cumulative alpha-bar products.
///
/// Index convention: `betas[i]` and `alpha_bars[i]` belong to timestep t = i+1.
/// alpha_bar(0) = 1 by definition.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

pub fn make_linear_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::Parameter("t_max must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut betas = Vec::with_capacity(t_max);
    for i in 0..t_max {
        let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
        betas.push(beta_start + (beta_end - beta_start) * frac);
    }
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0_f64;
    for &beta in &betas {
        prod *= 1.0 - beta;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { t_max, betas, alpha_bars })
}

/// Cumulative product of (1 - beta) up to and including timestep t; 1 at t=0.
pub fn alpha_bar(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    if t > schedule.t_max {
        return Err(Error::Index(format!(
            "timestep {t} exceeds t_max {}",
            schedule.t_max
        )));
    }
    Ok(if t == 0 { 1.0 } else { schedule.alpha_bars[t - 1] })
}

/// x_t = sqrt(a_t)*x0 + sqrt(1-a_t)*eps, elementwise.
pub fn forward_diffuse(
    x0: &[f32],
    t: usize,
    eps: &[f32],
    schedule: &NoiseSchedule,
) -> Result<Vec<f32>> {
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!(
            "x0 has {} elements but eps has {}",
            x0.len(),
            eps.len()
        )));
    }
    if t < 1 || t > schedule.t_max {
        return Err(Error::Index(format!(
            "timestep {t} outside [1, {}]",
            schedule.t_max
        )));
    }
    let ab = alpha_bar(schedule, t)?;
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| (signal * x as f64 + noise * e as f64) as f32)
        .collect())
}

/// Mean squared elementwise difference. Mean, not sum, so the value does not
/// scale with dimensionality.
pub fn simple_loss(eps_true: &[f32], eps_pred: &[f32]) -> Result<f64> {
    if eps_true.len() != eps_pred.len() {
        return Err(Error::Shape(format!(
            "eps_true has {} elements but eps_pred has {}",
            eps_true.len(),
            eps_pred.len()
        )));
    }
    let mut acc = 0.0_f64;
    for (&a, &b) in eps_true.iter().zip(eps_pred) {
        let d = a as f64 - b as f64;
        acc += d * d;
    }
    Ok(acc / eps_true.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionKind {
    Positive,
    Negative,
}

/// A class-conditioning request: a single target class (positive) or the set
/// of classes to rule out (negative).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Condition {
    kind: ConditionKind,
    classes: Vec<usize>,
}

impl Condition {
    pub fn positive(class: usize) -> Condition {
        Condition { kind: ConditionKind::Positive, classes: vec![class] }
    }

    pub fn negative(classes: Vec<usize>) -> Result<Condition> {
        if classes.is_empty() {
            return Err(Error::Condition("negative condition needs at least one class".into()));
        }
        Ok(Condition { kind: ConditionKind::Negative, classes })
    }

    pub fn kind(&self) -> ConditionKind {
        self.kind
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// All class indices must be addressable by the model.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Condition("condition has no classes".into()));
        }
        for &c in &self.classes {
            if c >= num_classes {
                return Err(Error::Condition(format!(
                    "class {c} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(())
    }
}

/// Closed-form denoiser for data drawn from Normal(mu_c, sigma^2 * I).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    class_means: Vec<Vec<f32>>,
    sigma: f64,
}

impl GaussianParams {
    pub fn new(class_means: Vec<Vec<f32>>, sigma: f64) -> Result<GaussianParams> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
        }
        if class_means.is_empty() {
            return Err(Error::Parameter("need at least one class mean".into()));
        }
        let dim = class_means[0].len();
        if dim == 0 || class_means.iter().any(|m| m.len() != dim) {
            return Err(Error::Shape("class means must share one nonzero dimension".into()));
        }
        Ok(GaussianParams { class_means, sigma })
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn dim(&self) -> usize {
        self.class_means[0].len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn class_means(&self) -> &[Vec<f32>] {
        &self.class_means
    }
}

#[derive(Debug)]
pub enum DenoiserBackend {
    Network(NetParams),
    AnalyticGaussian(GaussianParams),
}

/// Noise predictor with an instrumented invocation counter. The counter is
/// observability only; predictions are pure functions of the inputs.
#[derive(Debug)]
pub struct Denoiser {
    backend: DenoiserBackend,
    calls: AtomicU64,
}

impl Denoiser {
    pub fn network(params: NetParams) -> Denoiser {
        Denoiser { backend: DenoiserBackend::Network(params), calls: AtomicU64::new(0) }
    }

    pub fn analytic_gaussian(params: GaussianParams) -> Denoiser {
        Denoiser { backend: DenoiserBackend::AnalyticGaussian(params), calls: AtomicU64::new(0) }
    }

    pub fn backend(&self) -> &DenoiserBackend {
        &self.backend
    }

    pub fn num_classes(&self) -> usize {
        match &self.backend {
            DenoiserBackend::Network(p) => p.num_classes(),
            DenoiserBackend::AnalyticGaussian(p) => p.num_classes(),
        }
    }

    pub fn data_dim(&self) -> usize {
        match &self.backend {
            DenoiserBackend::Network(p) => p.data_dim(),
            DenoiserBackend::AnalyticGaussian(p) => p.dim(),
        }
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_call_count(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

/// Dispatch to the denoiser backend. Output shape always equals `x_t`'s shape.
pub fn predict_noise(
    model: &Denoiser,
    x_t: &[f32],
    t: usize,
    cond: &Condition,
    schedule: &NoiseSchedule,
) -> Result<Vec<f32>> {
    cond.check_classes(model.num_classes())?;
    if x_t.len() != model.data_dim() {
        return Err(Error::Shape(format!(
            "input has {} elements, model expects {}",
            x_t.len(),
            model.data_dim()
        )));
    }
    if t < 1 || t > schedule.t_max() {
        return Err(Error::Index(format!("timestep {t} outside [1, {}]", schedule.t_max())));
    }
    model.calls.fetch_add(1, Ordering::Relaxed);
    match &model.backend {
        DenoiserBackend::Network(params) => {
            let (pred, _) = net_forward(params, x_t, t, cond, schedule)?;
            Ok(pred)
        }
        DenoiserBackend::AnalyticGaussian(params) => {
            analytic_gaussian_predict(params, x_t, t, cond, schedule)
        }
    }
}

/// Minimum-MSE estimate E[eps | x_t] for x0 ~ Normal(mu, sigma^2 * I), with mu
/// the mean of the class means selected by `cond`:
///   eps_hat = sqrt(1-a_t) * (x_t - sqrt(a_t)*mu) / (a_t*sigma^2 + 1-a_t)
pub fn analytic_gaussian_predict(
    params: &GaussianParams,
    x_t: &[f32],
    t: usize,
    cond: &Condition,
    schedule: &NoiseSchedule,
) -> Result<Vec<f32>> {
    cond.check_classes(params.num_classes())?;
    if x_t.len() != params.dim() {
        return Err(Error::Shape(format!(
            "input has {} elements, means have {}",
            x_t.len(),
            params.dim()
        )));
    }
    let ab = alpha_bar(schedule, t)?;
    let dim = params.dim();
    let mut mean = vec![0.0_f64; dim];
    for &c in cond.classes() {
        for (acc, &m) in mean.iter_mut().zip(&params.class_means[c]) {
            *acc += m as f64;
        }
    }
    let inv_count = 1.0 / cond.classes().len() as f64;
    let coef = (1.0 - ab).sqrt() / (ab * params.sigma * params.sigma + 1.0 - ab);
    let signal = ab.sqrt();
    Ok(x_t
        .iter()
        .zip(&mean)
        .map(|(&x, &m)| (coef * (x as f64 - signal * m * inv_count)) as f32)
        .collect())
}
