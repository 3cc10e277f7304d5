//! Deterministic training loops for the denoiser and the base classifier.
//!
//! All randomness (shuffles, timestep draws, noise) comes from per-epoch
//! ChaCha8 streams derived from (seed, epoch), so a rerun with the same seed
//! reproduces parameters bit for bit.

use crate::classifier::ClassifierParams;
use crate::data::Dataset;
use crate::diffusion::{forward_diffuse, Condition, NoiseSchedule};
use crate::error::{Error, Result};
use crate::math::{silu, silu_deriv};
use crate::net::{net_backward, net_forward, NetParams};
use crate::rng::splitmix64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub t_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 42,
            t_max: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(Error::Parameter("learning_rate must lie in (0, 1)".into()));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Parameter(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Parameter("adam_epsilon must be positive".into()));
        }
        if self.t_max < 1 {
            return Err(Error::Parameter("t_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// Bias-corrected adaptive-moment state, one (m, v) pair per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(array_lens: &[usize]) -> AdamState {
        AdamState {
            step: 0,
            m: array_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: array_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One optimizer step over aligned parameter/gradient arrays.
pub fn adam_update(
    params: &mut [(&str, &mut Vec<f32>)],
    grads: &[(&str, &[f32])],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape("parameter, gradient, and state array counts differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = config.adam_beta1;
    let b2 = config.adam_beta2;
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    for k in 0..params.len() {
        let (name, p) = &mut params[k];
        let g = grads[k].1;
        if p.len() != g.len() || p.len() != state.m[k].len() {
            return Err(Error::Shape(format!("array {name} length mismatch")));
        }
        for i in 0..p.len() {
            let gi = g[i] as f64;
            let m = b1 * state.m[k][i] as f64 + (1.0 - b1) * gi;
            let v = b2 * state.v[k][i] as f64 + (1.0 - b2) * gi * gi;
            state.m[k][i] = m as f32;
            state.v[k][i] = v as f32;
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            p[i] = (p[i] as f64 - config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon))
                as f32;
        }
    }
    Ok(())
}

/// Accumulates per-example gradients in 64-bit and emits the batch mean.
struct GradAccumulator {
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl GradAccumulator {
    fn new(array_lens: &[usize]) -> GradAccumulator {
        GradAccumulator { sums: array_lens.iter().map(|&n| vec![0.0; n]).collect(), count: 0 }
    }

    fn add(&mut self, arrays: &[(&str, &[f32])]) {
        for (sum, (_, arr)) in self.sums.iter_mut().zip(arrays) {
            for (s, &g) in sum.iter_mut().zip(*arr) {
                *s += g as f64;
            }
        }
        self.count += 1;
    }

    fn mean(&self) -> Vec<Vec<f32>> {
        let inv = 1.0 / self.count as f64;
        self.sums.iter().map(|s| s.iter().map(|&v| (v * inv) as f32).collect()).collect()
    }
}

/// Denoising training loop: per example, draw a uniform timestep and fresh
/// noise, corrupt the input, condition on the true class, and minimize the
/// noise-prediction error. Returns the per-epoch mean loss curve.
pub fn train_denoiser(
    dataset: &Dataset,
    params: &mut NetParams,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if dataset.len() == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    if dataset.num_classes() > params.num_classes() {
        return Err(Error::Data(format!(
            "dataset has {} classes, network supports {}",
            dataset.num_classes(),
            params.num_classes()
        )));
    }
    if dataset.dim() != params.data_dim() {
        return Err(Error::Shape(format!(
            "dataset dimension {} does not match network dimension {}",
            dataset.dim(),
            params.data_dim()
        )));
    }
    if config.t_max != schedule.t_max() {
        return Err(Error::Parameter(format!(
            "config t_max {} does not match schedule t_max {}",
            config.t_max,
            schedule.t_max()
        )));
    }

    let lens: Vec<usize> = params.arrays().iter().map(|(_, a)| a.len()).collect();
    let mut adam = AdamState::new(&lens);
    let mut curve = Vec::with_capacity(config.epochs);
    let n = dataset.len();

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed, epoch as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0_f64;
        for batch in order.chunks(config.batch_size) {
            let mut acc = GradAccumulator::new(&lens);
            for &idx in batch {
                let x0 = dataset.example(idx);
                let t = rng.random_range(1..=schedule.t_max());
                let eps: Vec<f32> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
                let x_t = forward_diffuse(x0, t, &eps, schedule)?;
                let cond = Condition::positive(dataset.label(idx));
                let (_, cache) = net_forward(params, &x_t, t, &cond, schedule)?;
                let (loss, grads) = net_backward(params, &cache, &eps)?;
                epoch_loss += loss;
                acc.add(&grads.arrays());
            }
            let mean = acc.mean();
            let grad_refs: Vec<(&str, &[f32])> =
                mean.iter().map(|g| ("", g.as_slice())).collect();
            adam_update(&mut params.arrays_mut(), &grad_refs, &mut adam, config)?;
        }
        curve.push(epoch_loss / n as f64);
    }
    Ok(curve)
}

fn classifier_array_lens(params: &ClassifierParams) -> Vec<usize> {
    match &params.hidden {
        Some(l) => vec![l.w.len(), l.b.len(), params.w_out.len(), params.b_out.len()],
        None => vec![params.w_out.len(), params.b_out.len()],
    }
}

/// Fraction of the dataset the classifier labels correctly (argmax of the
/// logits, earliest class winning ties).
pub fn training_accuracy(dataset: &Dataset, params: &ClassifierParams) -> Result<f64> {
    let mut correct = 0usize;
    for i in 0..dataset.len() {
        let v = crate::classifier::logits(params, dataset.example(i))?;
        let mut best = 0;
        for c in 1..v.len() {
            if v[c] > v[best] {
                best = c;
            }
        }
        if best == dataset.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Softmax cross-entropy training for the base classifier. Returns the
/// per-epoch training accuracy curve (measured after each epoch's updates).
pub fn train_base_classifier(
    dataset: &Dataset,
    params: &mut ClassifierParams,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if dataset.len() == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    if dataset.num_classes() > params.num_classes() {
        return Err(Error::Data(format!(
            "dataset has {} classes, classifier supports {}",
            dataset.num_classes(),
            params.num_classes()
        )));
    }
    if dataset.dim() != params.input_dim() {
        return Err(Error::Shape(format!(
            "dataset dimension {} does not match classifier input {}",
            dataset.dim(),
            params.input_dim()
        )));
    }

    let lens = classifier_array_lens(params);
    let mut adam = AdamState::new(&lens);
    let mut curve = Vec::with_capacity(config.epochs);
    let n = dataset.len();
    let num_classes = params.num_classes();

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed, epoch as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut acc = GradAccumulator::new(&lens);
            for &idx in batch {
                let x = dataset.example(idx);
                let label = dataset.label(idx);
                let pre = params.hidden_pre(x);
                let features: Vec<f64> = match &pre {
                    Some(z) => z.iter().map(|&v| silu(v)).collect(),
                    None => x.iter().map(|&v| v as f64).collect(),
                };
                let fd = features.len();
                let mut logit = vec![0.0_f64; num_classes];
                for c in 0..num_classes {
                    let row = &params.w_out[c * fd..(c + 1) * fd];
                    logit[c] = params.b_out[c] as f64
                        + row.iter().zip(&features).map(|(&w, &f)| w as f64 * f).sum::<f64>();
                }
                let max = logit.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logit.iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                // dL/dlogit for cross-entropy: softmax - onehot.
                let mut dlogit: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
                dlogit[label] -= 1.0;

                let mut g_w_out = vec![0.0_f32; num_classes * fd];
                let mut g_b_out = vec![0.0_f32; num_classes];
                let mut dfeat = vec![0.0_f64; fd];
                for c in 0..num_classes {
                    g_b_out[c] = dlogit[c] as f32;
                    for f in 0..fd {
                        g_w_out[c * fd + f] = (dlogit[c] * features[f]) as f32;
                        dfeat[f] += params.w_out[c * fd + f] as f64 * dlogit[c];
                    }
                }
                match (&pre, &params.hidden) {
                    (Some(z), Some(layer)) => {
                        let in_dim = params.input_dim();
                        let mut g_w = vec![0.0_f32; layer.w.len()];
                        let mut g_b = vec![0.0_f32; layer.b.len()];
                        for o in 0..fd {
                            let dz = dfeat[o] * silu_deriv(z[o]);
                            g_b[o] = dz as f32;
                            for i in 0..in_dim {
                                g_w[o * in_dim + i] = (dz * x[i] as f64) as f32;
                            }
                        }
                        acc.add(&[
                            ("w", g_w.as_slice()),
                            ("b", g_b.as_slice()),
                            ("w_out", g_w_out.as_slice()),
                            ("b_out", g_b_out.as_slice()),
                        ]);
                    }
                    _ => {
                        acc.add(&[("w_out", g_w_out.as_slice()), ("b_out", g_b_out.as_slice())]);
                    }
                }
            }
            let mean = acc.mean();
            let grad_refs: Vec<(&str, &[f32])> =
                mean.iter().map(|g| ("", g.as_slice())).collect();
            match &mut params.hidden {
                Some(layer) => {
                    let mut refs: Vec<(&str, &mut Vec<f32>)> = vec![
                        ("w", &mut layer.w),
                        ("b", &mut layer.b),
                    ];
                    refs.push(("w_out", &mut params.w_out));
                    refs.push(("b_out", &mut params.b_out));
                    adam_update(&mut refs, &grad_refs, &mut adam, config)?;
                }
                None => {
                    let mut refs: Vec<(&str, &mut Vec<f32>)> =
                        vec![("w_out", &mut params.w_out), ("b_out", &mut params.b_out)];
                    adam_update(&mut refs, &grad_refs, &mut adam, config)?;
                }
            }
        }
        curve.push(training_accuracy(dataset, params)?);
    }
    Ok(curve)
}
