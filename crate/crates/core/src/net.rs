//! Conditional noise-prediction network.
//!
//! A two-hidden-layer perceptron over the concatenation
//! [x_t ; sinusoidal time embedding ; mean class embedding]. Weights are
//! stored as 32-bit row-major matrices; forward and backward run in 64-bit
//! internally so analytic gradients survive finite-difference comparison.

use crate::diffusion::{Condition, NoiseSchedule};
use crate::error::{Error, Result};
use crate::math::{silu, silu_deriv};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Hidden-layer nonlinearity. `Identity` exists only so tests can probe the
/// affine structure of the layers; production paths always use `Silu`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Activation {
    Silu,
    #[cfg_attr(not(test), allow(dead_code))]
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu(x),
            Activation::Identity => x,
        }
    }

    fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu_deriv(x),
            Activation::Identity => 1.0,
        }
    }
}

/// Parameters of the noise predictor. Matrices are row-major `[out][in]`.
/// The output layer starts at zero so an untrained net predicts zero noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    data_dim: usize,
    hidden_dim: usize,
    time_embed_dim: usize,
    class_embed_dim: usize,
    num_classes: usize,
    pub class_embed: Vec<f32>,
    pub w_in: Vec<f32>,
    pub b_in: Vec<f32>,
    pub w_hidden: Vec<f32>,
    pub b_hidden: Vec<f32>,
    pub w_out: Vec<f32>,
    pub b_out: Vec<f32>,
    pub(crate) activation: Activation,
}

/// Gradients, one array per parameter array in [`NetParams`], same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub class_embed: Vec<f32>,
    pub w_in: Vec<f32>,
    pub b_in: Vec<f32>,
    pub w_hidden: Vec<f32>,
    pub b_hidden: Vec<f32>,
    pub w_out: Vec<f32>,
    pub b_out: Vec<f32>,
}

pub const PARAM_ARRAY_NAMES: [&str; 7] =
    ["class_embed", "w_in", "b_in", "w_hidden", "b_hidden", "w_out", "b_out"];

impl NetParams {
    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn time_embed_dim(&self) -> usize {
        self.time_embed_dim
    }

    pub fn class_embed_dim(&self) -> usize {
        self.class_embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_embed_dim + self.class_embed_dim
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn arrays(&self) -> [(&'static str, &[f32]); 7] {
        [
            ("class_embed", self.class_embed.as_slice()),
            ("w_in", self.w_in.as_slice()),
            ("b_in", self.b_in.as_slice()),
            ("w_hidden", self.w_hidden.as_slice()),
            ("b_hidden", self.b_hidden.as_slice()),
            ("w_out", self.w_out.as_slice()),
            ("b_out", self.b_out.as_slice()),
        ]
    }

    pub fn arrays_mut(&mut self) -> [(&'static str, &mut Vec<f32>); 7] {
        [
            ("class_embed", &mut self.class_embed),
            ("w_in", &mut self.w_in),
            ("b_in", &mut self.b_in),
            ("w_hidden", &mut self.w_hidden),
            ("b_hidden", &mut self.b_hidden),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
        ]
    }

    /// Rebuild from raw arrays, checking every shape. Used by checkpoint
    /// loading.
    #[allow(clippy::too_many_arguments)]
    pub fn from_arrays(
        data_dim: usize,
        hidden_dim: usize,
        time_embed_dim: usize,
        class_embed_dim: usize,
        num_classes: usize,
        class_embed: Vec<f32>,
        w_in: Vec<f32>,
        b_in: Vec<f32>,
        w_hidden: Vec<f32>,
        b_hidden: Vec<f32>,
        w_out: Vec<f32>,
        b_out: Vec<f32>,
    ) -> Result<NetParams> {
        check_dims(data_dim, hidden_dim, time_embed_dim, class_embed_dim, num_classes)?;
        let input_dim = data_dim + time_embed_dim + class_embed_dim;
        let expect = [
            ("class_embed", class_embed.len(), num_classes * class_embed_dim),
            ("w_in", w_in.len(), hidden_dim * input_dim),
            ("b_in", b_in.len(), hidden_dim),
            ("w_hidden", w_hidden.len(), hidden_dim * hidden_dim),
            ("b_hidden", b_hidden.len(), hidden_dim),
            ("w_out", w_out.len(), data_dim * hidden_dim),
            ("b_out", b_out.len(), data_dim),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Shape(format!("{name} has {got} elements, want {want}")));
            }
        }
        Ok(NetParams {
            data_dim,
            hidden_dim,
            time_embed_dim,
            class_embed_dim,
            num_classes,
            class_embed,
            w_in,
            b_in,
            w_hidden,
            b_hidden,
            w_out,
            b_out,
            activation: Activation::Silu,
        })
    }

    #[cfg(test)]
    pub(crate) fn set_activation(&mut self, activation: Activation) {
        self.activation = activation;
    }
}

impl GradientBundle {
    fn zeros_like(p: &NetParams) -> GradientBundle {
        GradientBundle {
            class_embed: vec![0.0; p.class_embed.len()],
            w_in: vec![0.0; p.w_in.len()],
            b_in: vec![0.0; p.b_in.len()],
            w_hidden: vec![0.0; p.w_hidden.len()],
            b_hidden: vec![0.0; p.b_hidden.len()],
            w_out: vec![0.0; p.w_out.len()],
            b_out: vec![0.0; p.b_out.len()],
        }
    }

    pub fn arrays(&self) -> [(&'static str, &[f32]); 7] {
        [
            ("class_embed", self.class_embed.as_slice()),
            ("w_in", self.w_in.as_slice()),
            ("b_in", self.b_in.as_slice()),
            ("w_hidden", self.w_hidden.as_slice()),
            ("b_hidden", self.b_hidden.as_slice()),
            ("w_out", self.w_out.as_slice()),
            ("b_out", self.b_out.as_slice()),
        ]
    }
}

fn check_dims(d: usize, h: usize, e_t: usize, e_c: usize, num_classes: usize) -> Result<()> {
    if d == 0 || h == 0 || e_t == 0 || e_c == 0 || num_classes == 0 {
        return Err(Error::Parameter("all network dimensions must be positive".into()));
    }
    if e_t % 2 != 0 {
        return Err(Error::Parameter(format!("time embedding dim must be even, got {e_t}")));
    }
    Ok(())
}

/// Interleaved sin/cos features: element 2k = sin(t / 10000^(2k/dim)),
/// element 2k+1 = cos of the same angle.
pub fn sinusoidal_time_embedding(t: usize, dim: usize, t_max: usize) -> Result<Vec<f32>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Parameter(format!("embedding dim must be even and positive, got {dim}")));
    }
    if t > t_max {
        return Err(Error::Index(format!("timestep {t} exceeds t_max {t_max}")));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = 10000.0_f64.powf(-((2 * k) as f64) / dim as f64);
        let angle = t as f64 * freq;
        out.push(angle.sin() as f32);
        out.push(angle.cos() as f32);
    }
    Ok(out)
}

/// Arithmetic mean of the embedding rows named by the condition.
pub fn class_set_embedding(params: &NetParams, cond: &Condition) -> Result<Vec<f32>> {
    cond.check_classes(params.num_classes)?;
    let e_c = params.class_embed_dim;
    let mut acc = vec![0.0_f64; e_c];
    for &c in cond.classes() {
        let row = &params.class_embed[c * e_c..(c + 1) * e_c];
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / cond.classes().len() as f64;
    Ok(acc.into_iter().map(|v| (v * inv) as f32).collect())
}

/// Intermediate values retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    dims: (usize, usize, usize, usize, usize),
    classes: Vec<usize>,
    input: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    pred: Vec<f64>,
}

fn affine(w: &[f32], b: &[f32], x: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o] as f64;
        for (wv, xv) in row.iter().zip(x) {
            acc += *wv as f64 * xv;
        }
        out.push(acc);
    }
    out
}

pub fn net_forward(
    params: &NetParams,
    x_t: &[f32],
    t: usize,
    cond: &Condition,
    schedule: &NoiseSchedule,
) -> Result<(Vec<f32>, ForwardCache)> {
    if x_t.len() != params.data_dim {
        return Err(Error::Shape(format!(
            "input has {} elements, network expects {}",
            x_t.len(),
            params.data_dim
        )));
    }
    cond.check_classes(params.num_classes)?;
    let t_embed = sinusoidal_time_embedding(t, params.time_embed_dim, schedule.t_max())?;
    let c_embed = class_set_embedding(params, cond)?;

    let mut input = Vec::with_capacity(params.input_dim());
    input.extend(x_t.iter().map(|&v| v as f64));
    input.extend(t_embed.iter().map(|&v| v as f64));
    input.extend(c_embed.iter().map(|&v| v as f64));

    let h = params.hidden_dim;
    let d = params.data_dim;
    let z1 = affine(&params.w_in, &params.b_in, &input, h, params.input_dim());
    let a1: Vec<f64> = z1.iter().map(|&v| params.activation.apply(v)).collect();
    let z2 = affine(&params.w_hidden, &params.b_hidden, &a1, h, h);
    let a2: Vec<f64> = z2.iter().map(|&v| params.activation.apply(v)).collect();
    let pred = affine(&params.w_out, &params.b_out, &a2, d, h);

    let prediction: Vec<f32> = pred.iter().map(|&v| v as f32).collect();
    let cache = ForwardCache {
        dims: (d, h, params.time_embed_dim, params.class_embed_dim, params.num_classes),
        classes: cond.classes().to_vec(),
        input,
        z1,
        a1,
        z2,
        a2,
        pred,
    };
    Ok((prediction, cache))
}

/// Loss and exact parameter gradients for the forward pass held in `cache`.
/// The loss is the mean squared error between the cached prediction and
/// `eps_true`; gradients cover every parameter with a data path to it,
/// including only the embedding rows the condition actually used.
pub fn net_backward(
    params: &NetParams,
    cache: &ForwardCache,
    eps_true: &[f32],
) -> Result<(f64, GradientBundle)> {
    let (d, h, e_t, e_c, num_classes) = cache.dims;
    if (d, h, e_t, e_c, num_classes)
        != (
            params.data_dim,
            params.hidden_dim,
            params.time_embed_dim,
            params.class_embed_dim,
            params.num_classes,
        )
    {
        return Err(Error::Contract("cache was built by a differently shaped network".into()));
    }
    if eps_true.len() != d {
        return Err(Error::Shape(format!(
            "eps_true has {} elements, prediction has {d}",
            eps_true.len()
        )));
    }

    let mut loss = 0.0_f64;
    let mut dpred = vec![0.0_f64; d];
    for i in 0..d {
        let diff = cache.pred[i] - eps_true[i] as f64;
        loss += diff * diff;
        dpred[i] = 2.0 * diff / d as f64;
    }
    loss /= d as f64;

    let mut grads = GradientBundle::zeros_like(params);

    // Output layer: pred = W_out * a2 + b_out.
    let mut da2 = vec![0.0_f64; h];
    for o in 0..d {
        let g = dpred[o];
        grads.b_out[o] = g as f32;
        for j in 0..h {
            grads.w_out[o * h + j] = (g * cache.a2[j]) as f32;
            da2[j] += params.w_out[o * h + j] as f64 * g;
        }
    }

    // Hidden layer: a2 = act(W_hidden * a1 + b_hidden).
    let dz2: Vec<f64> =
        da2.iter().zip(&cache.z2).map(|(&g, &z)| g * params.activation.deriv(z)).collect();
    let mut da1 = vec![0.0_f64; h];
    for o in 0..h {
        let g = dz2[o];
        grads.b_hidden[o] = g as f32;
        for j in 0..h {
            grads.w_hidden[o * h + j] = (g * cache.a1[j]) as f32;
            da1[j] += params.w_hidden[o * h + j] as f64 * g;
        }
    }

    // Input layer: a1 = act(W_in * input + b_in).
    let in_dim = d + e_t + e_c;
    let dz1: Vec<f64> =
        da1.iter().zip(&cache.z1).map(|(&g, &z)| g * params.activation.deriv(z)).collect();
    let mut dinput = vec![0.0_f64; in_dim];
    for o in 0..h {
        let g = dz1[o];
        grads.b_in[o] = g as f32;
        for j in 0..in_dim {
            grads.w_in[o * in_dim + j] = (g * cache.input[j]) as f32;
            dinput[j] += params.w_in[o * in_dim + j] as f64 * g;
        }
    }

    // Condition block: the embedding fed in was the mean of the used rows.
    let inv = 1.0 / cache.classes.len() as f64;
    for &c in &cache.classes {
        for j in 0..e_c {
            let g = dinput[d + e_t + j] * inv;
            grads.class_embed[c * e_c + j] += g as f32;
        }
    }

    Ok((loss, grads))
}

/// Uniform init scaled by 1/sqrt(fan_in) for the hidden stack, zeros for the
/// output layer, deterministic in `seed`.
pub fn init_params(
    d: usize,
    h: usize,
    e_t: usize,
    e_c: usize,
    num_classes: usize,
    seed: u64,
) -> Result<NetParams> {
    check_dims(d, h, e_t, e_c, num_classes)?;
    let input_dim = d + e_t + e_c;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize, scale: f32| -> Vec<f32> {
        (0..n).map(|_| (rng.random::<f32>() * 2.0 - 1.0) * scale).collect()
    };
    let class_embed = uniform(num_classes * e_c, 1.0 / (e_c as f32).sqrt());
    let w_in = uniform(h * input_dim, 1.0 / (input_dim as f32).sqrt());
    let w_hidden = uniform(h * h, 1.0 / (h as f32).sqrt());
    Ok(NetParams {
        data_dim: d,
        hidden_dim: h,
        time_embed_dim: e_t,
        class_embed_dim: e_c,
        num_classes,
        class_embed,
        w_in,
        b_in: vec![0.0; h],
        w_hidden,
        b_hidden: vec![0.0; h],
        w_out: vec![0.0; d * h],
        b_out: vec![0.0; d],
        activation: Activation::Silu,
    })
}
