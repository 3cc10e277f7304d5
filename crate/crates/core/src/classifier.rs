//! Discriminative first stage: logits, softmax, the confidence statistic, and
//! top-K candidate extraction.

use crate::error::{Error, Result};
use crate::math::silu;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Optional hidden layer (row-major `[hidden][input]` weights).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

/// A softmax classifier, either linear or with one silu hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    input_dim: usize,
    num_classes: usize,
    hidden_dim: usize,
    pub hidden: Option<HiddenLayer>,
    pub w_out: Vec<f32>,
    pub b_out: Vec<f32>,
}

impl ClassifierParams {
    /// Purely linear classifier from explicit weights (`w` is
    /// `[num_classes][input_dim]` row-major).
    pub fn linear(input_dim: usize, num_classes: usize, w: Vec<f32>, b: Vec<f32>) -> Result<Self> {
        if input_dim == 0 || num_classes < 2 {
            return Err(Error::Parameter("need input_dim >= 1 and num_classes >= 2".into()));
        }
        if w.len() != num_classes * input_dim || b.len() != num_classes {
            return Err(Error::Shape("weight or bias shape does not match dims".into()));
        }
        Ok(ClassifierParams { input_dim, num_classes, hidden_dim: 0, hidden: None, w_out: w, b_out: b })
    }

    /// One-hidden-layer classifier with uniform 1/sqrt(fan_in) init,
    /// deterministic in `seed`.
    pub fn init(input_dim: usize, hidden_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || num_classes < 2 {
            return Err(Error::Parameter("classifier dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, scale: f32| -> Vec<f32> {
            (0..n).map(|_| (rng.random::<f32>() * 2.0 - 1.0) * scale).collect()
        };
        let w = uniform(hidden_dim * input_dim, 1.0 / (input_dim as f32).sqrt());
        let w_out = uniform(num_classes * hidden_dim, 1.0 / (hidden_dim as f32).sqrt());
        Ok(ClassifierParams {
            input_dim,
            num_classes,
            hidden_dim,
            hidden: Some(HiddenLayer { w, b: vec![0.0; hidden_dim] }),
            w_out,
            b_out: vec![0.0; num_classes],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn from_arrays(
        input_dim: usize,
        num_classes: usize,
        hidden: Option<HiddenLayer>,
        w_out: Vec<f32>,
        b_out: Vec<f32>,
    ) -> Result<Self> {
        let hidden_dim = hidden.as_ref().map_or(0, |l| l.b.len());
        let feature_dim = if hidden_dim > 0 { hidden_dim } else { input_dim };
        if let Some(l) = &hidden {
            if l.w.len() != hidden_dim * input_dim {
                return Err(Error::Shape("hidden layer shape mismatch".into()));
            }
        }
        if w_out.len() != num_classes * feature_dim || b_out.len() != num_classes {
            return Err(Error::Shape("output layer shape mismatch".into()));
        }
        if input_dim == 0 || num_classes < 2 {
            return Err(Error::Parameter("need input_dim >= 1 and num_classes >= 2".into()));
        }
        Ok(ClassifierParams { input_dim, num_classes, hidden_dim, hidden, w_out, b_out })
    }

    /// Hidden pre-activations for `x`, or `None` for a linear model.
    /// Exposed for the training loop's backward pass.
    pub(crate) fn hidden_pre(&self, x: &[f32]) -> Option<Vec<f64>> {
        self.hidden.as_ref().map(|l| {
            (0..self.hidden_dim)
                .map(|o| {
                    let row = &l.w[o * self.input_dim..(o + 1) * self.input_dim];
                    let mut acc = l.b[o] as f64;
                    for (w, &xv) in row.iter().zip(x) {
                        acc += *w as f64 * xv as f64;
                    }
                    acc
                })
                .collect()
        })
    }
}

/// Top-K candidates in descending base probability, plus the confidence
/// statistic (the maximum softmax probability).
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    labels: Vec<usize>,
    probs: Vec<f32>,
    s_value: f32,
}

impl CandidateSet {
    pub fn new(labels: Vec<usize>, probs: Vec<f32>, s_value: f32) -> Result<CandidateSet> {
        if labels.is_empty() || labels.len() != probs.len() {
            return Err(Error::Shape("labels and probs must be non-empty and match".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !labels.iter().all(|l| seen.insert(*l)) {
            return Err(Error::Contract("candidate labels must be distinct".into()));
        }
        if probs.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Contract("candidate probabilities must be descending".into()));
        }
        if s_value != probs[0] {
            return Err(Error::Contract("s_value must equal the top probability".into()));
        }
        Ok(CandidateSet { labels, probs, s_value })
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn s_value(&self) -> f32 {
        self.s_value
    }
}

pub fn logits(params: &ClassifierParams, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != params.input_dim {
        return Err(Error::Shape(format!(
            "input has {} elements, classifier expects {}",
            x.len(),
            params.input_dim
        )));
    }
    let features: Vec<f64> = match params.hidden_pre(x) {
        Some(pre) => pre.into_iter().map(silu).collect(),
        None => x.iter().map(|&v| v as f64).collect(),
    };
    let feature_dim = features.len();
    let mut out = Vec::with_capacity(params.num_classes);
    for c in 0..params.num_classes {
        let row = &params.w_out[c * feature_dim..(c + 1) * feature_dim];
        let mut acc = params.b_out[c] as f64;
        for (w, f) in row.iter().zip(&features) {
            acc += *w as f64 * f;
        }
        out.push(acc as f32);
    }
    Ok(out)
}

/// Exp-normalized probabilities with max-subtraction for stability.
pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::Parameter("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = v.iter().map(|&x| (x as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| (e / sum) as f32).collect())
}

/// S(x): the maximum softmax probability of the classifier's output.
pub fn confidence_score(params: &ClassifierParams, x: &[f32]) -> Result<f32> {
    let probs = softmax(&logits(params, x)?)?;
    Ok(probs.iter().copied().fold(f32::NEG_INFINITY, f32::max))
}

/// K distinct labels by descending probability, ties broken by ascending
/// class index.
pub fn topk_candidates(params: &ClassifierParams, x: &[f32], k: usize) -> Result<CandidateSet> {
    if k < 1 || k > params.num_classes {
        return Err(Error::Parameter(format!(
            "K must be in [1, {}], got {k}",
            params.num_classes
        )));
    }
    let probs = softmax(&logits(params, x)?)?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b].partial_cmp(&probs[a]).unwrap().then_with(|| a.cmp(&b))
    });
    order.truncate(k);
    let top_probs: Vec<f32> = order.iter().map(|&i| probs[i]).collect();
    let s_value = top_probs[0];
    CandidateSet::new(order, top_probs, s_value)
}
