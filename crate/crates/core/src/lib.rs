//! Diffusion-based enhancement of a discriminative classifier.
//!
//! A fast softmax classifier makes every first pass. A calibrated confidence
//! gate flags the inputs it is unsure about, and only those are re-ranked by
//! a class-conditional denoiser: the candidate label whose conditioning best
//! predicts freshly injected noise wins, with an ensemble of seeded voters
//! smoothing out the Monte Carlo error.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
mod math;
pub mod net;
pub mod pipeline;
pub mod protector;
pub mod rng;
pub mod scorer;
pub mod train;

pub use checkpoint::{
    classifier_from_checkpoint, classifier_to_checkpoint, load_checkpoint, net_from_checkpoint,
    net_to_checkpoint, save_checkpoint, Checkpoint, TensorSection,
};
pub use classifier::{
    confidence_score, logits, softmax, topk_candidates, CandidateSet, ClassifierParams, HiddenLayer,
};
pub use config::{parse_config, parse_config_str, RunConfig};
pub use data::{generate_gaussian_dataset, load_idx, Dataset, Provenance};
pub use diffusion::{
    forward_diffuse, make_linear_schedule, predict_noise, simple_loss, Condition, ConditionKind,
    Denoiser, GaussianParams, NoiseSchedule,
};
pub use error::{Error, Result};
pub use net::{init_params, net_backward, net_forward, sinusoidal_time_embedding, NetParams};
pub use pipeline::{
    ablate, ablation_csv, classify_one, delta_percent, evaluate, vote, EvaluationReport, GridSpec,
    PredictionOutcome, VoteRule,
};
pub use protector::{
    calibrate_threshold, collect_correct_scores, mann_whitney, should_reclassify,
    ProtectorCalibration, RankTestResult, ThresholdMode, ThresholdRule,
};
pub use rng::{splitmix64, voter_stream_seed};
pub use scorer::{
    build_condition_pair, choose_timesteps, combine_noise, score_candidates, select_label,
    ScoreMode, ScoreTrace, ScorerConfig,
};
pub use train::{
    adam_update, train_base_classifier, train_denoiser, training_accuracy, AdamState, TrainConfig,
};
