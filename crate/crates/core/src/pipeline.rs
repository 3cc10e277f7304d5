//! End-to-end orchestration: gate each input on its confidence score, re-rank
//! flagged inputs with a voter ensemble over the diffusion scorer, and tally
//! quadrant accounting over a test set.
//!
//! All per-example randomness derives from (base seed, example index, voter
//! index) through a fixed 64-bit mixer, and tallies are order-independent
//! integer sums, so worker count can never change a report.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{topk_candidates, ClassifierParams};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::protector::{calibrate_threshold, should_reclassify, ProtectorCalibration};
use crate::rng::voter_stream_seed;
use crate::scorer::{score_candidates, select_label, ScoreMode, ScoreTrace, ScorerConfig};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteRule {
    /// Plurality over voter labels; ties broken by the smaller error sum,
    /// then by base rank.
    Plurality,
    /// Sum each candidate's mean errors across voters, then select once.
    SumError,
}

/// One classified example. protected implies the final label is the base
/// top-1 and no voters ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub final_label: usize,
    pub protected: bool,
    pub base_top1: usize,
    pub voter_labels: Vec<usize>,
    pub s_value: f32,
}

fn better(a: f64, b: f64, mode: ScoreMode) -> bool {
    match mode {
        ScoreMode::Positive | ScoreMode::Combined => a < b,
        ScoreMode::Negative => a > b,
    }
}

/// Aggregate voter decisions into one label. Candidate order is base rank,
/// which settles any remaining ties.
pub fn vote(
    voter_labels: &[usize],
    traces: &[ScoreTrace],
    candidates: &crate::classifier::CandidateSet,
    rule: VoteRule,
    mode: ScoreMode,
) -> Result<usize> {
    if voter_labels.is_empty() {
        return Err(Error::Parameter("need at least one voter".into()));
    }
    if voter_labels.len() != traces.len() {
        return Err(Error::Contract("one trace per voter label required".into()));
    }
    for trace in traces {
        if trace.labels() != candidates.labels() {
            return Err(Error::Contract("trace does not belong to this candidate set".into()));
        }
    }
    let k = candidates.k();
    let error_sum = |j: usize| -> f64 { traces.iter().map(|t| t.mean_errors()[j]).sum() };
    match rule {
        VoteRule::SumError => {
            let mut best = 0;
            for j in 1..k {
                if better(error_sum(j), error_sum(best), mode) {
                    best = j;
                }
            }
            Ok(candidates.labels()[best])
        }
        VoteRule::Plurality => {
            let mut counts = vec![0usize; k];
            for &label in voter_labels {
                let j = candidates
                    .labels()
                    .iter()
                    .position(|&l| l == label)
                    .ok_or_else(|| Error::Contract(format!("voter label {label} is not a candidate")))?;
                counts[j] += 1;
            }
            let top = *counts.iter().max().unwrap();
            let mut best: Option<usize> = None;
            for j in 0..k {
                if counts[j] != top {
                    continue;
                }
                match best {
                    None => best = Some(j),
                    Some(b) => {
                        if better(error_sum(j), error_sum(b), mode) {
                            best = Some(j);
                        }
                    }
                }
            }
            Ok(candidates.labels()[best.unwrap()])
        }
    }
}

/// Classify one input: fast path if the confidence score clears the gate,
/// otherwise one scorer pass per voter seed followed by a vote.
pub fn classify_one(
    x: &[f32],
    classifier: &ClassifierParams,
    calibration: &ProtectorCalibration,
    model: &Denoiser,
    schedule: &NoiseSchedule,
    run: &RunConfig,
    voter_seeds: &[u64],
) -> Result<PredictionOutcome> {
    if voter_seeds.is_empty() {
        return Err(Error::Parameter("need at least one voter seed".into()));
    }
    let k_eff = run.k.min(classifier.num_classes());
    let candidates = topk_candidates(classifier, x, k_eff)?;
    let base_top1 = candidates.labels()[0];
    let s_value = candidates.s_value();

    if !should_reclassify(s_value, calibration) {
        return Ok(PredictionOutcome {
            final_label: base_top1,
            protected: true,
            base_top1,
            voter_labels: Vec::new(),
            s_value,
        });
    }

    // A single candidate has no others to condition against, so it is scored
    // under its positive condition alone; the selection is unaffected.
    let mode = if candidates.k() == 1 { ScoreMode::Positive } else { run.mode };
    let cfg = ScorerConfig { t_eval: run.t_eval, lambda: run.lambda, mode, k: candidates.k() };

    let mut voter_labels = Vec::with_capacity(voter_seeds.len());
    let mut traces = Vec::with_capacity(voter_seeds.len());
    for &seed in voter_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = score_candidates(x, &candidates, model, schedule, &cfg, &mut rng)?;
        voter_labels.push(select_label(&trace, &candidates, mode)?);
        traces.push(trace);
    }
    let final_label = vote(&voter_labels, &traces, &candidates, run.vote_rule, mode)?;
    Ok(PredictionOutcome { final_label, protected: false, base_top1, voter_labels, s_value })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_total: usize,
    pub n_protected: usize,
    pub n_reclassified: usize,
    pub t_t: usize,
    pub t_f: usize,
    pub f_t: usize,
    pub f_f: usize,
    pub base_accuracy: f64,
    pub final_accuracy: f64,
    pub delta: f64,
    pub config: RunConfig,
}

/// Accuracy change in percentage points implied by the off-diagonal
/// quadrants: 100 * (f_t - t_f) / n_total.
pub fn delta_percent(t_f: usize, f_t: usize, n_total: usize) -> f64 {
    if n_total == 0 {
        return 0.0;
    }
    100.0 * (f_t as f64 - t_f as f64) / n_total as f64
}

impl EvaluationReport {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Contract(msg));
        if self.n_total != self.n_protected + self.n_reclassified {
            return fail("n_total must equal n_protected + n_reclassified".into());
        }
        if self.n_reclassified != self.t_t + self.t_f + self.f_t + self.f_f {
            return fail("quadrants must sum to n_reclassified".into());
        }
        for acc in [self.base_accuracy, self.final_accuracy] {
            if !(0.0..=1.0).contains(&acc) {
                return fail(format!("accuracy {acc} outside [0, 1]"));
            }
        }
        let shift = (self.f_t as f64 - self.t_f as f64) / self.n_total as f64;
        if (self.final_accuracy - self.base_accuracy - shift).abs() > 1e-9 {
            return fail("final_accuracy must equal base_accuracy + (f_t - t_f)/n_total".into());
        }
        if (self.delta - delta_percent(self.t_f, self.f_t, self.n_total)).abs() > 1e-9 {
            return fail("delta must equal 100 * (f_t - t_f)/n_total".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<EvaluationReport> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

fn check_components(
    test: &Dataset,
    classifier: &ClassifierParams,
    model: &Denoiser,
) -> Result<()> {
    if test.len() == 0 {
        return Err(Error::Data("empty test set".into()));
    }
    if test.dim() != classifier.input_dim() || test.dim() != model.data_dim() {
        return Err(Error::Shape(format!(
            "dimension mismatch: data {}, classifier {}, denoiser {}",
            test.dim(),
            classifier.input_dim(),
            model.data_dim()
        )));
    }
    if classifier.num_classes() > model.num_classes() {
        return Err(Error::Data(format!(
            "classifier emits {} classes but the denoiser knows {}",
            classifier.num_classes(),
            model.num_classes()
        )));
    }
    if test.num_classes() > classifier.num_classes() {
        return Err(Error::Data(format!(
            "dataset has {} classes but the classifier emits {}",
            test.num_classes(),
            classifier.num_classes()
        )));
    }
    Ok(())
}

/// (protected, base correct, final correct) for example i.
fn evaluate_one(
    i: usize,
    test: &Dataset,
    classifier: &ClassifierParams,
    calibration: &ProtectorCalibration,
    model: &Denoiser,
    schedule: &NoiseSchedule,
    run: &RunConfig,
) -> Result<(bool, bool, bool)> {
    let seeds: Vec<u64> = (0..run.voters)
        .map(|v| voter_stream_seed(run.seed, i as u64, v as u64))
        .collect();
    let outcome = classify_one(test.example(i), classifier, calibration, model, schedule, run, &seeds)?;
    let label = test.label(i);
    Ok((outcome.protected, outcome.base_top1 == label, outcome.final_label == label))
}

#[cfg(feature = "parallel")]
fn evaluate_rows(
    test: &Dataset,
    classifier: &ClassifierParams,
    calibration: &ProtectorCalibration,
    model: &Denoiser,
    schedule: &NoiseSchedule,
    run: &RunConfig,
    workers: usize,
) -> Result<Vec<(bool, bool, bool)>> {
    let one = |i: usize| evaluate_one(i, test, classifier, calibration, model, schedule, run);
    match workers {
        1 => (0..test.len()).map(one).collect(),
        0 => (0..test.len()).into_par_iter().map(one).collect(),
        n => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Parameter(format!("cannot build a {n}-worker pool: {e}")))?;
            pool.install(|| (0..test.len()).into_par_iter().map(one).collect())
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn evaluate_rows(
    test: &Dataset,
    classifier: &ClassifierParams,
    calibration: &ProtectorCalibration,
    model: &Denoiser,
    schedule: &NoiseSchedule,
    run: &RunConfig,
    _workers: usize,
) -> Result<Vec<(bool, bool, bool)>> {
    (0..test.len())
        .map(|i| evaluate_one(i, test, classifier, calibration, model, schedule, run))
        .collect()
}

/// Classify every example and aggregate quadrant tallies over the
/// reclassified ones. `workers`: 1 = in-thread, 0 = shared pool, n = a
/// dedicated n-thread pool; without the parallel feature everything runs
/// in-thread.
pub fn evaluate(
    test: &Dataset,
    classifier: &ClassifierParams,
    calibration: &ProtectorCalibration,
    model: &Denoiser,
    schedule: &NoiseSchedule,
    run: &RunConfig,
    workers: usize,
) -> Result<EvaluationReport> {
    run.validate()?;
    check_components(test, classifier, model)?;
    let rows = evaluate_rows(test, classifier, calibration, model, schedule, run, workers)?;

    let (mut n_protected, mut t_t, mut t_f, mut f_t, mut f_f) = (0, 0, 0, 0, 0);
    let (mut base_correct, mut final_correct) = (0usize, 0usize);
    for (protected, base_ok, final_ok) in rows {
        base_correct += base_ok as usize;
        final_correct += final_ok as usize;
        if protected {
            n_protected += 1;
        } else {
            match (base_ok, final_ok) {
                (true, true) => t_t += 1,
                (true, false) => t_f += 1,
                (false, true) => f_t += 1,
                (false, false) => f_f += 1,
            }
        }
    }
    let n = test.len();
    let report = EvaluationReport {
        n_total: n,
        n_protected,
        n_reclassified: n - n_protected,
        t_t,
        t_f,
        f_t,
        f_f,
        base_accuracy: base_correct as f64 / n as f64,
        final_accuracy: final_correct as f64 / n as f64,
        delta: delta_percent(t_f, f_t, n),
        config: run.clone(),
    };
    report.validate()?;
    Ok(report)
}

/// One swept hyperparameter and its values.
#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    Lambda(Vec<f64>),
    Prot(Vec<f64>),
    TEval(Vec<usize>),
    Voters(Vec<usize>),
    K(Vec<usize>),
    Mode(Vec<ScoreMode>),
}

impl GridSpec {
    pub fn parse(name: &str, values: &[String]) -> Result<GridSpec> {
        if values.is_empty() {
            return Err(Error::Parameter("grid needs at least one value".into()));
        }
        let floats = || -> Result<Vec<f64>> {
            values
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("bad grid value {v}: {e}"))))
                .collect()
        };
        let ints = || -> Result<Vec<usize>> {
            values
                .iter()
                .map(|v| v.parse::<usize>().map_err(|e| Error::Parse(format!("bad grid value {v}: {e}"))))
                .collect()
        };
        match name {
            "lambda" => Ok(GridSpec::Lambda(floats()?)),
            "prot" => Ok(GridSpec::Prot(floats()?)),
            "t_eval" => Ok(GridSpec::TEval(ints()?)),
            "voters" => Ok(GridSpec::Voters(ints()?)),
            "K" | "k" => Ok(GridSpec::K(ints()?)),
            "mode" => values
                .iter()
                .map(|v| match v.as_str() {
                    "positive" => Ok(ScoreMode::Positive),
                    "negative" => Ok(ScoreMode::Negative),
                    "combined" => Ok(ScoreMode::Combined),
                    other => Err(Error::Parse(format!("unknown mode {other}"))),
                })
                .collect::<Result<Vec<_>>>()
                .map(GridSpec::Mode),
            other => Err(Error::Parameter(format!(
                "unknown grid parameter {other}; expected lambda, prot, t_eval, voters, K, or mode"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GridSpec::Lambda(_) => "lambda",
            GridSpec::Prot(_) => "prot",
            GridSpec::TEval(_) => "t_eval",
            GridSpec::Voters(_) => "voters",
            GridSpec::K(_) => "K",
            GridSpec::Mode(_) => "mode",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            GridSpec::Lambda(v) | GridSpec::Prot(v) => v.len(),
            GridSpec::TEval(v) | GridSpec::Voters(v) | GridSpec::K(v) => v.len(),
            GridSpec::Mode(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value_string(&self, i: usize) -> String {
        match self {
            GridSpec::Lambda(v) | GridSpec::Prot(v) => v[i].to_string(),
            GridSpec::TEval(v) | GridSpec::Voters(v) | GridSpec::K(v) => v[i].to_string(),
            GridSpec::Mode(v) => match v[i] {
                ScoreMode::Positive => "positive".into(),
                ScoreMode::Negative => "negative".into(),
                ScoreMode::Combined => "combined".into(),
            },
        }
    }

    /// The base configuration with grid point i substituted in, re-validated.
    pub fn apply(&self, i: usize, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            GridSpec::Lambda(v) => cfg.lambda = v[i],
            GridSpec::Prot(v) => cfg.prot = v[i],
            GridSpec::TEval(v) => cfg.t_eval = v[i],
            GridSpec::Voters(v) => cfg.voters = v[i],
            GridSpec::K(v) => cfg.k = v[i],
            GridSpec::Mode(v) => cfg.mode = v[i],
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One evaluate per grid point with everything else (seeds included) held
/// fixed. The protector is recalibrated per point from the given scores so
/// prot sweeps take effect.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    test: &Dataset,
    classifier: &ClassifierParams,
    correct_scores: &[f32],
    model: &Denoiser,
    schedule: &NoiseSchedule,
    base: &RunConfig,
    grid: &GridSpec,
    workers: usize,
) -> Result<Vec<EvaluationReport>> {
    let mut reports = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let cfg = grid.apply(i, base)?;
        let calibration = calibrate_threshold(correct_scores, cfg.prot, cfg.threshold_mode)?;
        reports.push(evaluate(test, classifier, &calibration, model, schedule, &cfg, workers)?);
    }
    Ok(reports)
}

/// Comparison table over the grid, one row per point.
pub fn ablation_csv(grid: &GridSpec, reports: &[EvaluationReport]) -> String {
    let mut out = String::from(
        "param,value,n_total,n_protected,n_reclassified,t_t,t_f,f_t,f_f,base_accuracy,final_accuracy,delta\n",
    );
    for (i, r) in reports.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            grid.name(),
            grid.value_string(i),
            r.n_total,
            r.n_protected,
            r.n_reclassified,
            r.t_t,
            r.t_f,
            r.f_t,
            r.f_f,
            r.base_accuracy,
            r.final_accuracy,
            r.delta
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::CandidateSet;
    use crate::data::generate_gaussian_dataset;
    use crate::diffusion::{make_linear_schedule, GaussianParams};
    use crate::protector::ThresholdMode;
    use crate::scorer::trace_for_tests;

    fn world() -> (Dataset, ClassifierParams, Denoiser, NoiseSchedule, RunConfig) {
        let means = vec![vec![1.0_f32, 1.0], vec![-1.0, -1.0]];
        let test = generate_gaussian_dataset(&means, 0.8, 20, 7).unwrap();
        let classifier =
            ClassifierParams::linear(2, 2, vec![1.0, 1.0, -1.0, -1.0], vec![0.0, 0.0]).unwrap();
        let model = Denoiser::analytic_gaussian(GaussianParams::new(means, 0.8).unwrap());
        let schedule = make_linear_schedule(50, 1e-3, 0.02).unwrap();
        let run = RunConfig {
            t_eval: 3,
            t_max: 50,
            k: 2,
            voters: 3,
            prot: 0.9,
            data_dim: 2,
            ..RunConfig::default()
        };
        (test, classifier, model, schedule, run)
    }

    fn quantile_calibration(
        classifier: &ClassifierParams,
        train: &Dataset,
        prot: f64,
    ) -> ProtectorCalibration {
        let scores = crate::protector::collect_correct_scores(classifier, train).unwrap();
        calibrate_threshold(&scores, prot, ThresholdMode::Quantile).unwrap()
    }

    #[test]
    fn paper_delta_vectors() {
        assert!((delta_percent(1101, 1638, 50000) - 1.074).abs() < 1e-12);
        assert!((delta_percent(10671, 2696, 50000) + 15.95).abs() < 1e-12);
        assert_eq!(delta_percent(5, 5, 100), 0.0);
    }

    #[test]
    fn vote_majority_and_single_voter() {
        let c = CandidateSet::new(vec![3, 8], vec![0.6, 0.4], 0.6).unwrap();
        let t = trace_for_tests(vec![3, 8], vec![10], vec![vec![0.5], vec![0.5]]);
        let traces = vec![t.clone(), t.clone(), t.clone(), t.clone(), t.clone()];
        let labels = vec![3, 3, 8, 8, 3];
        assert_eq!(vote(&labels, &traces, &c, VoteRule::Plurality, ScoreMode::Combined).unwrap(), 3);
        assert_eq!(vote(&labels[..1], &traces[..1], &c, VoteRule::Plurality, ScoreMode::Combined).unwrap(), 3);
        assert_eq!(vote(&[8], &traces[..1], &c, VoteRule::Plurality, ScoreMode::Combined).unwrap(), 8);
        assert!(vote(&[], &[], &c, VoteRule::Plurality, ScoreMode::Combined).is_err());
    }

    #[test]
    fn vote_tie_breaks_by_summed_error_then_base_rank() {
        let c = CandidateSet::new(vec![3, 8], vec![0.6, 0.4], 0.6).unwrap();
        // Candidate 8 accumulates strictly smaller mean error.
        let t1 = trace_for_tests(vec![3, 8], vec![10], vec![vec![0.9], vec![0.1]]);
        let t2 = trace_for_tests(vec![3, 8], vec![10], vec![vec![0.4], vec![0.3]]);
        let labels = vec![3, 8];
        let traces = vec![t1, t2];
        assert_eq!(vote(&labels, &traces, &c, VoteRule::Plurality, ScoreMode::Combined).unwrap(), 8);
        // Negative mode prefers the larger error sum.
        assert_eq!(vote(&labels, &traces, &c, VoteRule::Plurality, ScoreMode::Negative).unwrap(), 3);
        // Equal sums fall back to base rank.
        let even = trace_for_tests(vec![3, 8], vec![10], vec![vec![0.5], vec![0.5]]);
        let traces = vec![even.clone(), even];
        assert_eq!(vote(&labels, &traces, &c, VoteRule::Plurality, ScoreMode::Combined).unwrap(), 3);
    }

    #[test]
    fn sum_error_rule_ignores_label_counts() {
        let c = CandidateSet::new(vec![3, 8], vec![0.6, 0.4], 0.6).unwrap();
        // Two voters for 3, one for 8, but 8 wins on total error.
        let t1 = trace_for_tests(vec![3, 8], vec![10], vec![vec![0.2], vec![0.6]]);
        let t2 = trace_for_tests(vec![3, 8], vec![10], vec![vec![0.3], vec![0.5]]);
        let t3 = trace_for_tests(vec![3, 8], vec![10], vec![vec![0.9], vec![0.1]]);
        let labels = vec![3, 3, 8];
        let traces = vec![t1, t2, t3];
        assert_eq!(vote(&labels, &traces, &c, VoteRule::Plurality, ScoreMode::Combined).unwrap(), 3);
        assert_eq!(vote(&labels, &traces, &c, VoteRule::SumError, ScoreMode::Combined).unwrap(), 8);
    }

    #[test]
    fn protected_outcome_never_touches_the_denoiser() {
        let (test, classifier, model, schedule, run) = world();
        // Absolute threshold far below any achievable confidence.
        let calibration = calibrate_threshold(&[], 1e-6, ThresholdMode::Absolute).unwrap();
        model.reset_call_count();
        let seeds = [1, 2, 3];
        let out =
            classify_one(test.example(0), &classifier, &calibration, &model, &schedule, &run, &seeds)
                .unwrap();
        assert!(out.protected);
        assert_eq!(out.final_label, out.base_top1);
        assert!(out.voter_labels.is_empty());
        assert_eq!(model.call_count(), 0);
    }

    #[test]
    fn always_sentinel_single_voter_matches_direct_selection() {
        let (test, classifier, model, schedule, mut run) = world();
        run.voters = 1;
        let calibration = calibrate_threshold(&[], 0.0, ThresholdMode::Absolute).unwrap();
        let seeds = [99];
        let out =
            classify_one(test.example(3), &classifier, &calibration, &model, &schedule, &run, &seeds)
                .unwrap();
        assert!(!out.protected);
        let candidates = topk_candidates(&classifier, test.example(3), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trace =
            score_candidates(test.example(3), &candidates, &model, &schedule, &run.scorer_config(), &mut rng)
                .unwrap();
        let direct = select_label(&trace, &candidates, run.mode).unwrap();
        assert_eq!(out.final_label, direct);
        assert_eq!(out.voter_labels, vec![direct]);
    }

    #[test]
    fn classify_one_is_deterministic() {
        let (test, classifier, model, schedule, run) = world();
        let calibration = calibrate_threshold(&[], 0.0, ThresholdMode::Absolute).unwrap();
        let seeds = [5, 6, 7];
        let run_once = || {
            classify_one(test.example(1), &classifier, &calibration, &model, &schedule, &run, &seeds)
                .unwrap()
        };
        assert_eq!(run_once(), run_once());
    }

    #[test]
    fn equal_voter_seeds_degenerate_to_one_voter() {
        let (test, classifier, model, schedule, mut run) = world();
        let calibration = calibrate_threshold(&[], 0.0, ThresholdMode::Absolute).unwrap();
        run.voters = 5;
        let many =
            classify_one(test.example(2), &classifier, &calibration, &model, &schedule, &run, &[4; 5])
                .unwrap();
        run.voters = 1;
        let one =
            classify_one(test.example(2), &classifier, &calibration, &model, &schedule, &run, &[4])
                .unwrap();
        assert_eq!(many.final_label, one.final_label);
        assert!(many.voter_labels.iter().all(|&l| l == many.voter_labels[0]));
    }

    #[test]
    fn evaluate_endpoints() {
        let (test, classifier, model, schedule, mut run) = world();
        run.prot = 1.0;
        let never = calibrate_threshold(&[], 1.0, ThresholdMode::Absolute).unwrap();
        model.reset_call_count();
        let report = evaluate(&test, &classifier, &never, &model, &schedule, &run, 1).unwrap();
        assert_eq!(report.n_reclassified, 0);
        assert_eq!(report.n_protected, report.n_total);
        assert_eq!(report.final_accuracy, report.base_accuracy);
        assert_eq!(report.delta, 0.0);
        assert_eq!(model.call_count(), 0);

        run.prot = 0.0;
        let always = calibrate_threshold(&[], 0.0, ThresholdMode::Absolute).unwrap();
        let report = evaluate(&test, &classifier, &always, &model, &schedule, &run, 1).unwrap();
        assert_eq!(report.n_protected, 0);
        assert_eq!(report.n_reclassified, report.n_total);
        assert!(model.call_count() > 0);
    }

    #[test]
    fn evaluate_accounting_holds_and_round_trips() {
        let (test, classifier, model, schedule, mut run) = world();
        let means = vec![vec![1.0_f32, 1.0], vec![-1.0, -1.0]];
        let train = generate_gaussian_dataset(&means, 0.8, 30, 11).unwrap();
        run.threshold_mode = ThresholdMode::Quantile;
        run.prot = 0.6;
        let calibration = quantile_calibration(&classifier, &train, run.prot);
        let report = evaluate(&test, &classifier, &calibration, &model, &schedule, &run, 1).unwrap();
        report.validate().unwrap();
        assert_eq!(report.n_reclassified, report.t_t + report.t_f + report.f_t + report.f_f);
        let back = EvaluationReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn raising_prot_never_reclassifies_more() {
        let (test, classifier, model, schedule, mut run) = world();
        let means = vec![vec![1.0_f32, 1.0], vec![-1.0, -1.0]];
        let train = generate_gaussian_dataset(&means, 0.8, 30, 11).unwrap();
        run.threshold_mode = ThresholdMode::Quantile;
        let mut last = usize::MAX;
        for prot in [0.0, 0.25, 0.5, 0.75, 0.9, 1.0] {
            run.prot = prot;
            let calibration = quantile_calibration(&classifier, &train, prot);
            let report = evaluate(&test, &classifier, &calibration, &model, &schedule, &run, 1).unwrap();
            assert!(
                report.n_reclassified <= last,
                "prot={prot} reclassified {} > {last}",
                report.n_reclassified
            );
            last = report.n_reclassified;
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn worker_count_does_not_change_the_report() {
        let (test, classifier, model, schedule, run) = world();
        let calibration = calibrate_threshold(&[], 0.0, ThresholdMode::Absolute).unwrap();
        let serial = evaluate(&test, &classifier, &calibration, &model, &schedule, &run, 1).unwrap();
        let pooled = evaluate(&test, &classifier, &calibration, &model, &schedule, &run, 4).unwrap();
        let global = evaluate(&test, &classifier, &calibration, &model, &schedule, &run, 0).unwrap();
        assert_eq!(serial.to_json().unwrap(), pooled.to_json().unwrap());
        assert_eq!(serial.to_json().unwrap(), global.to_json().unwrap());
    }

    #[test]
    fn grid_parsing_and_errors() {
        let g = GridSpec::parse("lambda", &["1.0".into(), "2.5".into()]).unwrap();
        assert_eq!(g, GridSpec::Lambda(vec![1.0, 2.5]));
        assert_eq!(g.len(), 2);
        assert_eq!(g.value_string(1), "2.5");
        assert!(matches!(
            GridSpec::parse("gamma", &["1".into()]),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(GridSpec::parse("lambda", &[]), Err(Error::Parameter(_))));
        assert!(matches!(
            GridSpec::parse("t_eval", &["x".into()]),
            Err(Error::Parse(_))
        ));
        let m = GridSpec::parse("mode", &["positive".into(), "combined".into()]).unwrap();
        assert_eq!(m, GridSpec::Mode(vec![ScoreMode::Positive, ScoreMode::Combined]));
        let k = GridSpec::parse("K", &["3".into()]).unwrap();
        assert_eq!(k, GridSpec::K(vec![3]));
    }

    #[test]
    fn grid_apply_revalidates() {
        let base = RunConfig::default();
        let g = GridSpec::parse("lambda", &["0.5".into()]).unwrap();
        assert!(matches!(g.apply(0, &base), Err(Error::Validation(_))));
        let g = GridSpec::parse("t_eval", &["5".into()]).unwrap();
        assert_eq!(g.apply(0, &base).unwrap().t_eval, 5);
    }

    #[test]
    fn ablate_prot_endpoints_and_echo() {
        let (test, classifier, model, schedule, mut run) = world();
        run.threshold_mode = ThresholdMode::Absolute;
        let means = vec![vec![1.0_f32, 1.0], vec![-1.0, -1.0]];
        let train = generate_gaussian_dataset(&means, 0.8, 30, 11).unwrap();
        let scores = crate::protector::collect_correct_scores(&classifier, &train).unwrap();
        let grid = GridSpec::parse("prot", &["0".into(), "1".into()]).unwrap();
        let reports =
            ablate(&test, &classifier, &scores, &model, &schedule, &run, &grid, 1).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].n_protected, 0);
        assert_eq!(reports[1].n_reclassified, 0);
        assert_eq!(reports[1].final_accuracy, reports[1].base_accuracy);
        assert_eq!(reports[0].config.prot, 0.0);
        assert_eq!(reports[1].config.prot, 1.0);
        let csv = ablation_csv(&grid, &reports);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("param,value,"));
        assert!(lines[1].starts_with("prot,0,"));
        assert!(lines[2].starts_with("prot,1,"));

        let te = GridSpec::parse("t_eval", &["2".into(), "3".into()]).unwrap();
        let reports = ablate(&test, &classifier, &scores, &model, &schedule, &run, &te, 1).unwrap();
        assert_eq!(reports[0].config.t_eval, 2);
        assert_eq!(reports[1].config.t_eval, 3);
    }
}
