//! Single filter runs and their evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use tpmb_core::filter::{make_filter, FilterOptions, TrajectoryEstimate};
use tpmb_core::linalg::RngStream;
use tpmb_core::metrics::{lp_metric, MetricDecomposition, MetricParams, TrajectoryRecord};
use tpmb_core::models::{Measurement, Model};

use crate::scenario::GroundTruth;
use crate::HarnessError;

const TAG_FILTER: u64 = 1;
const TAG_SMOOTH: u64 = 2;

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub variant: String,
    /// Entry `k - 1` is the estimate set reported after step `k`.
    pub per_step: Vec<Vec<TrajectoryEstimate>>,
    /// Backward-simulation estimates after the last step, when requested.
    pub smoothed: Option<Vec<TrajectoryEstimate>>,
    /// Smoothed steps that fell back to the filtering mean.
    pub smoothing_fallbacks: usize,
    /// Filtering wall time in seconds (smoothing excluded).
    pub wall_time: f64,
    pub smoothing_time: f64,
}

/// Runs `variant` over `frames` (frame `k - 1` is step `k`).
pub fn run_filter(
    frames: &[Vec<Measurement>],
    model: &Model,
    variant: &str,
    options: &FilterOptions,
    smoothing_draws: Option<usize>,
    rng: &RngStream,
) -> Result<RunOutput, HarnessError> {
    let mut opts = options.clone();
    if smoothing_draws.is_some() {
        opts.store_snapshots = true;
    }
    let started = Instant::now();
    let mut filter = make_filter(variant, model.clone(), opts, rng.derive(&[TAG_FILTER]))?;
    let mut per_step = Vec::with_capacity(frames.len());
    for frame in frames {
        filter.step(frame)?;
        per_step.push(filter.estimates()?);
    }
    let wall_time = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let (smoothed, smoothing_fallbacks) = match smoothing_draws {
        Some(draws) => {
            let s = filter.smoothed_estimates(draws, &rng.derive(&[TAG_SMOOTH]))?;
            let fallbacks = s.iter().map(|e| e.fallback_steps.len()).sum();
            (Some(s.into_iter().map(|e| e.estimate).collect()), fallbacks)
        }
        None => (None, 0),
    };
    Ok(RunOutput {
        variant: variant.to_string(),
        per_step,
        smoothed,
        smoothing_fallbacks,
        wall_time,
        smoothing_time: started.elapsed().as_secs_f64(),
    })
}

/// Metric on `[1, step]` divided by `step`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub step: usize,
    pub total: f64,
    pub localization: f64,
    pub miss: f64,
    pub false_: f64,
    pub switch: f64,
}

impl StepScore {
    fn normalized(step: usize, d: &MetricDecomposition) -> Self {
        let k = step as f64;
        Self {
            step,
            total: d.total / k,
            localization: d.localization / k,
            miss: d.miss / k,
            false_: d.false_ / k,
            switch: d.switch / k,
        }
    }
}

/// Sums of the normalized per-step scores.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub total: f64,
    pub localization: f64,
    pub miss: f64,
    pub false_: f64,
    pub switch: f64,
}

impl Totals {
    pub fn of(series: &[StepScore]) -> Self {
        let mut t = Totals::default();
        for s in series {
            t.total += s.total;
            t.localization += s.localization;
            t.miss += s.miss;
            t.false_ += s.false_;
            t.switch += s.switch;
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub gamma: f64,
    pub run: usize,
    pub seed: u64,
    pub series: Vec<StepScore>,
    pub totals: Totals,
    /// Smoothed estimates after the last step, scored over the whole horizon.
    pub smoothed_final: Option<StepScore>,
    pub smoothing_fallbacks: usize,
    pub wall_time: f64,
}

/// Scores every recorded step against the truth known up to that step.
pub fn score_steps(
    steps: &[(usize, Vec<TrajectoryRecord>)],
    truth: &GroundTruth,
    params: &MetricParams,
) -> Result<Vec<StepScore>, HarnessError> {
    steps
        .iter()
        .map(|(k, est)| {
            let d = lp_metric(est, &truth.up_to(*k), *k, params)?.decomposition;
            Ok(StepScore::normalized(*k, &d))
        })
        .collect()
}

pub fn records(estimates: &[TrajectoryEstimate]) -> Vec<TrajectoryRecord> {
    estimates.iter().map(TrajectoryRecord::from).collect()
}

pub fn evaluate(
    output: &RunOutput,
    truth: &GroundTruth,
    params: &MetricParams,
    gamma: f64,
    run: usize,
    seed: u64,
) -> Result<RunReport, HarnessError> {
    let steps: Vec<(usize, Vec<TrajectoryRecord>)> =
        output.per_step.iter().enumerate().map(|(i, e)| (i + 1, records(e))).collect();
    let series = score_steps(&steps, truth, params)?;
    let smoothed_final = match &output.smoothed {
        Some(s) => {
            let k = output.per_step.len();
            score_steps(&[(k, records(s))], truth, params)?.pop()
        }
        None => None,
    };
    Ok(RunReport {
        variant: output.variant.clone(),
        gamma,
        run,
        seed,
        totals: Totals::of(&series),
        series,
        smoothed_final,
        smoothing_fallbacks: output.smoothing_fallbacks,
        wall_time: output.wall_time,
    })
}
