//! Monte Carlo experiments over runs, detection rates and filter variants.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tpmb_core::linalg::RngStream;
use tpmb_core::models::Model;

use crate::config::Config;
use crate::run::{evaluate, run_filter, RunReport, Totals};
use crate::scenario::{generate_measurements, generate_scenario};
use crate::HarnessError;

const TAG_TRUTH: u64 = 11;
const TAG_MEAS: u64 = 12;
const TAG_FILTER: u64 = 13;

/// Seed and base stream of run `r`.
pub fn run_stream(cfg: &Config, r: usize) -> RngStream {
    match cfg.mc.seeds.get(r) {
        Some(&s) => RngStream::new(s, 0),
        None => RngStream::new(cfg.mc.seed, 0).derive(&[r as u64]),
    }
}

pub fn truth_stream(cfg: &Config, r: usize) -> RngStream {
    let base = if cfg.scenario.fixed_truth { 0 } else { r };
    run_stream(cfg, base).derive(&[TAG_TRUTH])
}

pub fn measurement_stream(cfg: &Config, r: usize, gamma: f64) -> RngStream {
    run_stream(cfg, r).derive(&[TAG_MEAS, gamma.to_bits()])
}

/// Shared by all variants of a run so they see the same random numbers.
pub fn filter_stream(cfg: &Config, r: usize, gamma: f64) -> RngStream {
    run_stream(cfg, r).derive(&[TAG_FILTER, gamma.to_bits()])
}

pub fn model_for(cfg: &Config, gamma: f64) -> Result<Model, HarnessError> {
    let mut p = cfg.model.clone();
    p.gamma = gamma;
    Ok(Model::new(p)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub variant: Option<String>,
    pub gamma: f64,
    pub run: usize,
    pub error: String,
}

/// Executes every variant on run `r` at detection rate `gamma`.
pub fn run_one(cfg: &Config, r: usize, gamma: f64) -> Vec<Result<RunReport, RunFailure>> {
    let fail = |variant: Option<&str>, e: HarnessError| RunFailure {
        variant: variant.map(str::to_string),
        gamma,
        run: r,
        error: e.to_string(),
    };
    let setup = || -> Result<_, HarnessError> {
        let model = model_for(cfg, gamma)?;
        let truth = generate_scenario(&cfg.scenario, &model, &truth_stream(cfg, r))?;
        let frames = generate_measurements(&truth, &model, &measurement_stream(cfg, r, gamma))?;
        Ok((model, truth, frames))
    };
    let (model, truth, frames) = match setup() {
        Ok(s) => s,
        Err(e) => return vec![Err(fail(None, e))],
    };
    let seed = run_stream(cfg, r).seed;
    let draws = cfg.mc.smoothing.then_some(cfg.mc.smoothing_draws);
    cfg.mc
        .variants
        .iter()
        .map(|v| {
            run_filter(&frames, &model, v, &cfg.filter, draws, &filter_stream(cfg, r, gamma))
                .and_then(|out| evaluate(&out, &truth, &cfg.metric, gamma, r, seed))
                .map_err(|e| fail(Some(v), e))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (0 for fewer than two values).
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: String,
    pub gamma: f64,
    pub runs: usize,
    pub failed: usize,
    pub partial: bool,
    /// Mean over runs of the summed normalized metric and its parts.
    pub totals: Totals,
    pub total_stat: Stat,
    /// Mean normalized metric per step.
    pub mean_series: Vec<f64>,
    pub smoothed_final: Option<Stat>,
    pub filtered_final: Stat,
    pub runtime: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub aggregates: Vec<Aggregate>,
    pub reports: Vec<RunReport>,
    pub failures: Vec<RunFailure>,
}

impl McResult {
    pub fn aggregate(&self, variant: &str, gamma: f64) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.variant == variant && a.gamma == gamma)
    }
}

pub fn aggregate(variant: &str, gamma: f64, reports: &[&RunReport], failed: usize) -> Aggregate {
    let n = reports.len();
    let mean = |f: &dyn Fn(&RunReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n as f64;
    let totals = Totals {
        total: mean(&|r| r.totals.total),
        localization: mean(&|r| r.totals.localization),
        miss: mean(&|r| r.totals.miss),
        false_: mean(&|r| r.totals.false_),
        switch: mean(&|r| r.totals.switch),
    };
    let len = reports.iter().map(|r| r.series.len()).max().unwrap_or(0);
    let mean_series = (0..len)
        .map(|i| {
            let v: Vec<f64> = reports.iter().filter_map(|r| r.series.get(i).map(|s| s.total)).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    let smoothed: Vec<f64> = reports.iter().filter_map(|r| r.smoothed_final.as_ref().map(|s| s.total)).collect();
    let filtered: Vec<f64> = reports.iter().filter_map(|r| r.series.last().map(|s| s.total)).collect();
    let runtimes: Vec<f64> = reports.iter().map(|r| r.wall_time).collect();
    let total_values: Vec<f64> = reports.iter().map(|r| r.totals.total).collect();
    Aggregate {
        variant: variant.to_string(),
        gamma,
        runs: n,
        failed,
        partial: failed > 0,
        totals,
        total_stat: Stat::of(&total_values),
        mean_series,
        smoothed_final: (!smoothed.is_empty()).then(|| Stat::of(&smoothed)),
        filtered_final: Stat::of(&filtered),
        runtime: Stat::of(&runtimes),
    }
}

/// Runs `cfg.mc.runs` runs per detection rate in parallel, then reduces.
pub fn monte_carlo(cfg: &Config) -> Result<McResult, HarnessError> {
    cfg.validate()?;
    let jobs: Vec<(f64, usize)> =
        cfg.mc.gamma_grid.iter().flat_map(|&g| (0..cfg.mc.runs).map(move |r| (g, r))).collect();
    let work = || jobs.par_iter().map(|&(g, r)| run_one(cfg, r, g)).collect::<Vec<_>>();
    let results = if cfg.mc.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.mc.threads)
            .build()
            .map_err(|e| HarnessError::Config(e.to_string()))?
            .install(work)
    } else {
        work()
    };
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for r in results.into_iter().flatten() {
        match r {
            Ok(rep) => reports.push(rep),
            Err(f) => failures.push(f),
        }
    }
    let mut aggregates = Vec::new();
    for &g in &cfg.mc.gamma_grid {
        for v in &cfg.mc.variants {
            let ok: Vec<&RunReport> = reports.iter().filter(|r| r.gamma == g && &r.variant == v).collect();
            let failed = failures
                .iter()
                .filter(|f| f.gamma == g && f.variant.as_deref().is_none_or(|fv| fv == v))
                .count();
            aggregates.push(aggregate(v, g, &ok, failed));
        }
    }
    Ok(McResult { aggregates, reports, failures })
}
