use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tpmb_core::metrics::TrajectoryRecord;
use tpmb_harness::config::{Config, Profile};
use tpmb_harness::io::{
    frame_lines, frames_from_lines, group_by_step, read_jsonl, truth_from_lines, truth_lines, write_jsonl,
    write_report_csv, FrameLine, TrajectoryLine,
};
use tpmb_harness::mc::{filter_stream, measurement_stream, model_for, monte_carlo, run_stream, truth_stream};
use tpmb_harness::run::{run_filter, score_steps, RunReport, Totals};
use tpmb_harness::scenario::{generate_measurements, generate_scenario};
use tpmb_harness::HarnessError;

#[derive(Parser)]
#[command(name = "tpmb", version, about = "Trajectory PMB tracking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file layered over the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset: desk (default scenario, 20 runs) or smoke (2 objects, K=30, 2 runs).
    #[arg(long)]
    profile: Option<Profile>,
    /// Override any config key, e.g. `--set filter.bp.iterations=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for `mc.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `mc.runs`.
    #[arg(long)]
    runs: Option<usize>,
    /// Shorthand for `mc.gamma_grid`; comma separated.
    #[arg(long, value_delimiter = ',')]
    gamma: Vec<f64>,
    /// Shorthand for `mc.variants`; comma separated.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Shorthand for `mc.threads`.
    #[arg(long)]
    threads: Option<usize>,
    /// Shorthand for `mc.smoothing=true`.
    #[arg(long)]
    smooth: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config, HarnessError> {
        let text = self.config.as_ref().map(fs::read_to_string).transpose()?;
        let mut sets = self.sets.clone();
        if let Some(s) = self.seed {
            sets.push(format!("mc.seed={s}"));
        }
        if let Some(r) = self.runs {
            sets.push(format!("mc.runs={r}"));
        }
        if !self.gamma.is_empty() {
            let g: Vec<String> = self.gamma.iter().map(|g| format!("{g:?}")).collect();
            sets.push(format!("mc.gamma_grid=[{}]", g.join(",")));
        }
        if !self.variants.is_empty() {
            let v: Vec<String> = self.variants.iter().map(|v| format!("{v:?}")).collect();
            sets.push(format!("mc.variants=[{}]", v.join(",")));
        }
        if let Some(t) = self.threads {
            sets.push(format!("mc.threads={t}"));
        }
        if self.smooth {
            sets.push("mc.smoothing=true".into());
        }
        Config::layered(self.profile, text.as_deref(), &sets)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate ground truth and measurements.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run index whose seed stream is used.
        #[arg(long, default_value_t = 0)]
        run: usize,
        /// Output directory for truth.jsonl and frames.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a filter over a frames file and write estimates.
    Track {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        frames: PathBuf,
        /// Filter variant (first entry of mc.variants when omitted).
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, default_value_t = 0)]
        run: usize,
        /// Estimates JSONL output.
        #[arg(long)]
        out: PathBuf,
        /// Write only the estimate set of the last step.
        #[arg(long)]
        final_only: bool,
        /// Also write smoothed final estimates to this JSONL file.
        #[arg(long)]
        smoothed_out: Option<PathBuf>,
    },
    /// Score estimates against ground truth.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Per-step CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Report JSON output (stdout when omitted).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// End-to-end Monte Carlo experiment.
    Mc {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory: aggregate.json, config.toml and runs/*.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>, HarnessError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| HarnessError::Input(format!("{}: {e}", path.display())))
}

fn gamma_of(cfg: &Config) -> f64 {
    cfg.mc.gamma_grid[0]
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Simulate { cfg, run, out } => {
            let cfg = cfg.load()?;
            let gamma = gamma_of(&cfg);
            let model = model_for(&cfg, gamma)?;
            let truth = generate_scenario(&cfg.scenario, &model, &truth_stream(&cfg, run))?;
            let frames = generate_measurements(&truth, &model, &measurement_stream(&cfg, run, gamma))?;
            write_jsonl(create(&out.join("truth.jsonl"))?, truth_lines(&truth))?;
            write_jsonl(create(&out.join("frames.jsonl"))?, frame_lines(&frames))?;
            println!("{}", serde_json::json!({ "trajectories": truth.trajectories.len(), "steps": frames.len() }));
        }
        Command::Track { cfg, frames, variant, run, out, final_only, smoothed_out } => {
            let cfg = cfg.load()?;
            let gamma = gamma_of(&cfg);
            let model = model_for(&cfg, gamma)?;
            let lines: Vec<FrameLine> = read_jsonl(open(&frames)?)?;
            let frames = frames_from_lines(&lines)?;
            let variant = variant.unwrap_or_else(|| cfg.mc.variants[0].clone());
            let draws = smoothed_out.as_ref().map(|_| cfg.mc.smoothing_draws);
            let output = run_filter(&frames, &model, &variant, &cfg.filter, draws, &filter_stream(&cfg, run, gamma))?;
            let skip = if final_only { output.per_step.len().saturating_sub(1) } else { 0 };
            let est = output
                .per_step
                .iter()
                .enumerate()
                .skip(skip)
                .flat_map(|(i, set)| set.iter().map(move |e| TrajectoryLine::estimate(Some(i + 1), e)));
            write_jsonl(create(&out)?, est)?;
            if let (Some(path), Some(s)) = (smoothed_out, &output.smoothed) {
                let k = output.per_step.len();
                write_jsonl(create(&path)?, s.iter().map(|e| TrajectoryLine::estimate(Some(k), e)))?;
            }
            println!(
                "{}",
                serde_json::json!({ "variant": variant, "steps": frames.len(), "wall_time": output.wall_time })
            );
        }
        Command::Evaluate { cfg, estimates, truth, csv, report } => {
            let cfg = cfg.load()?;
            let truth_lines: Vec<TrajectoryLine> = read_jsonl(open(&truth)?)?;
            let est_lines: Vec<TrajectoryLine> = read_jsonl(open(&estimates)?)?;
            let last_est = est_lines.iter().filter_map(|l| l.step).max();
            let truth = truth_from_lines(&truth_lines, last_est.or(Some(cfg.scenario.horizon)))?;
            let mut steps = group_by_step(&est_lines, truth.horizon);
            if steps.is_empty() {
                steps.push((truth.horizon, Vec::<TrajectoryRecord>::new()));
            }
            let series = score_steps(&steps, &truth, &cfg.metric)?;
            let rep = RunReport {
                variant: "file".into(),
                gamma: gamma_of(&cfg),
                run: 0,
                seed: cfg.mc.seed,
                totals: Totals::of(&series),
                series,
                smoothed_final: None,
                smoothing_fallbacks: 0,
                wall_time: 0.0,
            };
            if let Some(path) = csv {
                write_report_csv(create(&path)?, &rep)?;
            }
            match report {
                Some(path) => serde_json::to_writer_pretty(create(&path)?, &rep)?,
                None => println!("{}", serde_json::to_string_pretty(&rep)?),
            }
        }
        Command::Mc { cfg, out } => {
            let cfg = cfg.load()?;
            let result = monte_carlo(&cfg)?;
            fs::create_dir_all(out.join("runs"))?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            for rep in &result.reports {
                let name = format!("{}_g{}_r{:03}.csv", rep.variant, rep.gamma, rep.run);
                write_report_csv(create(&out.join("runs").join(name))?, rep)?;
            }
            let aggregate = serde_json::json!({
                "aggregates": result.aggregates,
                "failures": result.failures,
                "seeds": (0..cfg.mc.runs).map(|r| run_stream(&cfg, r)).collect::<Vec<_>>(),
            });
            serde_json::to_writer_pretty(create(&out.join("aggregate.json"))?, &aggregate)?;
            for a in &result.aggregates {
                println!(
                    "{} gamma={} total={:.1} loc={:.1} miss={:.1} false={:.1} switch={:.1} runtime={:.2}s{}",
                    a.variant,
                    a.gamma,
                    a.totals.total,
                    a.totals.localization,
                    a.totals.miss,
                    a.totals.false_,
                    a.totals.switch,
                    a.runtime.mean,
                    if a.partial { " (partial)" } else { "" }
                );
            }
            if !result.failures.is_empty() {
                return Err(HarnessError::Input(format!("{} run(s) failed; see aggregate.json", result.failures.len())));
            }
        }
        Command::Config { cfg } => print!("{}", cfg.load()?.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
