use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use hill_core::config::{Mode, TrainConfig};
use hill_core::policy::DEFAULT_ENUMERATION_BUDGET;
use hill_core::reliance::identity_sweep;
use hill_core::trainer::{read_metrics, run_training, summarize, RunSummary, StepMetrics};
use hill_core::HillError;

mod exit {
    pub const CONFIG: u8 = 2;
    pub const VERIFICATION: u8 = 3;
    pub const BUDGET: u8 = 4;
    pub const OTHER: u8 = 1;
}

#[derive(Parser)]
#[command(name = "hill", version, about = "Hinter/reasoner co-training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its artifacts under --out-dir.
    Train(TrainArgs),
    /// Train every (mode, seed) pair and write a per-mode summary CSV.
    Compare(CompareArgs),
    /// Check the reliance decomposition and transfer bound by enumeration.
    VerifyIdentity(VerifyArgs),
    /// Convert a metrics JSONL file into CSV columns.
    ExportCsv(ExportArgs),
}

#[derive(Args, Clone)]
struct Overrides {
    /// TOML run configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Transfer temperature.
    #[arg(long = "T")]
    t: Option<f64>,
    /// Rollouts per question.
    #[arg(long = "G")]
    g: Option<usize>,
    /// Hint candidates per failed question.
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long = "r-fail", allow_hyphen_values = true)]
    r_fail: Option<f64>,
}

impl Overrides {
    fn resolve(&self) -> Result<TrainConfig, HillError> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(x) = self.seed {
            cfg.seed = x;
        }
        if let Some(x) = self.steps {
            cfg.steps = x;
        }
        if let Some(x) = self.t {
            cfg.temperature = x;
        }
        if let Some(x) = self.g {
            cfg.g = x;
        }
        if let Some(x) = self.m {
            cfg.m = x;
        }
        if let Some(x) = self.r_fail {
            cfg.r_fail = x;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Overrides,
    /// GRPO, HiLL or HiLL_noTW.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Overrides,
    /// Comma-separated modes; at least two.
    #[arg(long, value_delimiter = ',', default_value = "GRPO,HiLL,HiLL_noTW")]
    modes: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Response length of the random policies.
    #[arg(long, default_value_t = 3)]
    max_len: usize,
    /// Half-width of the uniform parameter distribution.
    #[arg(long, default_value_t = 1.5)]
    scale: f64,
}

#[derive(Args)]
struct ExportArgs {
    /// metrics.jsonl of a run.
    #[arg(long)]
    metrics: PathBuf,
    /// Output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Compare(a) => cmd_compare(a),
        Command::VerifyIdentity(a) => cmd_verify(a),
        Command::ExportCsv(a) => cmd_export(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                HillError::Config(_) | HillError::Io { .. } => exit::CONFIG,
                HillError::BudgetExceeded { .. } => exit::BUDGET,
                _ => exit::OTHER,
            })
        }
    }
}

/// `base/name`, or `base/name-N` for the first free `N`; existing runs are
/// never touched.
fn fresh_dir(base: &Path, name: &str) -> Result<PathBuf, HillError> {
    fs::create_dir_all(base).map_err(|e| HillError::io(base, e))?;
    let mut candidate = base.join(name);
    let mut n = 1;
    loop {
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                candidate = base.join(format!("{name}-{n}"));
                n += 1;
            }
            Err(e) => return Err(HillError::io(&candidate, e)),
        }
    }
}

fn run_id(cfg: &TrainConfig) -> String {
    format!("{}-T{}-seed{}", cfg.mode, cfg.temperature, cfg.seed)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode, HillError> {
    let mut cfg = a.common.resolve()?;
    if let Some(m) = &a.mode {
        cfg.mode = m.parse()?;
    }
    let dir = fresh_dir(&a.out_dir, &run_id(&cfg))?;
    let res = run_training(&cfg, Some(&dir))?;
    let s = summarize(&res.history);
    println!("run directory: {}", dir.display());
    println!("steps: {}", res.history.len());
    println!("initial held-out success: {:.6}", res.initial_eval.mean);
    println!("final held-out success: {}", fmt_opt(s.final_eval));
    println!("final held-out success (hardest tier): {}", fmt_opt(s.final_eval_hardest));
    println!("final all-incorrect ratio: {:.6}", s.final_all_incorrect_ratio);
    println!("mean hint reliance: {}", fmt_opt(s.mean_reliance));
    println!("hinter invocations: {}", res.final_state.hinter_invocations);
    Ok(ExitCode::SUCCESS)
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    xs.retain(|x| x.is_finite());
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { (xs[n / 2 - 1] + xs[n / 2]) / 2.0 })
}

fn csv_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

fn cmd_compare(a: CompareArgs) -> Result<ExitCode, HillError> {
    if a.modes.len() < 2 {
        return Err(HillError::Config("compare needs at least two modes".into()));
    }
    if a.seeds.is_empty() {
        return Err(HillError::Config("compare needs at least one seed".into()));
    }
    let base = a.common.resolve()?;
    let modes = a.modes.iter().map(|m| m.parse::<Mode>()).collect::<Result<Vec<_>, _>>()?;
    let dir = fresh_dir(&a.out_dir, "compare")?;

    let mut jobs = Vec::new();
    for (mi, &mode) in modes.iter().enumerate() {
        for &seed in &a.seeds {
            let cfg = TrainConfig {
                mode,
                seed,
                ..base.clone()
            };
            let run_dir = dir.join(format!("{mi}-{}", run_id(&cfg)));
            jobs.push((mi, cfg, run_dir));
        }
    }
    let summaries = jobs
        .par_iter()
        .map(|(mi, cfg, run_dir)| {
            fs::create_dir(run_dir).map_err(|e| HillError::io(run_dir, e))?;
            let res = run_training(cfg, Some(run_dir))?;
            Ok((*mi, cfg.seed, summarize(&res.history)))
        })
        .collect::<Result<Vec<(usize, u64, RunSummary)>, HillError>>()?;

    let mut runs_csv = String::from("mode,seed,final_eval,final_eval_hardest,final_all_incorrect_ratio,mean_reliance,mean_signal_creation,mean_signal_transfer\n");
    for (mi, seed, s) in &summaries {
        runs_csv.push_str(&format!(
            "{},{seed},{},{},{},{},{},{}\n",
            modes[*mi],
            csv_opt(s.final_eval),
            csv_opt(s.final_eval_hardest),
            s.final_all_incorrect_ratio,
            csv_opt(s.mean_reliance),
            s.mean_signal_creation,
            csv_opt(s.mean_signal_transfer),
        ));
    }
    let mut summary_csv = String::from("mode,runs,median_final_eval,median_final_eval_hardest,median_final_all_incorrect_ratio,median_mean_reliance\n");
    println!("{:<10} {:>5} {:>12} {:>12} {:>12} {:>12}", "mode", "runs", "eval", "eval_hard", "all_incorr", "reliance");
    for (mi, mode) in modes.iter().enumerate() {
        let rows: Vec<&RunSummary> = summaries.iter().filter(|r| r.0 == mi).map(|r| &r.2).collect();
        let eval = median(rows.iter().filter_map(|s| s.final_eval).collect());
        let hard = median(rows.iter().filter_map(|s| s.final_eval_hardest).collect());
        let ratio = median(rows.iter().map(|s| s.final_all_incorrect_ratio).collect());
        let rel = median(rows.iter().filter_map(|s| s.mean_reliance).collect());
        summary_csv.push_str(&format!(
            "{mode},{},{},{},{},{}\n",
            rows.len(),
            csv_opt(eval),
            csv_opt(hard),
            csv_opt(ratio),
            csv_opt(rel)
        ));
        println!(
            "{:<10} {:>5} {:>12} {:>12} {:>12} {:>12}",
            mode.as_str(),
            rows.len(),
            fmt_opt(eval),
            fmt_opt(hard),
            fmt_opt(ratio),
            fmt_opt(rel)
        );
    }
    let runs_path = dir.join("runs.csv");
    fs::write(&runs_path, runs_csv).map_err(|e| HillError::io(&runs_path, e))?;
    let summary_path = dir.join("summary.csv");
    fs::write(&summary_path, summary_csv).map_err(|e| HillError::io(&summary_path, e))?;
    println!("summary: {}", summary_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode, HillError> {
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    let sweep = identity_sweep(
        &cfg.task(),
        cfg.reasoner_buckets,
        a.max_len,
        a.scale,
        a.cases,
        a.seed,
        DEFAULT_ENUMERATION_BUDGET,
    )?;
    println!("cases: {}", sweep.cases);
    println!("max identity residual: {:.3e}", sweep.max_residual);
    println!("transfer-bound violations: {}", sweep.bound_violations);
    println!("zero-success cases: {}", sweep.zero_success);
    let ok = sweep.max_residual < 1e-9 && sweep.bound_violations == 0;
    println!("result: {}", if ok { "ok" } else { "FAILED" });
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(exit::VERIFICATION)
    })
}

const CSV_HEADER: &str = "step,all_incorrect_ratio_before,all_incorrect_ratio_after,n_replaced,batch_success_rate,mean_rho_hat,mean_signal_creation,mean_signal_transfer,mean_transfer_weight,hinter_mean_reward,invalid_hint_rate,hinter_invocations,reasoner_eval_success";

fn metrics_csv(history: &[StepMetrics]) -> String {
    let tiers = history
        .iter()
        .filter_map(|m| m.eval_success_by_difficulty.as_ref().map(|v| v.len()))
        .max()
        .unwrap_or(0);
    let mut out = String::from(CSV_HEADER);
    for d in 0..tiers {
        out.push_str(&format!(",eval_tier_{}", d + 1));
    }
    out.push('\n');
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            m.step,
            m.all_incorrect_ratio_before,
            m.all_incorrect_ratio_after,
            m.n_replaced,
            m.batch_success_rate,
            csv_opt(m.mean_rho_hat),
            m.mean_signal_creation,
            csv_opt(m.mean_signal_transfer),
            csv_opt(m.mean_transfer_weight),
            csv_opt(m.hinter_mean_reward),
            csv_opt(m.invalid_hint_rate),
            m.hinter_invocations,
            csv_opt(m.reasoner_eval_success),
        ));
        for d in 0..tiers {
            out.push(',');
            if let Some(v) = m.eval_success_by_difficulty.as_ref().and_then(|v| v.get(d)) {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}

fn cmd_export(a: ExportArgs) -> Result<ExitCode, HillError> {
    let history = read_metrics(&a.metrics)?;
    let csv = metrics_csv(&history);
    match &a.out {
        Some(p) => fs::write(p, csv).map_err(|e| HillError::io(p, e))?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}
