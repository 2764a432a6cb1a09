//! `ngrpo-lab`: train, evaluate and inspect group-relative policy optimization
//! runs on synthetic verifiable-reward tasks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use ngrpo_lab::advantage::{augmented_moments, compute_advantages, grpo_advantages};
use ngrpo_lab::config::{ConfigError, RunConfig};
use ngrpo_lab::evalkit::{
    auc_log2, evaluate_policy, parse_passk_csv, passk_csv, EvalReport, DEFAULT_KS,
};
use ngrpo_lab::group::GroupRecord;
use ngrpo_lab::tasks::{suite_from_json, suite_to_json};
use ngrpo_lab::trainer::{metrics_csv, run_training_with, TrainError};
use ngrpo_lab::{
    make_suite, AdvantageConfig, Estimator, PolicyParams, RewardScale, RewardedGroup, StdMode,
    Tier, VirtualMagnitude,
};

const THREADS_ENV: &str = "NGRPO_LAB_THREADS";

#[derive(Parser)]
#[command(
    name = "ngrpo-lab",
    version,
    about = "Desk-scale GRPO / NGRPO laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file and write metrics, policy and resolved config.
    Train(TrainArgs),
    /// Sample a saved policy and write a Pass@k curve.
    Eval(EvalArgs),
    /// Print the advantages one estimator assigns to a reward vector.
    Advantages(AdvantageArgs),
    /// Pass@k AUC of a `k,value` curve file.
    Auc(AucArgs),
    /// Tabulate several run directories into one CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Train on this suite file instead of generating one from `[suite]`.
    #[arg(long)]
    suite: Option<PathBuf>,
    /// Write every step's rewarded groups to `groups/step-NNNNN.json`.
    #[arg(long)]
    dump_groups: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    suite: PathBuf,
    #[arg(long, default_value_t = 256)]
    samples: usize,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS.to_vec())]
    k_grid: Vec<usize>,
    #[arg(long, default_value_t = 0.6)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only evaluate tasks of this tier.
    #[arg(long)]
    tier: Option<Tier>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["rewards", "groups"]))]
struct AdvantageArgs {
    /// Comma-separated rewards of one group.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    rewards: Option<Vec<f64>>,
    /// JSON file holding one group or an array of groups.
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long, default_value = "grpo")]
    estimator: Estimator,
    /// Virtual samples appended by ngrpo (default 1).
    #[arg(long)]
    virtual_count: Option<usize>,
    /// max, min, medium or a number (default max).
    #[arg(long, allow_hyphen_values = true)]
    virtual_magnitude: Option<VirtualMagnitude>,
    #[arg(long, default_value = "bessel")]
    std: StdMode,
    /// Added to the standard deviation before dividing.
    #[arg(long, default_value_t = 1e-6)]
    eps_std: f64,
    /// Baseline for value_baseline (default r_min).
    #[arg(long, allow_hyphen_values = true)]
    baseline: Option<f64>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    r_min: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    r_max: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AucArgs {
    #[arg(long)]
    curve: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Bad flags, configs or input files; maps to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Advantages(a) => cmd_advantages(a),
        Command::Auc(a) => cmd_auc(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() || e.is::<ConfigError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| {
            usage(format!(
                "{THREADS_ENV} must be a non-negative integer, got `{v}`"
            ))
        }),
        Err(_) => Ok(0),
    }
}

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let threads = threads()?;
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let run = cfg.resolve()?;
    let suite = match &a.suite {
        Some(path) => suite_from_json(&read_input(path)?, run.suite.vocab, run.suite.max_len())
            .map_err(|e| usage(format!("{}: {e}", path.display())))?,
        None => make_suite(&run.suite)?,
    };

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let groups_dir = a.out.join("groups");
    if a.dump_groups {
        fs::create_dir_all(&groups_dir)
            .with_context(|| format!("creating {}", groups_dir.display()))?;
    }
    write(&a.out.join("resolved-config.json"), &cfg.to_json())?;
    write(&a.out.join("suite.json"), &suite_to_json(&suite))?;

    info!(
        "training {} tasks for {} epochs",
        suite.len(),
        run.train.epochs
    );
    let mut dump_error = None;
    let result = run_training_with(&run.train, &suite, run.suite.vocab, threads, |outcome| {
        if !a.dump_groups {
            return Ok(());
        }
        let path = groups_dir.join(format!("step-{:05}.json", outcome.diagnostics.step));
        let text = serde_json::to_string(&outcome.groups).expect("groups serialize");
        fs::write(&path, text).map_err(|e| {
            let msg = format!("writing {}: {e}", path.display());
            dump_error = Some(msg.clone());
            TrainError::Config(msg)
        })
    });
    if let Some(msg) = dump_error {
        return Err(anyhow!(msg));
    }
    let run_out = result?;

    write(&a.out.join("metrics.csv"), &metrics_csv(&run_out.trace))?;
    write(&a.out.join("policy.json"), &run_out.policy.to_json())?;
    if !run_out.evals.is_empty() {
        let mut csv = String::from("step,auc\n");
        for e in &run_out.evals {
            csv.push_str(&format!("{},{:.2}\n", e.step, e.auc * 100.0));
        }
        write(&a.out.join("evals.csv"), &csv)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let threads = threads()?;
    if let Some(&max_k) = a.k_grid.iter().max() {
        if max_k > a.samples {
            return Err(usage(format!(
                "largest k ({max_k}) exceeds --samples ({})",
                a.samples
            )));
        }
    }
    if a.temperature <= 0.0 || !a.temperature.is_finite() {
        return Err(usage("--temperature must be a finite value > 0"));
    }
    let policy = PolicyParams::from_json(&read_input(&a.policy)?)
        .map_err(|e| usage(format!("{}: {e}", a.policy.display())))?;
    let mut suite = suite_from_json(&read_input(&a.suite)?, policy.vocab(), policy.max_len())
        .map_err(|e| usage(format!("{}: {e}", a.suite.display())))?;
    if let Some(tier) = a.tier {
        suite.retain(|t| t.tier == tier);
        if suite.is_empty() {
            return Err(usage(format!("suite has no {} tasks", tier.name())));
        }
    }

    let scale = RewardScale::default();
    let pool = rayon_pool(threads)?;
    let evaluation = pool
        .install(|| {
            evaluate_policy(
                &policy,
                &suite,
                a.samples,
                a.temperature,
                &a.k_grid,
                a.seed,
                &scale,
            )
        })
        .map_err(|e| usage(e.to_string()))?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("passk.csv"), &passk_csv(&evaluation.curve))?;
    let report = EvalReport::from(&evaluation);
    write(
        &a.out.join("eval.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    println!("AUC {:.2}", report.auc);
    Ok(())
}

fn rayon_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| anyhow!("could not build worker pool: {e}"))
}

fn cmd_advantages(a: AdvantageArgs) -> Result<()> {
    let scale = RewardScale::new(a.r_min, a.r_max).map_err(|e| usage(e.to_string()))?;
    if a.estimator != Estimator::Ngrpo
        && (a.virtual_count.is_some() || a.virtual_magnitude.is_some())
    {
        return Err(usage(
            "--virtual-count and --virtual-magnitude only apply to --estimator ngrpo",
        ));
    }
    if a.estimator != Estimator::ValueBaseline && a.baseline.is_some() {
        return Err(usage(
            "--baseline only applies to --estimator value_baseline",
        ));
    }
    let mut cfg = AdvantageConfig::with_estimator(a.estimator);
    cfg.std_mode = a.std;
    cfg.eps_std = a.eps_std;
    if let Some(m) = a.virtual_count {
        cfg.virtual_count = m;
    }
    if let Some(v) = a.virtual_magnitude {
        cfg.virtual_magnitude = v;
    }
    cfg.validate(&scale).map_err(|e| usage(e.to_string()))?;
    let baseline = a.baseline.unwrap_or(scale.r_min());

    let groups: Vec<(Option<u32>, Vec<f64>)> = match (&a.rewards, &a.groups) {
        (Some(rewards), _) => vec![(None, rewards.clone())],
        (None, Some(path)) => load_groups(path, &scale)?
            .into_iter()
            .map(|g| (Some(g.task_id()), g.rewards().to_vec()))
            .collect(),
        (None, None) => unreachable!("clap requires one input"),
    };

    let mut tables = Vec::with_capacity(groups.len());
    for (task_id, rewards) in &groups {
        if let Some(r) = rewards.iter().find(|r| !scale.contains(**r)) {
            return Err(usage(format!(
                "reward {r} lies outside [{}, {}]",
                scale.r_min(),
                scale.r_max()
            )));
        }
        let result = compute_advantages(rewards, &cfg, &scale, baseline)
            .map_err(|e| usage(e.to_string()))?;
        let plain = if rewards.len() >= 2 {
            Some(grpo_advantages(rewards, &cfg)?)
        } else {
            None
        };
        let augmented = if a.estimator == Estimator::Ngrpo {
            let v = cfg.virtual_magnitude.resolve(&scale)?;
            Some(augmented_moments(
                rewards,
                v,
                cfg.virtual_count,
                cfg.std_mode,
            )?)
        } else {
            None
        };
        tables.push(Table {
            task_id: *task_id,
            rewards: rewards.clone(),
            advantages: result.advantages,
            mu: plain.as_ref().map(|p| p.mean_used),
            sigma: plain.as_ref().map(|p| p.std_used),
            augmented,
        });
    }

    if a.json {
        let items: Vec<serde_json::Value> = tables.iter().map(|t| t.to_json(a.estimator)).collect();
        let value = if a.groups.is_some() {
            serde_json::Value::Array(items)
        } else {
            items[0].clone()
        };
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        for (i, t) in tables.iter().enumerate() {
            if i > 0 {
                println!();
            }
            t.print();
        }
    }
    Ok(())
}

fn load_groups(path: &Path, scale: &RewardScale) -> Result<Vec<RewardedGroup>> {
    let text = read_input(path)?;
    let bad = |e: serde_json::Error| usage(format!("{}: {e}", path.display()));
    let records: Vec<GroupRecord<f64>> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(bad)?
    } else {
        vec![serde_json::from_str(&text).map_err(bad)?]
    };
    records
        .into_iter()
        .map(|r| {
            RewardedGroup::from_record(r, scale)
                .map_err(|e| usage(format!("{}: {e}", path.display())))
        })
        .collect()
}

struct Table {
    task_id: Option<u32>,
    rewards: Vec<f64>,
    advantages: Vec<f64>,
    mu: Option<f64>,
    sigma: Option<f64>,
    augmented: Option<(f64, f64)>,
}

impl Table {
    fn print(&self) {
        if let Some(id) = self.task_id {
            println!("task {id}");
        }
        println!("{:>5}  {:>10}  {:>10}", "index", "reward", "advantage");
        for (i, (r, adv)) in self.rewards.iter().zip(&self.advantages).enumerate() {
            println!("{i:>5}  {r:>10.6}  {adv:>10.6}");
        }
        if let (Some(mu), Some(sigma)) = (self.mu, self.sigma) {
            println!("mu      {mu:.6}");
            println!("sigma   {sigma:.6}");
        }
        if let Some((mu, sigma)) = self.augmented {
            println!("mu'     {mu:.6}");
            println!("sigma'  {sigma:.6}");
        }
    }

    fn to_json(&self, estimator: Estimator) -> serde_json::Value {
        let mut v = serde_json::json!({
            "estimator": estimator.name(),
            "rewards": self.rewards,
            "advantages": self.advantages,
            "mu": self.mu,
            "sigma": self.sigma,
        });
        if let Some(id) = self.task_id {
            v["task_id"] = id.into();
        }
        if let Some((mu, sigma)) = self.augmented {
            v["mu_aug"] = mu.into();
            v["sigma_aug"] = sigma.into();
        }
        v
    }
}

fn cmd_auc(a: AucArgs) -> Result<()> {
    let (ks, values) = parse_passk_csv(&read_input(&a.curve)?).map_err(|e| usage(e.to_string()))?;
    let auc = auc_log2(&ks, &values).map_err(|e| usage(e.to_string()))?;
    println!("AUC {auc:.2}");
    Ok(())
}

const REPORT_HEADER: &str =
    "run,estimator,auc,final_entropy,final_fully_solved,max_total_incorrect";

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for dir in &a.runs {
        out.push_str(&report_row(dir)?);
        out.push('\n');
    }
    write(&a.out, &out)
}

fn report_row(dir: &Path) -> Result<String> {
    let metrics_path = dir.join("metrics.csv");
    let metrics = read_input(&metrics_path)?;
    let bad = |msg: String| usage(format!("{}: {msg}", metrics_path.display()));

    let mut lines = metrics.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .split(',')
        .collect();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| bad(format!("no `{name}` column")))
    };
    let (entropy_col, solved_col, incorrect_col) = (
        column("mean_entropy")?,
        column("fully_solved")?,
        column("total_incorrect")?,
    );

    let mut last: Option<Vec<&str>> = None;
    let mut max_incorrect = 0usize;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(bad(format!(
                "row `{line}` has {} fields, expected {}",
                fields.len(),
                header.len()
            )));
        }
        let incorrect: usize = fields[incorrect_col]
            .parse()
            .map_err(|_| bad(format!("bad total_incorrect in `{line}`")))?;
        max_incorrect = max_incorrect.max(incorrect);
        last = Some(fields);
    }
    let last = last.ok_or_else(|| bad("no data rows".into()))?;
    let entropy: f64 = last[entropy_col]
        .parse()
        .map_err(|_| bad("bad mean_entropy".into()))?;
    let solved: usize = last[solved_col]
        .parse()
        .map_err(|_| bad("bad fully_solved".into()))?;

    let estimator = match fs::read_to_string(dir.join("resolved-config.json")) {
        Ok(text) => RunConfig::parse(&text)
            .map(|c| c.advantage.estimator.name().to_string())
            .map_err(|e| {
                usage(format!(
                    "{}: {e}",
                    dir.join("resolved-config.json").display()
                ))
            })?,
        Err(_) => String::new(),
    };
    let auc = match fs::read_to_string(dir.join("eval.json")) {
        Ok(text) => {
            let report: EvalReport = serde_json::from_str(&text)
                .map_err(|e| usage(format!("{}: {e}", dir.join("eval.json").display())))?;
            format!("{:.2}", report.auc)
        }
        Err(_) => String::new(),
    };
    let name = dir.file_name().map_or_else(
        || dir.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    );
    Ok(format!(
        "{name},{estimator},{auc},{entropy:.6},{solved},{max_incorrect}"
    ))
}
