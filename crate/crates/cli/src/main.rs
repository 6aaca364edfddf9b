//! Command-line harness: run trainers from config files, record expert
//! datasets, clone from them, inspect stored workspaces, and benchmark
//! parallel acquisition throughput.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad flags or config.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use tabula::agent::util::SleepAgent;
use tabula::algorithms::nn::UniformRandomAgent;
use tabula::algorithms::{
    record_dataset, train_a2c, train_bc, train_double_dqn, train_reinforce, MetricLog,
    RecordPolicy, TrainConfig,
};
use tabula::envs::EnvAgent;
use tabula::parallel::{RemoteAgent, RemoteOptions};
use tabula::{Agent, KwArgs, Sequential, Temporal, TrajectoryDataset, VarStore, Workspace};

use config::{default_config, parse_config};

#[derive(Parser)]
#[command(name = "tabula", version, about = "Sequential-decision framework harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a trainer and write its metric log.
    Train {
        /// Algorithm: reinforce | a2c | ddqn
        #[arg(long)]
        algo: String,
        /// Flat key-value config file; omit for algorithm defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.processes from the config.
        #[arg(long)]
        processes: Option<usize>,
    },
    /// Roll out episodes and store them as a trajectory dataset.
    Record {
        #[arg(long)]
        env: String,
        /// Policy: random | expert
        #[arg(long)]
        policy: String,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Behavioral cloning from a recorded dataset.
    Bc {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Print the variables, shapes and extents of a workspace or dataset
    /// file.
    Inspect { file: PathBuf },
    /// Measure acquisition steps/second per worker count.
    BenchParallel {
        /// Comma-separated worker counts, e.g. 1,2,4
        #[arg(long)]
        processes: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Errors that should exit 2 (bad input) vs 1 (runtime failure).
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<tabula::Error> for CliError {
    fn from(e: tabula::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn load_config(path: Option<&Path>, algo: &str) -> Result<TrainConfig, CliError> {
    let base = default_config(algo);
    let Some(path) = path else {
        return Ok(base);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let (cfg, warnings) =
        parse_config(&text, base).map_err(|e| CliError::Usage(e.to_string()))?;
    for w in warnings {
        eprintln!("warning: {} (line {})", w.message, w.line);
    }
    Ok(cfg)
}

fn summarize_training(name: &str, log: &MetricLog) {
    let episodes = log.episode_returns.len();
    let last20 = log.mean_return_last(20).unwrap_or(0.0);
    let best = log.best_rolling_return(20).unwrap_or(0.0);
    println!(
        "{name}: {} iterations, {episodes} episodes, mean return (last 20) {last20:.1}, \
         best rolling-20 {best:.1}, {:.1}s",
        log.records.len(),
        log.elapsed_seconds
    );
}

fn run_train(
    algo: &str,
    config: Option<&Path>,
    seed: Option<u64>,
    processes: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = load_config(config, algo)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(processes) = processes {
        cfg.num_processes = processes;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    match algo {
        "reinforce" => {
            let log = train_reinforce(&cfg)?;
            summarize_training("reinforce", &log);
        }
        "a2c" => {
            let log = train_a2c(&cfg)?;
            summarize_training("a2c", &log);
        }
        "ddqn" => {
            let result = train_double_dqn(&cfg)?;
            summarize_training("ddqn", &result.log);
            let optimal = result
                .greedy_returns
                .iter()
                .filter(|&&r| (r - 7.0).abs() < 1e-5)
                .count();
            println!(
                "ddqn greedy evaluation: {optimal}/{} episodes at the optimal return",
                result.greedy_returns.len()
            );
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown algorithm '{other}' (expected reinforce|a2c|ddqn)"
            )));
        }
    }
    if let Some(path) = &cfg.log_path {
        println!("metric log written to {}", path.display());
    }
    Ok(())
}

fn run_record(
    env: &str,
    policy: &str,
    episodes: usize,
    out: &Path,
    seed: u64,
) -> Result<(), CliError> {
    let policy = RecordPolicy::parse(policy).map_err(|e| CliError::Usage(e.to_string()))?;
    let dataset = record_dataset(env, policy, episodes, seed)?;
    dataset.save(out)?;
    let steps: usize = dataset.iter().map(Workspace::max_time_extent).sum();
    println!(
        "recorded {} episodes ({steps} frames) to {}",
        dataset.len(),
        out.display()
    );
    Ok(())
}

fn run_bc(config: Option<&Path>, dataset: &Path) -> Result<(), CliError> {
    let cfg = load_config(config, "bc")?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if !dataset.exists() {
        return Err(CliError::Usage(format!(
            "dataset {} does not exist",
            dataset.display()
        )));
    }
    let result = train_bc(&cfg, dataset)?;
    let final_loss = result.log.records.last().map(|r| r.loss).unwrap_or(0.0);
    println!(
        "cloning: {} iterations, final loss {final_loss:.4}, action agreement {:.1}%",
        result.log.records.len(),
        result.agreement * 100.0
    );
    if let Some(path) = &cfg.log_path {
        println!("metric log written to {}", path.display());
    }
    Ok(())
}

fn inspect_workspace(ws: &Workspace, indent: &str) {
    for (name, series) in ws.variables() {
        let mut shape = format!("T={}", series.time_extent());
        if let Some(batch) = ws.batch_size() {
            shape.push_str(&format!(" B={batch}"));
        }
        if !series.item_shape().is_empty() {
            shape.push_str(&format!(" item={:?}", series.item_shape()));
        }
        println!("{indent}{name:<24} {shape}");
    }
}

fn run_inspect(file: &Path) -> Result<(), CliError> {
    let bytes = std::fs::read(file)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", file.display())))?;
    match bytes.get(..4) {
        Some(magic) if magic == b"WSPC" => {
            let ws = Workspace::load(file)?;
            println!(
                "workspace: {} variables, batch {}",
                ws.variable_names().len(),
                ws.batch_size().map_or("-".to_string(), |b| b.to_string())
            );
            inspect_workspace(&ws, "  ");
        }
        Some(magic) if magic == b"WSDS" => {
            let ds = TrajectoryDataset::load(file)?;
            println!("dataset: {} workspaces", ds.len());
            for (i, ws) in ds.iter().enumerate() {
                println!(
                    "  [{i}] batch {} · {} variables · T={}",
                    ws.batch_size().map_or("-".to_string(), |b| b.to_string()),
                    ws.variable_names().len(),
                    ws.max_time_extent()
                );
                if i == 0 {
                    inspect_workspace(ws, "      ");
                }
            }
        }
        _ => {
            return Err(CliError::Usage(format!(
                "{} is neither a workspace nor a dataset file",
                file.display()
            )));
        }
    }
    Ok(())
}

fn bench_agent(cfg: &TrainConfig) -> Result<Box<dyn Agent>, CliError> {
    if cfg.env_name == "sleeper" {
        return Ok(Box::new(Temporal::new(Box::new(SleepAgent::new(
            1,
            cfg.n_envs,
        )))));
    }
    let env = EnvAgent::from_name(&cfg.env_name, cfg.n_envs, true)?;
    let n_actions = env.n_actions();
    Ok(Box::new(Temporal::new(Box::new(Sequential::new(vec![
        Box::new(env),
        Box::new(UniformRandomAgent::new(n_actions)),
    ])?))))
}

fn run_bench(processes: &str, config: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = load_config(config, "bench")?;
    if config.is_none() {
        cfg.env_name = "sleeper".to_string();
        cfg.n_envs = 1;
        cfg.n_steps = 200;
    }
    let counts: Vec<usize> = processes
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad worker count '{p}'")))
        })
        .collect::<Result<_, _>>()?;
    if counts.is_empty() {
        return Err(CliError::Usage("no worker counts given".into()));
    }

    let agent = bench_agent(&cfg)?;
    let kwargs = KwArgs::new()
        .with("t", 0usize)
        .with("n_steps", cfg.n_steps);
    println!(
        "acquisition throughput: env '{}', {} steps x {} envs per worker",
        cfg.env_name, cfg.n_steps, cfg.n_envs
    );
    for &n in &counts {
        let options = RemoteOptions {
            t_max: None,
            base_seed: cfg.seed,
        };
        let (mut remote, shared) = RemoteAgent::create(agent.as_ref(), n, &kwargs, options)?;
        let start = Instant::now();
        remote.execute(&shared, &kwargs)?;
        let elapsed = start.elapsed().as_secs_f64();
        let steps = (cfg.n_steps * cfg.n_envs * n) as f64;
        println!("  processes {n}: {:.0} steps/sec", steps / elapsed);
        remote.shutdown();
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train {
            algo,
            config,
            seed,
            processes,
        } => run_train(algo, config.as_deref(), *seed, *processes),
        Command::Record {
            env,
            policy,
            episodes,
            out,
            seed,
        } => run_record(env, policy, *episodes, out, *seed),
        Command::Bc { config, dataset } => run_bc(config.as_deref(), dataset),
        Command::Inspect { file } => run_inspect(file),
        Command::BenchParallel { processes, config } => {
            run_bench(processes, config.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}
