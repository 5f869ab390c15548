mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use clap::{Args, Parser, Subcommand};
use odma_core::engine::{self, EngineError, Policy};
use odma_core::metrics::{self, nearest_rank, Comparison, PolicyResult, SimEvent};
use odma_core::workload::{write_trace, LengthDist, Segment};

use config::{ConfigError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "odma", version, about = "Bucketed contiguous KV-cache allocation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured policy over one workload and write the results.
    Run(RunArgs),
    /// Write a synthetic JSONL trace.
    GenTrace(GenTraceArgs),
    /// Recompute metrics from an event log.
    Replay {
        #[arg(long)]
        events: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated policy list; overrides `policies`.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<Policy>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    sigma_rel: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    bias: Option<f64>,
    #[arg(long)]
    buckets: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    align: Option<u32>,
    #[arg(long)]
    refresh_period: Option<usize>,
    #[arg(long)]
    large_bound: Option<u32>,
    #[arg(long)]
    reserve_fraction: Option<f64>,
    #[arg(long)]
    max_batch: Option<usize>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write per-policy event logs.
    #[arg(long)]
    events: bool,
    /// Run policies on separate threads.
    #[arg(long)]
    parallel: bool,
}

impl RunArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $field = v; })*
            };
        }
        set! {
            alpha => cfg.predictor.alpha,
            tau => cfg.predictor.tau,
            sigma_rel => cfg.predictor.sigma_rel,
            bias => cfg.predictor.bias,
            buckets => cfg.bucket.buckets,
            window => cfg.bucket.window,
            align => cfg.bucket.align,
            large_bound => cfg.bucket.large_bound,
            reserve_fraction => cfg.bucket.reserve_fraction,
            max_batch => cfg.scheduler.max_batch,
            devices => cfg.cluster.devices,
            seed => cfg.seed,
            policies => cfg.policies,
            out => cfg.output.dir,
        }
        if self.refresh_period.is_some() {
            cfg.bucket.refresh_period = self.refresh_period;
        }
        cfg.output.events |= self.events;
    }
}

#[derive(Args)]
struct GenTraceArgs {
    #[arg(long)]
    out: PathBuf,
    /// Take the schedule, count, rate and seed from this experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stationary lognormal generation lengths instead of the configured schedule.
    #[arg(long, requires = "sigma")]
    mu: Option<f64>,
    #[arg(long, requires = "mu")]
    sigma: Option<f64>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    args.apply(&mut cfg);
    cfg.validate()?;
    let trace = cfg.workload.requests(cfg.seed).map_err(runtime)?;

    let run_one = |policy: Policy| -> Result<(PolicyResult, Vec<SimEvent>), EngineError> {
        let out = engine::run(&cfg.engine_config(policy), &trace)?;
        Ok((PolicyResult { policy, metrics: out.metrics }, out.events))
    };
    let outcomes: Vec<_> = if args.parallel {
        thread::scope(|s| {
            let handles: Vec<_> = cfg.policies.iter().map(|&p| s.spawn(move || run_one(p))).collect();
            handles.into_iter().map(|h| h.join().expect("policy thread panicked")).collect()
        })
    } else {
        cfg.policies.iter().map(|&p| run_one(p)).collect()
    };

    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let mut results = Vec::new();
    for outcome in outcomes {
        let (result, events) = outcome.map_err(|e| match e {
            EngineError::Config(m) => Failure::Config(m),
            e => runtime(e),
        })?;
        if cfg.output.events {
            metrics::write_events(dir.join(format!("events-{}.jsonl", result.policy)), &events).map_err(runtime)?;
        }
        results.push(result);
    }
    let cmp = Comparison::from_results(results);
    write(&dir.join("metrics.json"), serde_json::to_string_pretty(&cmp).map_err(runtime)? + "\n")?;
    write(&dir.join("comparison.csv"), cmp.to_csv())?;
    write(&dir.join("config.toml"), cfg.to_toml())?;
    print_summary(&cmp, trace.len());
    println!("wrote {}", dir.display());
    Ok(())
}

fn print_summary(cmp: &Comparison, requests: usize) {
    println!("{requests} requests");
    println!(
        "{:<8} {:>8} {:>8} {:>10} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9}",
        "policy", "util", "effic", "tok/s", "acc", "ovfl", "large", "p50 s", "p99 s", "done"
    );
    for r in &cmp.results {
        let m = &r.metrics;
        println!(
            "{:<8} {:>8.4} {:>8.4} {:>10.1} {:>8.4} {:>8.4} {:>8.4} {:>9.3} {:>9.3} {:>9}",
            r.policy.name(),
            m.device_mem_utilization,
            m.reservation_efficiency,
            m.tps,
            m.bucket_accuracy,
            m.overflow_rate,
            m.large_bucket_rate,
            m.latency_p50,
            m.latency_p99,
            m.completed
        );
    }
}

fn gen_trace(args: GenTraceArgs) -> Result<(), Failure> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.workload.trace = None;
    if let Some(n) = args.n {
        cfg.workload.n = n;
    }
    if let Some(rate) = args.rate {
        cfg.workload.rate = rate;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let (Some(mu), Some(sigma)) = (args.mu, args.sigma) {
        cfg.workload.segments = vec![Segment::new(0.0, LengthDist::Lognormal { mu, sigma })];
    }
    cfg.validate()?;
    let trace = cfg.workload.requests(cfg.seed).map_err(|e| Failure::Config(e.to_string()))?;
    write_trace(&args.out, &trace).map_err(runtime)?;

    let mut lens: Vec<f64> = trace.iter().map(|r| r.true_gen_len as f64).collect();
    lens.sort_by(f64::total_cmp);
    if lens.is_empty() {
        println!("count 0");
    } else {
        println!(
            "count {}  median {}  p99 {}",
            lens.len(),
            nearest_rank(&lens, 0.5),
            nearest_rank(&lens, 0.99)
        );
    }
    Ok(())
}

fn replay(events: &Path) -> Result<(), Failure> {
    let (policy, m) = metrics::replay(events).map_err(runtime)?;
    eprintln!("policy {policy}");
    let json = serde_json::to_string_pretty(&m).map_err(runtime)?;
    // a closed pipe is not a failure
    let _ = writeln!(io::stdout(), "{json}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::GenTrace(args) => gen_trace(args),
        Command::Replay { events } => replay(&events),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
