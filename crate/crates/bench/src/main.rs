use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tidewater::config::PlatformConfig;
use tidewater::engine::{KillPoint, MissingPolicy};
use tidewater::generator::{generate, read_trace, write_trace, DelayModel, FleetConfig, LateCommissioning, Trace};
use tidewater_bench::crashtest::{cmd_crashtest, sweep, Kill};
use tidewater_bench::metrics::DEFAULT_WARMUP_THRESHOLD;
use tidewater_bench::oracle::oracle;
use tidewater_bench::report::{read_metrics, summarize, svg, text_summary, to_csv};
use tidewater_bench::run::{cmd_run, engine_output, trace_attribute_names, Injection, RunConfig};

#[derive(Parser)]
#[command(name = "tidewater", version, about = "Point-in-time enrichment engine harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded trace file.
    Generate {
        #[command(flatten)]
        fleet: FleetArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Benchmark the engine and write metrics.
    Run(RunArgs),
    /// Compute the reference output of a trace, optionally checking the engine against it.
    Oracle {
        #[command(flatten)]
        input: TraceArgs,
        #[command(flatten)]
        platform: PlatformArgs,
        /// Write the reference output as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run the engine on the trace and compare.
        #[arg(long)]
        verify: bool,
    },
    /// Compare crash-free output with output after injected worker crashes.
    Crashtest {
        #[command(flatten)]
        input: TraceArgs,
        #[command(flatten)]
        platform: PlatformArgs,
        /// Kill one worker this long after it starts.
        #[arg(long, value_name = "MS")]
        kill_after: Option<u64>,
        /// Number of crash runs for --kill-after, each on the next partition.
        #[arg(long, default_value_t = 1)]
        runs: u32,
        /// Sweep kill points over measurement counts, updates and checkpoints.
        #[arg(long)]
        sweep: bool,
    },
    /// Summarize metrics files.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct FleetArgs {
    /// Fleet description in TOML; the flags below override it.
    #[arg(long)]
    fleet: Option<PathBuf>,
    #[arg(long)]
    devices: Option<u32>,
    #[arg(long)]
    rate_hz: Option<f64>,
    /// Simulated time covered by the trace.
    #[arg(long)]
    trace_seconds: Option<f64>,
    /// Number of attributes per device.
    #[arg(long)]
    attributes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    loss: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    delay_median_ms: Option<f64>,
    #[arg(long)]
    delay_sigma: Option<f64>,
    /// Fraction of attribute keys announced late.
    #[arg(long)]
    late_fraction: Option<f64>,
    #[arg(long, default_value_t = 30_000)]
    late_lag_ms: u64,
}

impl FleetArgs {
    fn config(&self) -> anyhow::Result<FleetConfig> {
        let mut c = match &self.fleet {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => FleetConfig::with_attribute_count(self.attributes.unwrap_or(2)),
        };
        if let (Some(k), Some(_)) = (self.attributes, &self.fleet) {
            c.attributes = FleetConfig::with_attribute_count(k).attributes;
        }
        if let Some(v) = self.devices {
            c.devices = v;
        }
        if let Some(v) = self.rate_hz {
            c.rate_hz = v;
        }
        if let Some(v) = self.trace_seconds {
            c.duration_s = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.loss {
            c.loss = v;
        }
        if let Some(v) = self.jitter {
            c.jitter = v;
        }
        if self.delay_median_ms.is_some() || self.delay_sigma.is_some() {
            let sigma = self.delay_sigma.unwrap_or(c.delay.sigma);
            let median = self.delay_median_ms.unwrap_or(c.delay.mu.exp());
            c.delay = DelayModel::with_median(median, sigma);
        }
        if let Some(fraction) = self.late_fraction {
            c.late_commissioning = Some(LateCommissioning {
                fraction,
                lag_ms: self.late_lag_ms,
            });
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Clone)]
struct TraceArgs {
    /// Read the trace from a file instead of generating it.
    #[arg(long, conflicts_with = "fleet")]
    trace: Option<PathBuf>,
    #[command(flatten)]
    fleet: FleetArgs,
}

impl TraceArgs {
    /// The trace and the attribute names it announces.
    fn load(&self) -> anyhow::Result<(Trace, u64, Vec<String>)> {
        match &self.trace {
            Some(path) => {
                let trace = read_trace(path).with_context(|| format!("reading {}", path.display()))?;
                let names = trace_attribute_names(&trace);
                Ok((trace, self.fleet.seed.unwrap_or(0), names))
            }
            None => {
                let fleet = self.fleet.config()?;
                let (trace, stats) = generate(&fleet)?;
                log::info!(
                    "generated {} measurements ({} lost) and {} updates",
                    trace.measurement_count(),
                    stats.dropped,
                    stats.updates
                );
                Ok((trace, fleet.seed, fleet.attribute_names()))
            }
        }
    }
}

#[derive(Args, Clone)]
struct PlatformArgs {
    /// Platform config in TOML; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    partitions: Option<u32>,
    /// Attributes to enrich with, comma separated. Defaults to those in the trace.
    #[arg(long, value_delimiter = ',')]
    enrich: Option<Vec<String>>,
    #[arg(long)]
    missing_policy: Option<MissingPolicy>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_interval_ms: Option<u64>,
    #[arg(long)]
    checkpoint_every_records: Option<u64>,
    #[arg(long)]
    store_latency_ms: Option<u64>,
    /// Fsync log appends and store writes.
    #[arg(long)]
    fsync: Option<bool>,
    /// Directory for per-run logs, stores and checkpoints.
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Keep per-run directories under --workdir.
    #[arg(long, requires = "workdir")]
    keep: bool,
}

impl PlatformArgs {
    fn run_config(&self, trace_attributes: Vec<String>) -> anyhow::Result<RunConfig> {
        let (mut c, from_file) = match &self.config {
            Some(path) => (PlatformConfig::load(path)?, true),
            None => (PlatformConfig::default(), false),
        };
        if let Some(a) = &self.enrich {
            c.engine.enrichment_attributes = a.clone();
        } else if !from_file {
            c.engine.enrichment_attributes = trace_attributes;
        }
        if let Some(v) = self.partitions {
            c.engine.partitions = v;
        }
        if let Some(v) = self.missing_policy {
            c.engine.missing_policy = v;
        }
        if let Some(v) = self.batch_size {
            c.engine.batch_size = v;
        }
        if let Some(v) = self.checkpoint_interval_ms {
            c.engine.checkpoint_interval_ms = v;
        }
        if self.checkpoint_every_records.is_some() {
            c.engine.checkpoint_every_records = self.checkpoint_every_records;
        }
        if let Some(v) = self.store_latency_ms {
            c.store.simulated_latency_ms = v;
        }
        if let Some(v) = self.fsync {
            c.store.fsync = v;
            c.log.fsync = v;
        }
        if c.store.journal_path.is_none() && self.keep {
            c.store.journal_path = Some(PathBuf::from("store.journal"));
        }
        c.engine.validate()?;
        let mut r = RunConfig::new(c);
        r.workdir = self.workdir.clone();
        r.keep = self.keep;
        Ok(r)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Inject the whole trace first, then process the backlog.
    Backlog,
    /// Inject at --rate measurements per second while the engine runs.
    Paced,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    input: TraceArgs,
    #[command(flatten)]
    platform: PlatformArgs,
    #[arg(long, default_value_t = 3)]
    runs: u32,
    /// Stop each run after this many seconds.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    #[arg(long, value_enum, default_value_t = Mode::Backlog)]
    mode: Mode,
    /// Measurements per second in paced mode.
    #[arg(long, required_if_eq("mode", "paced"))]
    rate: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_WARMUP_THRESHOLD)]
    warmup_threshold: f64,
    /// Append one JSON line per run here.
    #[arg(long, default_value = "metrics.jsonl")]
    metrics: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns whether every verification passed.
fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Generate { fleet, out } => {
            let fleet = fleet.config()?;
            let (trace, stats) = generate(&fleet)?;
            write_trace(&out, &trace)?;
            println!(
                "{}: {} measurements, {} updates, {} lost, {:.1}% out of order",
                out.display(),
                trace.measurement_count(),
                trace.update_count(),
                stats.dropped,
                trace.out_of_order_fraction() * 100.0
            );
            Ok(true)
        }
        Command::Run(args) => cmd_run_cli(args),
        Command::Oracle {
            input,
            platform,
            out,
            verify,
        } => {
            let (trace, _, names) = input.load()?;
            let cfg = platform.run_config(names)?;
            let engine = &cfg.platform.engine;
            let (expected, stats) = oracle(&trace, engine.partitions, &engine.enrichment_attributes, engine.missing_policy);
            println!(
                "reference: {} enriched, {} dead-lettered, {} updates rejected",
                expected.enriched.len(),
                expected.dead_letter.len(),
                stats.updates_rejected
            );
            if let Some(path) = out {
                fs::write(&path, serde_json::to_vec(&expected)?)?;
            }
            if !verify {
                return Ok(true);
            }
            let (actual, _) = engine_output(&cfg, &trace, &[])?;
            match expected.first_divergence(&actual) {
                None => {
                    println!("PASS: engine output equals reference ({} records)", expected.len());
                    Ok(true)
                }
                Some(d) => {
                    println!("FAIL: {d}");
                    Ok(false)
                }
            }
        }
        Command::Crashtest {
            input,
            platform,
            kill_after,
            runs,
            sweep: do_sweep,
        } => {
            let (trace, _, names) = input.load()?;
            let cfg = platform.run_config(names)?;
            let partitions = cfg.platform.engine.partitions;
            let mut kills = Vec::new();
            if let Some(ms) = kill_after {
                for i in 0..runs {
                    kills.push(Kill {
                        partition: i % partitions,
                        point: KillPoint::AfterElapsed(Duration::from_millis(ms)),
                    });
                }
            }
            if do_sweep {
                let per_partition = trace.measurement_count() as u64 / partitions as u64;
                let updates = trace.update_count() as u64 / partitions as u64;
                kills.extend(sweep(0, per_partition, updates, 4));
            }
            if kills.is_empty() {
                bail!("give --kill-after or --sweep");
            }
            let verdict = cmd_crashtest(&cfg, &trace, &kills)?;
            println!("{verdict}");
            Ok(verdict.pass())
        }
        Command::Report { metrics, csv, svg: svg_path } => {
            let mut runs = Vec::new();
            for path in &metrics {
                runs.extend(read_metrics(path)?);
            }
            let rows = summarize(&runs);
            print!("{}", text_summary(&rows, &runs));
            if let Some(path) = csv {
                fs::write(&path, to_csv(&rows)?)?;
            }
            if let Some(path) = svg_path {
                fs::write(&path, svg(&rows))?;
            }
            Ok(true)
        }
    }
}

fn cmd_run_cli(args: RunArgs) -> anyhow::Result<bool> {
    let (trace, seed, names) = args.input.load()?;
    let mut cfg = args.platform.run_config(names)?;
    cfg.runs = args.runs;
    cfg.seed = seed;
    cfg.duration_cap = Some(Duration::from_secs_f64(args.duration));
    cfg.warmup_threshold = args.warmup_threshold;
    cfg.injection = match args.mode {
        Mode::Backlog => Injection::Backlog,
        Mode::Paced => Injection::Paced {
            rate: args.rate.context("--rate is required in paced mode")?,
        },
    };
    let outcomes = cmd_run(&cfg, &trace)?;
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&args.metrics)
        .with_context(|| format!("opening {}", args.metrics.display()))?;
    for o in &outcomes {
        writeln!(file, "{}", o.metrics.to_json_line())?;
        if !o.capped && o.metrics.duration_s < args.duration {
            log::warn!("run {} consumed the whole trace early; use a larger trace to saturate", o.metrics.run);
        }
    }
    let runs: Vec<_> = outcomes.into_iter().map(|o| o.metrics).collect();
    let rows = summarize(&runs);
    print!("{}", text_summary(&rows, &runs));
    if let Some(path) = args.csv {
        fs::write(&path, to_csv(&rows)?)?;
    }
    Ok(true)
}
