//! Command-line driver: runs scenarios, sweeps and transport benchmarks.
//! Log level comes from `RUST_LOG`.

use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use eaas::harness::bench::bench_transport;
use eaas::harness::sweep::{format_fault_table, format_scale_table};
use eaas::harness::{
    check_expectations, fault_sweep, run, scale_sweep, verify, Backend, Mode, RunMetrics,
    ScaleOutcome, Scenario,
};

#[derive(Parser)]
#[command(name = "eaas", version, about = "Disaggregated mixture-of-experts serving harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Eaas,
    Monolithic,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Inproc,
    Tcp,
}

#[derive(clap::Args)]
struct ScenarioArgs {
    /// Scenario file.
    scenario: PathBuf,
    /// Override the scenario's mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Override the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<Scenario> {
        let mut s = Scenario::load(&self.scenario)?;
        if let Some(m) = self.mode {
            s.run.mode = match m {
                ModeArg::Eaas => Mode::Eaas,
                ModeArg::Monolithic => Mode::Monolithic,
            };
            if s.run.mode == Mode::Monolithic {
                s.topology.replication = 1;
            }
        }
        if let Some(seed) = self.seed {
            s.run.seed = seed;
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and check its expectations.
    Run {
        #[command(flatten)]
        args: ScenarioArgs,
        /// Write per-window and summary metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a scenario and compare every output with the reference forward pass.
    Verify {
        #[command(flatten)]
        args: ScenarioArgs,
        /// Largest tolerated element-wise deviation when the scenario sets none.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Repeat a scenario with 0..=N server crashes.
    FaultSweep {
        #[command(flatten)]
        args: ScenarioArgs,
        /// Largest number of servers to crash
        #[arg(long)]
        kills: usize,
        /// Time of the first crash.
        #[arg(long, default_value_t = 300)]
        start_ms: u64,
        /// Time between crashes.
        #[arg(long, default_value_t = 300)]
        gap_ms: u64,
    },
    /// Weak-scaling sweep over server counts.
    ScaleSweep {
        #[command(flatten)]
        args: ScenarioArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,8")]
        servers: Vec<usize>,
    },
    /// Time slot round trips against one server.
    BenchTransport {
        /// Rows per request
        #[arg(long)]
        rows: usize,
        #[arg(long, default_value_t = 32)]
        hidden_dim: usize,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        /// Backends to time; both by default.
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
    },
}

fn print_run(m: &RunMetrics) {
    println!("{}", m.summary());
    for e in &m.events {
        println!("  event {e}");
    }
    for e in &m.errors {
        println!("  error {e}");
    }
}

fn run_cmd(args: &ScenarioArgs, csv: Option<&PathBuf>) -> Result<bool> {
    let s = args.load()?;
    let m = run(&s)?;
    print_run(&m);
    if let Some(path) = csv {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        m.write_csv(f)?;
    }
    let checks = check_expectations(&s, &m);
    for c in &checks {
        println!("{c}");
    }
    Ok(m.errors.is_empty() && checks.iter().all(|c| c.passed))
}

fn verify_cmd(args: &ScenarioArgs, tolerance: f64) -> Result<bool> {
    let mut s = args.load()?;
    let tol = *s.expect.max_oracle_error.get_or_insert(tolerance);
    let m = verify(&s)?;
    print_run(&m);
    let err = m.max_oracle_error.unwrap_or(f32::INFINITY);
    println!("max |distributed - oracle| = {err:e} (tolerance {tol:e})");
    let checks = check_expectations(&s, &m);
    for c in &checks {
        println!("{c}");
    }
    Ok(m.errors.is_empty() && checks.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { args, csv } => run_cmd(&args, csv.as_ref()),
        Command::Verify { args, tolerance } => verify_cmd(&args, tolerance),
        Command::FaultSweep {
            args,
            kills,
            start_ms,
            gap_ms,
        } => args.load().and_then(|s| {
            let rows = fault_sweep(&s, kills, start_ms, gap_ms)?;
            print!("{}", format_fault_table(&rows));
            let floor = s.expect.completion.unwrap_or(0.0);
            Ok(rows
                .iter()
                .all(|r| r.matches_baseline && r.metrics.completion_ratio() >= floor))
        }),
        Command::ScaleSweep { args, servers } => args.load().and_then(|s| {
            let rows = scale_sweep(&s, &servers)?;
            print!("{}", format_scale_table(&rows));
            Ok(rows.iter().all(|r| match &r.outcome {
                ScaleOutcome::Ran(m) => m.completion_ratio() == 1.0,
                ScaleOutcome::Unsupported(_) => true,
            }))
        }),
        Command::BenchTransport {
            rows,
            hidden_dim,
            iterations,
            backend,
        } => (|| {
            let backends = match backend {
                Some(BackendArg::Inproc) => vec![Backend::Inproc],
                Some(BackendArg::Tcp) => vec![Backend::Tcp],
                None => vec![Backend::Inproc, Backend::Tcp],
            };
            println!("backend  rows  bytes/request  mean round trip  rows/s");
            for b in backends {
                let r = bench_transport(b, rows, hidden_dim, iterations)?;
                println!(
                    "{:<7}  {:>4}  {:>13}  {:>12.1} us  {:.0}",
                    format!("{b:?}").to_lowercase(),
                    r.rows,
                    r.request_bytes,
                    r.mean_round_trip.as_secs_f64() * 1e6,
                    r.rows_per_sec
                );
            }
            Ok(true)
        })(),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
