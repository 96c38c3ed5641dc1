use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use homechain_sim::assertions::check_all;
use homechain_sim::scaling::{self, Metric};
use homechain_sim::{FlowKind, MetricsReport, Scenario, SimError, SweepParam};

#[derive(Parser)]
#[command(
    name = "homechain",
    version,
    about = "Run homechain simulation scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Structured,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and check its assertions.
    Run {
        file: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write metrics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Write the per-message trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a scenario once per parameter value and fit a log-log slope.
    Sweep {
        file: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u64>,
        /// Comma-separated seeds averaged per value; defaults to the scenario seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Flow kind the slope is fitted on; defaults to the first workload's.
        #[arg(long)]
        flow: Option<String>,
        /// packets, delay, comp_ops, mem_blocks or mem_txs.
        #[arg(long, default_value = "packets")]
        metric: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

enum Failure {
    Input(String),
    Assertions,
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::Input(e.to_string())
    }
}

fn emit(report: &MetricsReport, format: Format, out: Option<&PathBuf>) -> Result<(), Failure> {
    let text = match format {
        Format::Csv => report.to_csv(),
        Format::Structured => report.to_jsonl(),
    };
    match out {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))
        }
        None => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            file,
            seed,
            out,
            format,
            trace,
        } => {
            let mut sc = Scenario::load(&file)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            let world = scaling::run(&sc)?;
            emit(&world.report(), format, out.as_ref())?;
            if let Some(p) = trace {
                std::fs::write(&p, world.trace_jsonl())
                    .map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?;
            }
            let results = check_all(&world);
            let mut failed = false;
            for r in &results {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                eprintln!("{tag} {} [{}]", r.description, r.detail);
                failed |= !r.passed;
            }
            if failed {
                Err(Failure::Assertions)
            } else {
                Ok(())
            }
        }
        Command::Sweep {
            file,
            param,
            values,
            seeds,
            flow,
            metric,
            out,
            format,
        } => {
            let sc = Scenario::load(&file)?;
            let param: SweepParam = param.parse()?;
            let metric = Metric::parse(&metric)
                .ok_or_else(|| Failure::Input(format!("unknown metric {metric:?}")))?;
            let kind = match flow {
                Some(f) => FlowKind::parse(&f)
                    .ok_or_else(|| Failure::Input(format!("unknown flow kind {f:?}")))?,
                None => scaling::primary_kind(&sc)
                    .ok_or_else(|| Failure::Input("scenario has no workload".into()))?,
            };
            let seeds = if seeds.is_empty() {
                vec![sc.seed]
            } else {
                seeds
            };
            let report = scaling::sweep(&sc, param, &values, &seeds)?;
            emit(&report, format, out.as_ref())?;
            let points = scaling::series(&report, param, kind, metric);
            for (x, y) in &points {
                eprintln!("{param}={x} {kind} mean={y:.3}");
            }
            match scaling::loglog_slope(&points) {
                Some(s) => eprintln!("slope {kind} vs {param}: {s:.4}"),
                None => eprintln!("slope {kind} vs {param}: undefined"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Assertions) => ExitCode::from(1),
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
