use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vacsim::classad::{self, AttributeSet, Expr};
use vacsim::scenario::{self, ScenarioError};
use vacsim::sim::{self, SimError};
use vacsim::telemetry::{self, Format};

/// Simulate offline workloads on an opportunistic HLT farm.
#[derive(Parser)]
#[command(name = "vacsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write metrics, summary and trace.
    Run {
        /// Scenario file or preset name.
        #[arg(long)]
        scenario: String,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = OutFormat::Csv)]
        format: OutFormat,
    },
    /// Run two scenarios under one seed and report the differences.
    Compare {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate an expression against MY and TARGET attributes.
    EvalExpr {
        #[arg(long)]
        expr: String,
        /// NAME=VALUE, where VALUE is an expression (bare words are strings).
        #[arg(long = "my")]
        my: Vec<String>,
        #[arg(long = "target")]
        target: Vec<String>,
    },
    /// List built-in scenarios.
    Presets,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
}

enum Failure {
    Invalid(String),
    Invariant(String),
    Other(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Io { .. } => Failure::Other(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::ScenarioInvalid(_) => Failure::Invalid(e.to_string()),
            SimError::InvariantViolation { .. } => Failure::Invariant(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

fn attributes(pairs: &[String]) -> Result<AttributeSet, Failure> {
    let mut set = AttributeSet::new();
    for p in pairs {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Failure::Invalid(format!("expected NAME=VALUE, got {p:?}")))?;
        let expr = classad::parse(v).unwrap_or_else(|_| Expr::literal(v));
        set.insert(k.trim(), expr);
    }
    Ok(set)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            format,
        } => {
            let mut s = scenario::resolve(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let output = sim::run(s)?;
            let format = match format {
                OutFormat::Csv => Format::Csv,
                OutFormat::Json => Format::Json,
            };
            for p in telemetry::export(&output, &out, format)? {
                println!("wrote {}", p.display());
            }
            let sum = &output.summary;
            println!("jobs submitted: {}", sum.jobs_submitted);
            for (class, l) in &sum.latency {
                println!(
                    "{class}: {} started, p50 {:?} s, p95 {:?} s",
                    l.started, l.p50_s, l.p95_s
                );
            }
            println!("trace digest: {}", sum.trace_digest);
        }
        Command::Compare { a, b, seed, out } => {
            let (sa, sb) = (scenario::resolve(&a)?, scenario::resolve(&b)?);
            let cmp = telemetry::compare(sa, sb, seed)?;
            fs::create_dir_all(&out)?;
            let path = out.join("comparison.json");
            fs::write(&path, serde_json::to_string_pretty(&cmp).map_err(|e| Failure::Other(e.to_string()))?)?;
            print!("{}", cmp.table());
            println!("wrote {}", path.display());
        }
        Command::EvalExpr { expr, my, target } => {
            let e = classad::parse(&expr).map_err(|e| Failure::Invalid(format!("{expr}\n{e}")))?;
            let v = classad::evaluate(&e, &attributes(&my)?, &attributes(&target)?);
            println!("{v}");
        }
        Command::Presets => {
            for (name, _) in scenario::PRESETS {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Invariant(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
