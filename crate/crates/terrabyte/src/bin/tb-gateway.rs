//! Server-side tools: run the gateway, generate a synthetic corpus, build
//! precompiled archives, benchmark, and hash passwords for the user list.

use std::io::{self, BufRead};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use terrabyte::cli::FilterArgs;
use terrabyte::datagen::bench::{run_parallel_user_bench, run_transfer_comparison, BenchConfig, BenchEnv};
use terrabyte::datagen::{generate_into, CorpusSpec};
use terrabyte::gateway::auth::DEFAULT_ITERATIONS;
use terrabyte::gateway::{build_precompiled, GatewayConfig, PasswordHash, RunningGateway};
use terrabyte::objectstore::{LatencyModel, LocalDirStore};
use terrabyte::snapshot::load_catalog;

#[derive(Parser)]
#[command(name = "tb-gateway", version, about = "TerraByte portal server and tools")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTPS API until interrupted.
    Serve {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
    /// Generate a synthetic corpus: blobs/, catalog.jsonl and manifest.jsonl.
    Generate {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        originals: usize,
        #[arg(long, default_value_t = 0)]
        field_originals: usize,
        /// Full corpus spec as JSON; overrides the other options.
        #[arg(long, value_name = "PATH")]
        spec: Option<PathBuf>,
    },
    /// Write an archive of every file matching the filters.
    Precompile {
        #[arg(long, value_name = "PATH")]
        catalog: PathBuf,
        #[arg(long, value_name = "DIR")]
        store: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Concurrent users against one gateway: on-demand and precompiled.
    Bench {
        /// Corpus directory made by `generate`.
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        #[arg(long, value_name = "DIR")]
        work: PathBuf,
        #[arg(long, default_value_t = 6)]
        users: usize,
        #[arg(long, default_value_t = 20)]
        per_object_delay_ms: u64,
        /// Shared link capacity in bytes per second; 0 is unlimited.
        #[arg(long, default_value_t = 0)]
        bandwidth_cap: u64,
        #[arg(long, default_value_t = 1800)]
        timeout_secs: u64,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Many small files against a few large ones of the same total size.
    BenchSizes {
        #[arg(long, value_name = "DIR")]
        work: PathBuf,
        #[arg(long, default_value_t = 1000)]
        small: u32,
        #[arg(long, default_value_t = 10)]
        large: u32,
        #[arg(long, default_value_t = 20_000_000)]
        total_bytes: u64,
        #[arg(long, default_value_t = 20)]
        per_object_delay_ms: u64,
        #[arg(long, default_value_t = 0)]
        bandwidth_cap: u64,
        #[arg(long)]
        json: bool,
    },
    /// Print a password hash for the gateway's user list. Reads the
    /// password from stdin.
    HashPassword {
        #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
        iterations: u32,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(io::stderr)
        .init();
    match run(Args::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type BoxError = Box<dyn std::error::Error>;

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), BoxError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(command: Command) -> Result<(), BoxError> {
    match command {
        Command::Serve { config } => {
            let config = GatewayConfig::load(&config)?;
            let gateway = RunningGateway::start(&config)?;
            eprintln!("serving on {}", gateway.url());
            gateway.wait();
        }
        Command::Generate { out, seed, originals, field_originals, spec } => {
            let spec = match spec {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                None => CorpusSpec { seed, n_originals: originals, field_originals, ..CorpusSpec::default() },
            };
            std::fs::create_dir_all(&out)?;
            let corpus = generate_into(&spec, &out)?;
            eprintln!(
                "{} files, {:.1} MB in {}",
                corpus.manifest.files.len(),
                corpus.manifest.total_bytes() as f64 / 1e6,
                out.display()
            );
        }
        Command::Precompile { catalog, store, out, filter } => {
            let catalog = load_catalog(&catalog)?;
            let store = LocalDirStore::open(store, LatencyModel::default())?;
            let q = filter.to_query();
            q.validate_filter()?;
            let files = build_precompiled(&catalog, &store, &q, &out)?;
            eprintln!("{files} files written to {}", out.display());
        }
        Command::Bench { corpus, work, users, per_object_delay_ms, bandwidth_cap, timeout_secs, json, filter } => {
            let latency = LatencyModel { per_object_delay_ms, bandwidth_cap };
            let mut config = BenchConfig::new(users, filter.to_query(), latency);
            config.timeout = Duration::from_secs(timeout_secs);
            let env = BenchEnv::start(&corpus.join("catalog.jsonl"), &corpus.join("blobs"), &work, &config)?;
            let report = run_parallel_user_bench(env, &config)?;
            if json {
                print_json(&report)?;
            } else {
                print!("{report}");
            }
        }
        Command::BenchSizes { work, small, large, total_bytes, per_object_delay_ms, bandwidth_cap, json } => {
            let latency = LatencyModel { per_object_delay_ms, bandwidth_cap };
            let cmp = run_transfer_comparison(&work, small, large, total_bytes, latency, Duration::from_secs(3600))?;
            if json {
                print_json(&cmp)?;
            } else {
                print!("{cmp}");
            }
        }
        Command::HashPassword { iterations } => {
            let mut line = String::new();
            io::stdin().lock().read_line(&mut line)?;
            let password = line.trim_end_matches(['\r', '\n']);
            if password.is_empty() {
                return Err("empty password".into());
            }
            println!("{}", PasswordHash::create(password, iterations));
        }
    }
    Ok(())
}
