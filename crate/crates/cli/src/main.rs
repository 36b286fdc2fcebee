use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use a2r_core::gateway::{serve_mock, EndpointConfig, MockBackend, MockScript};
use a2r_core::harness::{
    cmd_curate, cmd_report, cmd_run, CurateOptions, HarnessError, ReportOptions, RunOptions, RunSpec,
};
use a2r_core::pipeline::DEFAULT_CONTEXT_BUDGET;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "a2r", version, about = "Explore-then-synthesize evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a dataset, resuming any completed pairs in --out-dir.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        /// Explorer endpoint config (JSON).
        #[arg(long)]
        explorer: PathBuf,
        /// Synthesizer endpoint config (JSON); required by the a2r strategy.
        #[arg(long)]
        synthesizer: Option<PathBuf>,
        #[arg(long, default_value = "a2r")]
        strategy: String,
        #[arg(long, default_value_t = 4)]
        n_paths: usize,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value_t = DEFAULT_CONTEXT_BUDGET)]
        context_budget: usize,
        /// Stop after this many (query, run) pairs.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print metric and cost tables for one or more run directories.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Pricing sheet (JSON); implies --cost.
        #[arg(long)]
        pricing: Option<PathBuf>,
        #[arg(long)]
        cost: bool,
        #[arg(long)]
        allow_partial: bool,
        #[arg(long)]
        exclude_estimated: bool,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Build synthesizer training records from a run's explorer paths.
    Curate {
        #[arg(long)]
        rollouts: PathBuf,
        #[arg(long, default_value_t = 4)]
        n_paths: usize,
        #[arg(long, default_value_t = 1)]
        records_per_query: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a scripted backend over HTTP.
    MockServe {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        addr: SocketAddr,
    },
}

fn fail(err: HarnessError) -> ExitCode {
    eprintln!("error: {err}");
    match err {
        HarnessError::Dataset(_) => ExitCode::from(2),
        _ => ExitCode::FAILURE,
    }
}

fn load_endpoint(path: &Path) -> Result<EndpointConfig, HarnessError> {
    Ok(EndpointConfig::from_json_file(path)?)
}

async fn run(cli: Cli) -> ExitCode {
    match cli.command {
        Command::Run {
            dataset,
            explorer,
            synthesizer,
            strategy,
            n_paths,
            runs,
            seed,
            workers,
            context_budget,
            limit,
            out_dir,
        } => {
            let explorer = match load_endpoint(&explorer) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let synthesizer = match synthesizer.as_deref().map(load_endpoint).transpose() {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let mut opts = RunOptions::new(
                dataset,
                explorer,
                synthesizer,
                n_paths,
                RunSpec {
                    runs,
                    seed,
                    workers,
                    limit,
                },
                out_dir,
            );
            opts.strategy = strategy;
            opts.context_budget = context_budget;
            match cmd_run(&opts).await {
                Ok(summary) => {
                    println!(
                        "run {}: {} completed, {} skipped, {} failed, {} pending",
                        summary.manifest.run_id,
                        summary.completed,
                        summary.skipped,
                        summary.failures.len(),
                        summary.manifest.pending()
                    );
                    if summary.failures.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        for f in &summary.failures {
                            eprintln!("failed: {} run {}: {}", f.query_id, f.run, f.error);
                        }
                        ExitCode::FAILURE
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Report {
            run_dirs,
            pricing,
            cost,
            allow_partial,
            exclude_estimated,
            json,
        } => {
            let opts = ReportOptions {
                run_dirs,
                pricing,
                cost,
                allow_partial,
                exclude_estimated,
            };
            match cmd_report(&opts) {
                Ok(report) => {
                    print!("{}", report.render_text());
                    if let Some(path) = json {
                        if let Err(e) = std::fs::write(&path, report.to_json()) {
                            eprintln!("error: {}: {e}", path.display());
                            return ExitCode::FAILURE;
                        }
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Curate {
            rollouts,
            n_paths,
            records_per_query,
            seed,
            out,
        } => {
            let opts = CurateOptions::new(rollouts, n_paths, records_per_query, seed, out);
            match cmd_curate(&opts) {
                Ok(summary) => {
                    println!("{summary}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::MockServe { script, addr } => {
            let script = match MockScript::from_jsonl_file(&script) {
                Ok(s) => s,
                Err(e) => return fail(e.into()),
            };
            let backend = Arc::new(MockBackend::new(script));
            match serve_mock(backend, addr).await {
                Ok((bound, handle)) => {
                    println!("listening on http://{bound}");
                    tokio::select! {
                        _ = handle => {}
                        _ = tokio::signal::ctrl_c() => {}
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    run(Cli::parse()).await
}
