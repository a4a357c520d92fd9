//! faastree: a composable FaaS testbed.
//!
//! Subcommands: `worker` serves a worker node, `registry` manages the
//! file-backed image/config stores, `emu` drives the record / fit /
//! eval / serve emulation pipeline, and `bench` runs topologies, load,
//! and reports.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use faastree_core::bench::{
    build_report, generate, read_results, render_table, run_topology, write_results, BenchError,
    LoadProfile, TopologyConfig,
};
use faastree_core::emulator::{
    evaluate_model, fit_model, read_trace, record_trace, EmulatorError, FidelityReport,
    ReplaySettings, WorkerModel,
};
use faastree_core::protocol::transport::{serve_node, NodeHandle, TcpNodeClient};
use faastree_core::protocol::types::FunctionId;
use faastree_core::registry::{ConfigStore, ImageStore};
use faastree_core::worker::{EmulatedRuntime, ProcessRuntime, WorkerNode, WorkerOptions};

#[derive(Parser)]
#[command(name = "faastree", version, about = "composable FaaS testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum RuntimeArg {
    Process,
    Emulated,
}

#[derive(Subcommand)]
enum Command {
    /// Serve a worker node.
    Worker {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        config_store: PathBuf,
        /// Image store root; defaults to the config store root.
        #[arg(long)]
        image_store: Option<PathBuf>,
        #[arg(long, value_enum)]
        runtime: RuntimeArg,
        /// Worker model (emulated runtime only).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        worker_id: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scratch directory for materialized process images.
        #[arg(long)]
        scratch: Option<PathBuf>,
    },
    /// Manage the file-backed image and config stores.
    Registry {
        /// Store root (holds images/ and configs/).
        #[arg(long, global = true, default_value = "./faastree-data")]
        root: PathBuf,
        #[command(subcommand)]
        command: RegistryCommand,
    },
    /// Worker emulation pipeline: record, fit, eval, serve.
    Emu {
        #[command(subcommand)]
        command: EmuCommand,
    },
    /// Topology runner, load generator, and reporting.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
}

#[derive(Subcommand)]
enum RegistryCommand {
    /// Store an executable image blob; prints its digest.
    PutImage { file: PathBuf },
    /// Store a function config (JSON file).
    PutConfig { file: PathBuf },
    /// Print a function's config.
    GetConfig { function: String },
}

#[derive(Subcommand)]
enum EmuCommand {
    /// Drive a load profile against a live worker and write a trace.
    Record {
        #[arg(long)]
        target: String,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Fit a worker model to a recorded trace.
    Fit {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Replay a trace against the model and report fidelity.
    Eval {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Config store supplying per-function concurrency settings.
        #[arg(long)]
        config_store: Option<PathBuf>,
        /// Where to write the JSON fidelity report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Serve an emulated worker from a model file.
    Serve {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config_store: PathBuf,
        #[arg(long)]
        worker_id: Option<String>,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Launch a whole topology from one config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate load against a target and write raw results.
    Load {
        #[arg(long)]
        target: String,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate a results file into a table and summary.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Summary JSON path; defaults to `<in>.summary.json`.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

/// Errors mapped to process exit codes: CONFIG_INVALID -> 2,
/// target-unreachable -> 3, anything else -> 1.
fn exit_code_for(err: &CliError) -> u8 {
    match err {
        CliError::ConfigInvalid(_) => 2,
        CliError::TargetUnreachable(_) => 3,
        CliError::Other(_) => 1,
    }
}

#[derive(Debug)]
enum CliError {
    ConfigInvalid(String),
    TargetUnreachable(String),
    Other(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::ConfigInvalid(m) => write!(f, "CONFIG_INVALID: {m}"),
            CliError::TargetUnreachable(m) => write!(f, "target unreachable: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::ConfigInvalid(m) => CliError::ConfigInvalid(m),
            BenchError::TargetUnreachable(m) => CliError::TargetUnreachable(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<EmulatorError> for CliError {
    fn from(e: EmulatorError) -> Self {
        match e {
            EmulatorError::Record(ref m) if m.contains("unreachable") => {
                CliError::TargetUnreachable(m.clone())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

/// Print to stdout, tolerating a closed pipe (e.g. `| head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

async fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Worker {
            listen,
            config_store,
            image_store,
            runtime,
            model,
            worker_id,
            seed,
            scratch,
        } => {
            serve_worker(listen, config_store, image_store, runtime, model, worker_id, seed, scratch)
                .await
        }
        Command::Registry { root, command } => registry(root, command),
        Command::Emu { command } => emu(command).await,
        Command::Bench { command } => bench(command).await,
    }
}

#[allow(clippy::too_many_arguments)]
async fn serve_worker(
    listen: String,
    config_store: PathBuf,
    image_store: Option<PathBuf>,
    runtime: RuntimeArg,
    model: Option<PathBuf>,
    worker_id: Option<String>,
    seed: u64,
    scratch: Option<PathBuf>,
) -> Result<(), CliError> {
    let configs = ConfigStore::open(&config_store).map_err(other)?;
    let images =
        ImageStore::open(image_store.as_ref().unwrap_or(&config_store)).map_err(other)?;
    let worker_id = worker_id.unwrap_or_else(|| format!("worker@{listen}"));

    let runtime: Arc<dyn faastree_core::worker::runtime::Runtime> = match runtime {
        RuntimeArg::Process => {
            let scratch = scratch.unwrap_or_else(|| {
                std::env::temp_dir().join(format!("faastree-scratch-{}", std::process::id()))
            });
            Arc::new(ProcessRuntime::new(scratch).map_err(other)?)
        }
        RuntimeArg::Emulated => {
            let path = model
                .ok_or_else(|| CliError::ConfigInvalid("emulated runtime needs --model".into()))?;
            let model = WorkerModel::load(&path)?;
            Arc::new(EmulatedRuntime::new(Arc::new(model), seed))
        }
    };

    let worker = WorkerNode::new(WorkerOptions::new(&worker_id), runtime, configs, images);
    let server = serve_node(&listen, worker.clone()).await.map_err(other)?;
    say!("worker {worker_id} listening on {}", server.local_addr());

    tokio::signal::ctrl_c().await.ok();
    say!("draining {worker_id}");
    worker.shutdown().await;
    Ok(())
}

fn registry(root: PathBuf, command: RegistryCommand) -> Result<(), CliError> {
    match command {
        RegistryCommand::PutImage { file } => {
            let bytes = std::fs::read(&file).map_err(other)?;
            let store = ImageStore::open(&root).map_err(other)?;
            let digest = store.put(&bytes).map_err(other)?;
            say!("{digest}");
            Ok(())
        }
        RegistryCommand::PutConfig { file } => {
            let bytes = std::fs::read(&file).map_err(other)?;
            let cfg: faastree_core::protocol::types::FunctionConfig =
                serde_json::from_slice(&bytes)
                    .map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
            let store = ConfigStore::open(&root).map_err(other)?;
            store.put(&cfg).map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
            say!("{}", cfg.function);
            Ok(())
        }
        RegistryCommand::GetConfig { function } => {
            let function: FunctionId =
                function.parse().map_err(|e| CliError::ConfigInvalid(format!("{e}")))?;
            let store = ConfigStore::open(&root).map_err(other)?;
            let cfg = store.get(&function).map_err(other)?;
            say!("{}", serde_json::to_string_pretty(&cfg).map_err(other)?);
            Ok(())
        }
    }
}

fn render_fidelity(report: &FidelityReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:>8} {:>8} {:>10} {:>10} {:>8} {:>10} {:>10} {:>8}\n",
        "function",
        "rec_n",
        "rep_n",
        "med_rec",
        "med_rep",
        "med_rel",
        "fail_rec",
        "fail_rep",
        "ks"
    ));
    for (name, f) in &report.per_function {
        out.push_str(&format!(
            "{:<20} {:>8} {:>8} {:>10.1} {:>10.1} {:>8.3} {:>10.4} {:>10.4} {:>8.3}\n",
            name,
            f.recorded_calls,
            f.replayed_calls,
            f.recorded_median_ms,
            f.replayed_median_ms,
            f.median_rel_err,
            f.recorded_failure_rate,
            f.replayed_failure_rate,
            f.ks_stat
        ));
    }
    for name in &report.uncovered {
        out.push_str(&format!("{name:<20} uncovered by model\n"));
    }
    out
}

async fn emu(command: EmuCommand) -> Result<(), CliError> {
    match command {
        EmuCommand::Record { target, profile, trace } => {
            let profile = LoadProfile::load(&profile)?;
            let client: Arc<dyn NodeHandle> = Arc::new(TcpNodeClient::new(target));
            let summary = record_trace(client, &profile, &trace).await?;
            say!(
                "recorded {} calls ({} failures) over {} functions, {} state samples -> {}",
                summary.calls,
                summary.failures,
                summary.functions.len(),
                summary.state_samples,
                trace.display()
            );
            Ok(())
        }
        EmuCommand::Fit { trace, model } => {
            let records = read_trace(&trace)?;
            let fitted = fit_model(&records)?;
            fitted.save(&model)?;
            for (name, f) in &fitted.functions {
                say!(
                    "{name}: beta={:?} sigma={:.3} cold_extra={:.1} failure_rate={:.4}{} n={}",
                    f.beta,
                    f.sigma_ms,
                    f.cold_extra_ms,
                    f.failure_rate,
                    if f.failure_rate_warning { " (low samples)" } else { "" },
                    f.n_samples
                );
            }
            say!("model written to {}", model.display());
            Ok(())
        }
        EmuCommand::Eval { trace, model, seed, config_store, report } => {
            let records = read_trace(&trace)?;
            let model = WorkerModel::load(&model)?;
            let mut settings = ReplaySettings::new(seed);
            if let Some(root) = config_store {
                let store = ConfigStore::open(&root).map_err(other)?;
                settings.configs = store
                    .list()
                    .map_err(other)?
                    .into_iter()
                    .map(|cfg| (cfg.function.clone(), cfg))
                    .collect::<HashMap<_, _>>();
            }
            let fidelity = evaluate_model(&model, &records, &settings);
            say!("{}", render_fidelity(&fidelity).trim_end());
            if let Some(path) = report {
                let json = serde_json::to_vec_pretty(&fidelity).map_err(other)?;
                std::fs::write(&path, json).map_err(other)?;
                say!("report written to {}", path.display());
            }
            Ok(())
        }
        EmuCommand::Serve { listen, model, seed, config_store, worker_id } => {
            let model = WorkerModel::load(&model)?;
            let configs = ConfigStore::open(&config_store).map_err(other)?;
            let images = ImageStore::open(&config_store).map_err(other)?;
            let worker_id = worker_id.unwrap_or_else(|| format!("emu@{listen}"));
            let worker = WorkerNode::new(
                WorkerOptions::new(&worker_id),
                Arc::new(EmulatedRuntime::new(Arc::new(model), seed)),
                configs,
                images,
            );
            let server = serve_node(&listen, worker.clone()).await.map_err(other)?;
            say!("emulated worker {worker_id} listening on {}", server.local_addr());
            tokio::signal::ctrl_c().await.ok();
            worker.shutdown().await;
            Ok(())
        }
    }
}

async fn bench(command: BenchCommand) -> Result<(), CliError> {
    match command {
        BenchCommand::Run { config } => {
            let cfg = TopologyConfig::load(&config)?;
            let running = run_topology(&cfg).await?;
            // expose the root even when the config didn't ask for it;
            // the handle must outlive the wait below
            let mut extra_server = None;
            let root_addr = match running.root_addr {
                Some(addr) => addr,
                None => {
                    let server = serve_node("127.0.0.1:0", Arc::clone(&running.root))
                        .await
                        .map_err(other)?;
                    let addr = server.local_addr();
                    extra_server = Some(server);
                    addr
                }
            };
            say!("root {} listening on {root_addr}", running.root_id);
            say!("{} nodes up; ctrl-c to tear down", cfg.nodes.len());
            tokio::signal::ctrl_c().await.ok();
            say!("tearing down");
            drop(extra_server);
            running.shutdown().await;
            Ok(())
        }
        BenchCommand::Load { target, profile, out } => {
            let profile = LoadProfile::load(&profile)?;
            let client: Arc<dyn NodeHandle> = Arc::new(TcpNodeClient::new(target));
            let rows = generate(client, &profile).await?;
            write_results(&out, &rows)?;
            let failed = rows.iter().filter(|r| !r.ok).count();
            say!("{} calls ({failed} failed) -> {}", rows.len(), out.display());
            Ok(())
        }
        BenchCommand::Report { input, summary } => {
            let rows = read_results(&input)?;
            let report = build_report(&rows);
            say!("{}", render_table(&report).trim_end());
            let summary_path = summary.unwrap_or_else(|| {
                let mut p = input.clone().into_os_string();
                p.push(".summary.json");
                PathBuf::from(p)
            });
            let json = serde_json::to_vec_pretty(&report).map_err(other)?;
            std::fs::write(&summary_path, json).map_err(other)?;
            say!("summary written to {}", summary_path.display());
            Ok(())
        }
    }
}
