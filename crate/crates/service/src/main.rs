use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};
use crfcheck::config::{AssistantEndpoint, ServiceConfig};
use crfcheck::pipeline::{self, GenerateArgs, OutFormat};
use crfcheck::state::AppState;
use crfcheck_core::synthgen::InjectionPlan;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "crfcheck", version, about = "Cross-domain consistency checks for clinical trial CRF data")]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Knowledge base file (defaults to the built-in one).
    #[arg(long, global = true)]
    kb: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clean synthetic corpus as CSV files.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        patients: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Element library JSON.
        #[arg(long)]
        library: Option<PathBuf>,
        /// Scenario overlay JSON applied after generation.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Corrupt a clean corpus and write the ground truth.
    Inject {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 0.10)]
        rate: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run the checks and write findings as NDJSON.
    Detect {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base URL of an adjudication service.
        #[arg(long)]
        assistant: Option<String>,
        #[arg(long, default_value_t = 10_000)]
        assistant_timeout_ms: u64,
    },
    /// Score findings against ground truth.
    Evaluate {
        #[arg(long)]
        findings: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Cost model report, or a sweep over one parameter.
    Econ {
        #[arg(long)]
        params: Option<PathBuf>,
        /// Output file; `.csv` selects CSV. Prints to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `field=v1,v2,...` or `field=lo..hi`.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Dump one patient's timeline and context as NDJSON.
    Context {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        patient: String,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Used when no config file is given.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce() -> String) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string(value)?);
    } else {
        println!("{}", human());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let json = cli.json;
    let kb = || pipeline::load_kb(cli.kb.as_deref());
    match &cli.command {
        Command::Generate {
            out,
            patients,
            seed,
            library,
            overlay,
        } => {
            let args = GenerateArgs {
                out,
                patients: *patients,
                seed: *seed,
                library: library.as_deref(),
                overlay: overlay.as_deref(),
            };
            let s = pipeline::generate(&args, &kb()?)?;
            emit(json, &s, || {
                format!(
                    "generated {} patients ({} records, {} eligible) in {}",
                    s.patients,
                    s.records,
                    s.eligible_points,
                    s.out.display()
                )
            })
        }
        Command::Inject {
            input,
            out,
            truth,
            rate,
            seed,
        } => {
            let plan = InjectionPlan {
                rate: *rate,
                seed: *seed,
                ..InjectionPlan::default()
            };
            let s = pipeline::inject(input, out, truth, &plan, &kb()?)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            emit(json, &s, || {
                format!(
                    "injected {} discrepancies over {} eligible records {:?}",
                    s.annotations, s.eligible_points, s.per_category
                )
            })
        }
        Command::Detect {
            input,
            out,
            assistant,
            assistant_timeout_ms,
        } => {
            let endpoint = assistant.as_ref().map(|url| AssistantEndpoint {
                url: url.clone(),
                timeout_ms: *assistant_timeout_ms,
            });
            let s = pipeline::detect(input, out, endpoint.as_ref(), &kb()?)?;
            for e in &s.assistant_errors {
                eprintln!("warning: {e}");
            }
            emit(json, &s, || {
                format!(
                    "{} findings ({} categorized){}",
                    s.findings,
                    s.category_findings,
                    if s.degraded { ", assistant degraded" } else { "" }
                )
            })
        }
        Command::Evaluate { findings, truth, report } => {
            let e = pipeline::evaluate(findings, truth, report)?;
            emit(json, &e, || {
                let pct = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{:.1}%", 100.0 * v));
                format!(
                    "accuracy {} precision {} recall {} f1 {}",
                    pct(Some(e.metrics.accuracy)),
                    pct(e.metrics.precision),
                    pct(e.metrics.recall),
                    pct(e.metrics.f1_score)
                )
            })
        }
        Command::Econ { params, out, sweep } => {
            let result = pipeline::econ(params.as_deref(), sweep.as_deref())?;
            let format = OutFormat::for_path(out.as_deref());
            let text = result.render(format)?;
            match out {
                Some(path) => {
                    std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
                    emit(json, &result, || format!("wrote {}", path.display()))
                }
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Context { input, patient } => {
            print!("{}", pipeline::context(input, patient, &kb()?)?);
            Ok(())
        }
        Command::Serve { config, data_dir } => serve(config.as_deref(), data_dir.as_deref(), cli.kb.clone()),
    }
}

fn serve(config: Option<&Path>, data_dir: Option<&Path>, kb: Option<PathBuf>) -> Result<()> {
    let mut cfg = match (config, data_dir) {
        (Some(p), _) => ServiceConfig::load(p)?,
        (None, Some(d)) => ServiceConfig::new(d),
        (None, None) => ServiceConfig::new("."),
    };
    if kb.is_some() {
        cfg.kb_path = kb;
    }
    let cfg = cfg.with_env(|k| std::env::var(k).ok())?;
    let state = Arc::new(AppState::open(cfg)?);
    let addr = format!("{}:{}", state.config.host, state.config.port);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        tracing::info!("listening on {addr}");
        axum::serve(listener, crfcheck::api::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("server failed")
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                println!("{}", serde_json::json!({ "error": format!("{e:#}") }));
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
