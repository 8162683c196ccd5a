//! `kernel-scientist`: seed a workspace, run generations, inspect and export
//! results, and curate the knowledge base.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use kernel_scientist::config::{LlmProvider, RunConfig};
use kernel_scientist::gateway::{write_transcripts, HttpBackend, ScriptedBackend};
use kernel_scientist::orchestrator::{self, GenerationLog, KNOWLEDGE_DIR};
use kernel_scientist::population::INDEX_FILE;
use kernel_scientist::{ChatBackend, Evaluator, Gateway, KnowledgeBase, Scientist};
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(
    name = "kernel-scientist",
    version,
    about = "LLM-driven evolutionary GPU kernel optimization"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Workspace directory; overrides the one named in the config.
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate source files and store them as seed kernels. Without
    /// arguments the seeds listed in the config are used.
    Seed { sources: Vec<PathBuf> },
    /// Run generations of the optimization loop.
    Run {
        /// Generations to run in this invocation (default: up to the
        /// configured max_generations).
        #[arg(long)]
        generations: Option<u32>,
    },
    /// Print the population table and the best kernel.
    Status,
    /// Write the best kernel, its lineage and all generation logs to a directory.
    Export { dir: PathBuf },
    /// Have the digester model condense a document into the knowledge base.
    DigestDoc {
        path: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
    /// Add a document to the knowledge base verbatim.
    AddDoc {
        path: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Fatal(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn fatal(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Fatal(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();

    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Fatal(e)) => {
            eprintln!("fatal: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cli: Cli) -> Outcome<()> {
    match &cli.command {
        Command::Status => {
            let root = workspace(&cli)?;
            require_seeded(&root)?;
            let population = orchestrator::open_population(&root).map_err(fatal)?;
            print!("{}", orchestrator::status_report(&population).map_err(fatal)?);
            Ok(())
        }
        Command::Export { dir } => {
            let root = workspace(&cli)?;
            require_seeded(&root)?;
            let population = orchestrator::open_population(&root).map_err(fatal)?;
            orchestrator::export(&root, &population, dir).map_err(fatal)?;
            println!("exported to {}", dir.display());
            Ok(())
        }
        Command::AddDoc { path, title } => {
            let root = workspace(&cli)?;
            let body = read_input(path)?;
            let mut kb = KnowledgeBase::open(root.join(KNOWLEDGE_DIR)).map_err(fatal)?;
            let doc = kb
                .add_manual_doc_with_note(
                    &doc_title(path, title),
                    &body,
                    &format!("added from {}", path.display()),
                )
                .map_err(fatal)?;
            println!("added {}", doc.doc_id);
            Ok(())
        }
        Command::DigestDoc { path, title } => {
            let config = load_config(&cli)?;
            let root = cli.workspace.clone().unwrap_or_else(|| config.workspace.clone());
            let raw = read_input(path)?;
            let task = read_input(&config.task_description_path)?;
            let gateway = build_gateway(&config)?;
            let mut kb = KnowledgeBase::open(root.join(KNOWLEDGE_DIR)).map_err(fatal)?;
            let result = kb.digest_document(&gateway, &doc_title(path, title), &raw, &task);
            let transcripts = gateway.take_transcripts("digester");
            let dir = root.join(KNOWLEDGE_DIR).join("transcripts");
            write_transcripts(&dir, &transcripts).map_err(fatal)?;
            println!("digested {}", result.map_err(fatal)?.doc_id);
            Ok(())
        }
        Command::Seed { sources } => {
            let config = load_config(&cli)?;
            let paths = if sources.is_empty() {
                &config.seed_paths
            } else {
                sources
            };
            if paths.is_empty() {
                return Err(usage(anyhow!("no seed sources given and none configured")));
            }
            let texts = paths.iter().map(|p| read_input(p)).collect::<Outcome<Vec<_>>>()?;
            let mut scientist = open_scientist(&cli, &config)?;
            for (id, path) in scientist.seed(&texts).map_err(fatal)?.into_iter().zip(paths) {
                let record = scientist.population().get(id).map_err(fatal)?;
                let score = record
                    .aggregate_score()
                    .map_or_else(|| "FAILED".to_string(), |s| format!("{s:.3} us"));
                println!("{id} {} {score}", path.display());
            }
            Ok(())
        }
        Command::Run { generations } => {
            let config = load_config(&cli)?;
            require_seeded(cli.workspace.as_ref().unwrap_or(&config.workspace))?;
            let mut scientist = open_scientist(&cli, &config)?;
            let next = scientist.next_generation_seq().map_err(fatal)?;
            let remaining = config.max_generations.saturating_sub(next - 1);
            let n = generations.unwrap_or(remaining);
            let summary = scientist.run(n, Some(config.max_generations)).map_err(fatal)?;
            for log in &summary.generations {
                println!("{}", generation_line(log));
            }
            match (summary.best, summary.best_score) {
                (Some(best), Some(score)) => {
                    println!("population {}, best {best} ({score:.3} us)", summary.population_size)
                }
                _ => println!(
                    "population {}, no successfully evaluated kernel",
                    summary.population_size
                ),
            }
            Ok(())
        }
    }
}

fn generation_line(log: &GenerationLog) -> String {
    let added = log.outcomes.iter().filter(|o| !o.is_abandoned()).count();
    let best = match (log.best, log.best_score) {
        (Some(b), Some(s)) => format!("best {b} ({s:.3} us)"),
        _ => "best -".to_string(),
    };
    let mut line = format!("generation {:04} {:?}: +{added} records, {best}", log.seq, log.status);
    if let Some(reason) = &log.abort_reason {
        line.push_str(&format!(" [{reason}]"));
    }
    line
}

fn load_config(cli: &Cli) -> Outcome<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| usage(anyhow!("this command needs --config <path>")))?;
    RunConfig::load(path).map_err(usage)
}

/// Workspace for commands that do not need a config.
fn workspace(cli: &Cli) -> Outcome<PathBuf> {
    match (&cli.workspace, &cli.config) {
        (Some(w), _) => Ok(w.clone()),
        (None, Some(_)) => Ok(load_config(cli)?.workspace),
        (None, None) => Err(usage(anyhow!("pass --workspace <dir> or --config <path>"))),
    }
}

fn require_seeded(root: &Path) -> Outcome<()> {
    let index = root.join(orchestrator::POPULATION_DIR).join(INDEX_FILE);
    if index.is_file() {
        Ok(())
    } else {
        Err(usage(anyhow!(
            "workspace {} has an empty population; run `seed` first",
            root.display()
        )))
    }
}

fn read_input(path: &Path) -> Outcome<String> {
    fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(usage)
}

fn doc_title(path: &Path, title: &Option<String>) -> String {
    title.clone().unwrap_or_else(|| {
        path.file_stem()
            .map_or_else(|| "document".to_string(), |s| s.to_string_lossy().into_owned())
    })
}

fn build_gateway(config: &RunConfig) -> Outcome<Gateway> {
    let backend: Arc<dyn ChatBackend> = match &config.provider {
        LlmProvider::Http {
            endpoint,
            api_key_env,
            request_timeout,
        } => {
            let api_key = match api_key_env {
                Some(var) => Some(
                    std::env::var(var)
                        .map_err(|_| usage(anyhow!("environment variable {var} (llm.api_key_env) is not set")))?,
                ),
                None => None,
            };
            Arc::new(HttpBackend::new(endpoint.clone(), api_key, *request_timeout))
        }
        LlmProvider::Replay { script } => {
            let text = read_input(script)?;
            let backend = ScriptedBackend::from_yaml(&text)
                .map_err(|e| usage(anyhow!("replay script {}: {e}", script.display())))?;
            Arc::new(backend)
        }
    };
    Ok(Gateway::new(backend, config.gateway.clone()))
}

fn open_scientist(cli: &Cli, config: &RunConfig) -> Outcome<Scientist> {
    let root = cli.workspace.clone().unwrap_or_else(|| config.workspace.clone());
    let task = read_input(&config.task_description_path)?;
    if task.trim().is_empty() {
        return Err(usage(anyhow!("task description file is empty")));
    }
    let gateway = build_gateway(config)?;
    let evaluator = Evaluator::new(config.evaluator.clone()).map_err(usage)?;
    Scientist::open(root, gateway, evaluator, task, config.context_budget_bytes).map_err(fatal)
}
