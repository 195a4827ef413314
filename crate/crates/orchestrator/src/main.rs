use std::fs::File;
use std::io::{self, BufReader, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use labelkit::runner::{Orchestrator, PromptEditRequest, RunError};
use labelkit::state::Stage;
use labelkit::sweep::sweep_exemplars;
use labelkit::synthetic::{generate, SyntheticSpec};
use labelkit::RunConfig;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "labelkit", version, about = "LLM-assisted text labeling with human checkpoints")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "labelkit.toml")]
    config: PathBuf,
    /// Override a config key, e.g. `--set pool.m=40`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the corpus into the run directory.
    Ingest,
    /// Embed every record.
    Embed,
    /// Reduce embeddings to the configured dimension.
    Reduce,
    /// Cluster and pick the exemplar pool.
    SelectPool,
    /// Write the pool as CSV (record_id,text,label).
    ExportPool {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Import pool labels from CSV, or copy them from the corpus reference labels.
    ImportLabels {
        csv: Option<PathBuf>,
        #[arg(long)]
        actor: String,
        /// Use each pool record's gold/human label instead of a CSV. Seals the pool.
        #[arg(long, conflicts_with = "csv")]
        from_reference: bool,
        /// Seal the pool after importing.
        #[arg(long)]
        seal: bool,
    },
    /// Generate rationales and per-class rules from the labeled pool.
    GenPrompt,
    /// Apply optional rule edits, then approve the prompt.
    ApprovePrompt {
        #[arg(long)]
        actor: String,
        /// Replace one class rule, `CLASS=TEXT`. Repeatable.
        #[arg(long = "rule", value_name = "CLASS=TEXT")]
        rules: Vec<String>,
        /// Add a free-text correction. Repeatable.
        #[arg(long = "correction")]
        corrections: Vec<String>,
        #[arg(long)]
        expected_version: Option<u64>,
    },
    /// Coarse labeling by both annotators.
    Annotate,
    /// Chain-of-thought re-annotation and judging of disagreements.
    Consensus,
    /// Apply overrides and write final labels.
    Finalize {
        /// Final label for one mismatch, `RECORD_ID=LABEL`. Repeatable.
        #[arg(long = "override", value_name = "RECORD_ID=LABEL")]
        overrides: Vec<String>,
        #[arg(long)]
        actor: Option<String>,
    },
    /// Print the run report.
    Report {
        #[arg(long)]
        json: bool,
    },
    /// Evaluate coarse labeling across pool sizes.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = [20, 40, 60, 80, 100])]
        m: Vec<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Serve the review API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Write a synthetic JSONL corpus with known labels.
    Synthesize {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_values_t = ["politics".to_string(), "business".to_string(), "technology".to_string()])]
        classes: Vec<String>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        gold_noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn split_pair<'a>(s: &'a str, what: &str) -> Result<(&'a str, &'a str)> {
    s.split_once('=')
        .with_context(|| format!("{what} `{s}` should look like KEY=VALUE"))
}

async fn run_to(orch: &mut Orchestrator, stage: Stage) -> Result<()> {
    let state = orch.run_stage(stage).await?;
    println!(
        "run is at {} ({} provider calls so far)",
        state.stage.map_or("start".into(), |s| s.to_string()),
        state.ledger.calls
    );
    Ok(())
}

async fn dispatch(cli: Cli) -> Result<()> {
    if let Command::Synthesize {
        n,
        classes,
        seed,
        gold_noise,
        out,
    } = &cli.command
    {
        let names: Vec<&str> = classes.iter().map(String::as_str).collect();
        let mut spec = SyntheticSpec::new(*n, &names, *seed);
        spec.gold_noise = *gold_noise;
        let synth = generate(&spec)?;
        std::fs::write(out, synth.corpus.to_jsonl()).with_context(|| format!("writing {}", out.display()))?;
        println!("wrote {n} records to {}", out.display());
        return Ok(());
    }

    let config = RunConfig::load_with(&cli.config, &cli.set)?;
    if let Command::Serve { addr } = cli.command {
        labelkit::api::serve(config, addr).await?;
        return Ok(());
    }
    if let Command::Sweep { m, json } = &cli.command {
        let table = sweep_exemplars(&config, m).await;
        if *json {
            println!("{}", serde_json::to_string_pretty(&table)?);
        } else {
            print!("{}", table.render());
        }
        return Ok(());
    }

    let mut orch = Orchestrator::open(config)?;
    match cli.command {
        Command::Ingest => run_to(&mut orch, Stage::Ingested).await?,
        Command::Embed => run_to(&mut orch, Stage::Embedded).await?,
        Command::Reduce => run_to(&mut orch, Stage::Reduced).await?,
        Command::SelectPool => {
            run_to(&mut orch, Stage::PoolSelected).await?;
            let view = orch.pool_view()?;
            println!("pool of {} records, {} labeled", view.items.len(), view.labeled);
        }
        Command::ExportPool { out } => match out {
            Some(path) => orch.export_pool(File::create(&path)?)?,
            None => orch.export_pool(io::stdout().lock())?,
        },
        Command::ImportLabels {
            csv,
            actor,
            from_reference,
            seal,
        } => {
            if from_reference {
                orch.label_pool_from_reference(&actor)?;
                println!("pool labeled from reference labels and sealed by {actor}");
            } else {
                let path = csv.context("give a CSV path or --from-reference")?;
                let n = orch.import_labels(BufReader::new(File::open(&path)?), &actor)?;
                println!("imported {n} labels");
                if seal {
                    orch.seal_pool(&actor)?;
                    println!("pool sealed by {actor}");
                }
            }
        }
        Command::GenPrompt => {
            run_to(&mut orch, Stage::PromptGenerated).await?;
            let prompt = orch.prompt()?;
            println!("{}", prompt.render_text());
            let empty = prompt.empty_rules();
            if !empty.is_empty() {
                println!("rules still empty: {}", empty.join(", "));
            }
        }
        Command::ApprovePrompt {
            actor,
            rules,
            corrections,
            expected_version,
        } => {
            // The version check guards the state the reviewer looked at, so
            // it happens before this command's own edits bump the version.
            if let Some(v) = expected_version {
                let current = orch.prompt()?.version;
                if current != v {
                    return Err(RunError::Conflict(format!("prompt version is {current}, expected {v}")).into());
                }
            }
            for r in &rules {
                let (class, text) = split_pair(r, "rule")?;
                orch.edit_prompt(
                    &PromptEditRequest {
                        class: Some(class.to_string()),
                        text: text.to_string(),
                        expected_version: None,
                    },
                    &actor,
                )?;
            }
            for c in corrections {
                orch.edit_prompt(
                    &PromptEditRequest {
                        class: None,
                        text: c,
                        expected_version: None,
                    },
                    &actor,
                )?;
            }
            orch.approve_prompt(&actor, None)?;
            println!("prompt approved by {actor}");
        }
        Command::Annotate => run_to(&mut orch, Stage::CoarseDone).await?,
        Command::Consensus => {
            run_to(&mut orch, Stage::ConsensusDone).await?;
            let open = orch.open_mismatches()?;
            if !open.is_empty() {
                println!("{} mismatches need a human label: {}", open.len(), open.join(", "));
            }
        }
        Command::Finalize { overrides, actor } => {
            for o in &overrides {
                let (id, label) = split_pair(o, "override")?;
                let actor = actor.as_deref().context("--actor is required with --override")?;
                orch.override_mismatch(id, label, actor)?;
            }
            run_to(&mut orch, Stage::Finalized).await?;
            if let Some(r) = orch.report()? {
                print!("{}", r.render());
            }
        }
        Command::Report { json } => {
            let report = orch
                .report()?
                .ok_or_else(|| RunError::NotFound("the run has not been finalized".into()))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.render());
            }
        }
        Command::Sweep { .. } | Command::Serve { .. } | Command::Synthesize { .. } => unreachable!(),
    }
    io::stdout().flush()?;
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("LABELKIT_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(io::stderr)
        .init();
    match dispatch(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<RunError>() {
                Some(RunError::HumanGatePending { .. }) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
