use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use verdict_rl::agents::{ingest_agent_file, write_agent_file, AgentKind, AgentPanel};
use verdict_rl::dataset::{agent_records, read_dataset, write_dataset};
use verdict_rl::harness::checkpoint;
use verdict_rl::harness::config::RunConfig;
use verdict_rl::harness::pipeline::{self, Arm, EVAL_FILE, FINAL_CHECKPOINT};
use verdict_rl::harness::reward_check::{reward_check, CompletionRecord};

const LOG_ENV: &str = "VERDICT_RL_LOG";

#[derive(Parser)]
#[command(name = "verdict-rl", version, about = "Reward-driven training of a toy image-forensics verdict policy")]
#[command(after_help = "Log verbosity is read from VERDICT_RL_LOG (error, warn, info, debug, trace).")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the data seed and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct AgentFiles {
    #[arg(long, requires_all = ["frequency", "dual"])]
    semantic: Option<PathBuf>,
    #[arg(long, requires_all = ["semantic", "dual"])]
    frequency: Option<PathBuf>,
    #[arg(long, requires_all = ["semantic", "frequency"])]
    dual: Option<PathBuf>,
}

impl AgentFiles {
    fn panel(&self) -> Result<Option<AgentPanel>> {
        let (Some(s), Some(f), Some(d)) = (&self.semantic, &self.frequency, &self.dual) else {
            return Ok(None);
        };
        Ok(Some(AgentPanel::from_stores([
            ingest_agent_file(s, AgentKind::Semantic)?,
            ingest_agent_file(f, AgentKind::Frequency)?,
            ingest_agent_file(d, AgentKind::DualStream)?,
        ])))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Cold start then GRPO; writes config, metrics, checkpoints and eval.
    Train(RunArgs),
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset JSONL; defaults to the config's evaluation set.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        agents: AgentFiles,
        /// Also write the decoded completions as JSONL.
        #[arg(long)]
        completions: Option<PathBuf>,
    },
    /// Score completion transcripts against labels.
    RewardCheck {
        #[arg(long)]
        completions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        agents: AgentFiles,
        /// Reward weights and BCE epsilon come from here when given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output JSONL; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run ablation arms on shared data.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated arms; all when omitted.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<Arm>,
    },
    /// Write the synthetic train/held-out sets and per-agent files.
    MakeData(RunArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or(LOG_ENV, "info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let outcome = pipeline::cmd_train(&cfg)?;
            print_json(&outcome.eval)?;
            let sha = checkpoint::file_sha256(&cfg.output_dir.join(FINAL_CHECKPOINT))?;
            log::info!("wrote {} (sha256 {sha})", cfg.output_dir.display());
        }
        Command::Eval {
            run,
            checkpoint,
            dataset,
            agents,
            completions,
        } => {
            let cfg = run.resolve()?;
            let data = match dataset {
                Some(p) => read_dataset(&p, agents.panel()?.as_ref())
                    .with_context(|| format!("reading {}", p.display()))?,
                None => pipeline::prepare_data(&cfg)?.eval_set().to_vec(),
            };
            let (report, texts) = pipeline::cmd_eval(&checkpoint, &data, &cfg.rewards)?;
            print_json(&report)?;
            if run.out.is_some() {
                std::fs::create_dir_all(&cfg.output_dir)?;
                pipeline::write_json_pretty(&cfg.output_dir.join(EVAL_FILE), &report)?;
            }
            if let Some(path) = completions {
                let mut w = BufWriter::new(File::create(&path)?);
                for (inst, c) in data.iter().zip(texts) {
                    let rec = CompletionRecord {
                        id: inst.id.clone(),
                        completion: c.0,
                    };
                    serde_json::to_writer(&mut w, &rec)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
        }
        Command::RewardCheck {
            completions,
            labels,
            agents,
            config,
            out,
        } => {
            let rewards = match config {
                Some(p) => RunConfig::load(&p)?.rewards,
                None => RunConfig::default().rewards,
            };
            let panel = agents.panel()?;
            let sink: Box<dyn Write> = match &out {
                Some(p) => Box::new(BufWriter::new(File::create(p)?)),
                None => Box::new(io::stdout().lock()),
            };
            reward_check(&completions, &labels, panel.as_ref(), &rewards, sink)?;
        }
        Command::Ablate { run, arms } => {
            let cfg = run.resolve()?;
            let arms = if arms.is_empty() { Arm::ALL.to_vec() } else { arms };
            let results = pipeline::cmd_ablate(&cfg, &arms)?;
            for (arm, o) in &results {
                println!(
                    "{arm:<11} accuracy {:.4}  format {:.4}  json {:.4}  agentic {:.4}",
                    o.eval.mean_accuracy, o.eval.format_rate, o.eval.json_rate, o.eval.mean_agentic
                );
            }
        }
        Command::MakeData(args) => {
            let cfg = args.resolve()?;
            let data = pipeline::prepare_data(&cfg)?;
            make_data(&cfg.output_dir, &data)?;
        }
    }
    Ok(())
}

fn make_data(dir: &Path, data: &pipeline::PreparedData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_dataset(&dir.join("train.jsonl"), &data.train)?;
    write_dataset(&dir.join("heldout.jsonl"), &data.heldout)?;
    for kind in AgentKind::ALL {
        let mut records = agent_records(&data.train, kind);
        records.extend(agent_records(&data.heldout, kind));
        write_agent_file(&dir.join(format!("agent_{}.jsonl", kind.key().trim_start_matches("prob_"))), &records)?;
    }
    log::info!(
        "wrote {} train and {} held-out instances to {}",
        data.train.len(),
        data.heldout.len(),
        dir.display()
    );
    Ok(())
}
