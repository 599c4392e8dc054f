use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::corpus::{generate_synthetic, write_conll, SyntheticSpec};
use crate::error::{Error, Result};

use super::ablation::run_ablation;
use super::checkpoint::read_checkpoint;
use super::config::{Dataset, Mode, RunConfig};
use super::gradsuite::{run_grad_suite, GRAD_EPSILON, GRAD_TOLERANCE};
use super::metrics::{write_json_lines, MetricsRecord, TrainRecord};
use super::pipeline::{choose_alpha, evaluate_cell, test_episodes, train_to_checkpoint, validation_episodes, Model};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mcml", version, about = "Few-shot slot tagging with prototype memory and adaption")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic CoNLL corpus (`--config` is a synthetic spec file).
    GenData(CommonArgs),
    /// Meta-train one seed and write a checkpoint plus the training log.
    Train(CommonArgs),
    /// Evaluate a checkpoint on the target domains.
    Eval(CommonArgs),
    /// Run the baseline / A / M / AM ablation over all seeds.
    Ablate(CommonArgs),
    /// Finite-difference check of every loss.
    GradCheck(GradArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed(s).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output path (CoNLL for gen-data, JSON lines otherwise).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Checkpoint written by `train` and read by `eval`.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0, value_name = "N")]
    seed: u64,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 20, value_name = "N")]
    instances: usize,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse()
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    EXIT_USAGE
                }
            };
            return code;
        }
    };
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(&a, stdout),
        Command::Train(a) => cmd_train(&a, stdout),
        Command::Eval(a) => cmd_eval(&a, stdout),
        Command::Ablate(a) => cmd_ablate(&a, stdout),
        Command::GradCheck(a) => grad_check_cmd(&a, stdout),
    };
    match outcome {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn usage(message: impl Into<String>) -> Error {
    Error::Config(message.into())
}

fn load_config(args: &CommonArgs) -> Result<RunConfig> {
    match &args.config {
        None => Ok(RunConfig::default()),
        Some(p) if !p.exists() => Err(usage(format!("config file {} does not exist", p.display()))),
        Some(p) => RunConfig::read(p).map_err(|e| match e {
            Error::Config(_) => e,
            other => usage(format!("{}: {other}", p.display())),
        }),
    }
}

fn out_path(args: &CommonArgs, cfg: &RunConfig) -> Option<PathBuf> {
    args.out.clone().or_else(|| cfg.out.clone())
}

fn gen_data(args: &CommonArgs, stdout: &mut dyn Write) -> Result<i32> {
    let mut spec = match &args.config {
        None => SyntheticSpec::desk_default(),
        Some(p) if !p.exists() => return Err(usage(format!("spec file {} does not exist", p.display()))),
        Some(p) => SyntheticSpec::read(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let out = args.out.as_ref().ok_or_else(|| usage("gen-data needs --out PATH"))?;
    let corpus = generate_synthetic(&spec)?;
    write_conll(&corpus, out)?;
    let _ = writeln!(
        stdout,
        "wrote {} sentences in {} domains to {}",
        corpus.num_sentences(),
        corpus.domains().len(),
        out.display()
    );
    Ok(EXIT_OK)
}

fn cmd_train(args: &CommonArgs, stdout: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(args)?;
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    let mode = args.mode.unwrap_or(cfg.mode);
    let data = Dataset::load(&cfg.data)?;
    let checkpoint = args.checkpoint.clone().or_else(|| cfg.checkpoint.clone());
    let trained = train_to_checkpoint(&cfg, &data, seed, mode, checkpoint.as_deref())?;
    let records: Vec<TrainRecord> = trained
        .log
        .iter()
        .map(|e| TrainRecord {
            seed,
            mode: mode.to_string(),
            shot: cfg.episode.k_shot,
            episode: e.episode,
            episode_id: e.episode_id,
            domain: e.domain.clone(),
            ner_loss: e.ner_loss,
            memory_loss: e.memory_loss,
            memory_terms: e.memory_terms,
        })
        .collect();
    if let Some(out) = out_path(args, &cfg) {
        write_json_lines(&out, &records)?;
    }
    let last = trained.log.last();
    let _ = writeln!(
        stdout,
        "trained seed {seed} mode {mode}: {} episodes, final ner loss {:.4}, {} memory records{}",
        trained.log.len(),
        last.map_or(f64::NAN, |e| e.ner_loss),
        trained.memory.len(),
        checkpoint.map(|p| format!(", checkpoint {}", p.display())).unwrap_or_default()
    );
    Ok(EXIT_OK)
}

/// Evaluates a trained model on every target domain of `data`.
pub fn evaluate_targets(
    model: &Model,
    memory: &crate::memory::MemoryStore,
    cfg: &RunConfig,
    data: &Dataset,
    seed: u64,
    mode: Mode,
) -> Result<Vec<MetricsRecord>> {
    let shot = cfg.episode.k_shot;
    let alpha = if mode.use_adaption() {
        let validation = validation_episodes(cfg, data, seed, shot)?;
        Some(choose_alpha(model, memory, &validation, cfg)?)
    } else {
        None
    };
    let mut records = Vec::new();
    for domain in &data.target {
        let started = Instant::now();
        let episodes = test_episodes(cfg, data, seed, shot, domain)?;
        let cell = evaluate_cell(model, memory, &episodes, cfg, mode, alpha)?;
        let s = cell.counts.scores();
        records.push(MetricsRecord {
            seed,
            domain: domain.clone(),
            shot,
            mode: mode.to_string(),
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            episodes: cell.episodes.len(),
            episode_losses: cell.episodes.iter().map(|e| e.loss).collect(),
            episode_f1: cell.episodes.iter().map(|e| e.f1).collect(),
            alpha: cell.alpha,
            adapted_episodes: cell.episodes.iter().filter(|e| e.adapted).count(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
            error: None,
        });
    }
    Ok(records)
}

fn cmd_eval(args: &CommonArgs, stdout: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(args)?;
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    let mode = args.mode.unwrap_or(cfg.mode);
    let path = args
        .checkpoint
        .clone()
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| usage("eval needs --checkpoint PATH or [run] checkpoint"))?;
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    let data = Dataset::load(&cfg.data)?;
    let (params, memory) = read_checkpoint(&path)?;
    let model = Model::from_params(params, data.corpus.vocab())?;
    let records = evaluate_targets(&model, &memory, &cfg, &data, seed, mode)?;
    if let Some(out) = out_path(args, &cfg) {
        write_json_lines(&out, &records)?;
    }
    for r in &records {
        let _ = writeln!(
            stdout,
            "{} {}-shot {}: P {:.4} R {:.4} F1 {:.4}",
            r.domain, r.shot, r.mode, r.precision, r.recall, r.f1
        );
    }
    Ok(EXIT_OK)
}

fn cmd_ablate(args: &CommonArgs, stdout: &mut dyn Write) -> Result<i32> {
    let mut cfg = load_config(args)?;
    if let Some(base) = args.seed {
        let n = cfg.seeds.len() as u64;
        cfg.seeds = (0..n).map(|i| base.wrapping_add(i)).collect();
    }
    if let Some(mode) = args.mode {
        cfg.modes = vec![mode];
    }
    let data = Dataset::load(&cfg.data)?;
    let table = run_ablation(&cfg, &data)?;
    if let Some(out) = out_path(args, &cfg) {
        write_json_lines(&out, &table.records)?;
    }
    let _ = write!(stdout, "{}", table.render());
    for r in table.errors() {
        let _ = writeln!(
            stdout,
            "failed cell seed {} {} {}-shot {}: {}",
            r.seed,
            r.domain,
            r.shot,
            r.mode,
            r.error.as_deref().unwrap_or("")
        );
    }
    Ok(EXIT_OK)
}

fn grad_check_cmd(args: &GradArgs, stdout: &mut dyn Write) -> Result<i32> {
    let records = run_grad_suite(args.seed, args.instances)?;
    let _ = writeln!(stdout, "epsilon {GRAD_EPSILON:e}, tolerance {GRAD_TOLERANCE:e}");
    for r in &records {
        let _ = writeln!(
            stdout,
            "{:<22} instances {:>3}  max rel error {:.3e}  {}",
            r.loss,
            r.instances,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    if let Some(out) = &args.out {
        write_json_lines(out, &records)?;
    }
    Ok(if records.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_RUNTIME })
}

/// Entry point for the binary.
pub fn main_with_env() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
