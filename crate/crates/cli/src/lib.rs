//! Subcommands of the `eeglang` binary.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use eeglang::config::RunConfig;
use eeglang::data::load_corpus;
use eeglang::eval::{self, datasets_of, dump_embeddings, evaluate_instruction_levels, prepare_corpus, reports_to_csv, reports_to_json};
use eeglang::instruct::{Catalog, InstructionLevel, TaskSet};
use eeglang::signal::etrial::{read_corpus, write_corpus};
use eeglang::signal::Montage65;
use eeglang::textembed::{EmbeddingStore, Embedder};
use eeglang::train::{run_pretrain, run_tune, Checkpoint, RunOptions, Stage};
use eeglang::Error;

pub const EXIT_CODES: &[(i32, &str, &str)] = &[
    (0, "ok", "success"),
    (1, "internal", "unexpected failure"),
    (2, "usage", "invalid command line"),
    (3, "config", "invalid configuration file or key"),
    (4, "missing_file", "an input file or directory does not exist"),
    (5, "dim_mismatch", "embedding or tensor dimensions disagree"),
    (6, "unresolvable_instruction", "instruction or dataset has no embedding or catalog entry"),
    (7, "missing_label", "a trial label has no prototype"),
    (8, "checkpoint", "checkpoint is corrupt, of another version or of the wrong stage"),
    (9, "output_exists", "output exists; pass --force to overwrite"),
    (10, "io", "read or write failure"),
    (11, "invalid_input", "input data rejected"),
];

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    OutputExists(PathBuf),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::OutputExists(p) => write!(f, "{} already exists; pass --force to overwrite", p.display()),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        let code = self.exit_code();
        EXIT_CODES.iter().find(|c| c.0 == code).map(|c| c.1).unwrap_or("internal")
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::OutputExists(_) => 9,
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Config { .. } => 3,
                Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 4,
                Error::Io { .. } => 10,
                Error::Dim { .. } => 5,
                Error::MissingText(_) | Error::MissingCatalog(_) => 6,
                Error::MissingLabel(_) => 7,
                Error::Version { .. } | Error::Corrupt(_) => 8,
                Error::Parse { .. } | Error::Invalid(_) | Error::Shape(_) | Error::UnknownChannel(_) | Error::NonFinite(_) => 11,
                Error::Json(_) => 1,
            },
        }
    }

    /// `error code=<n> kind=<kind> message=<json string>`
    pub fn line(&self) -> String {
        format!(
            "error code={} kind={} message={}",
            self.exit_code(),
            self.kind(),
            serde_json::to_string(&self.to_string()).expect("string serializes")
        )
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "eeglang", version, about = "EEG reconstruction pretraining and instruction-conditioned prototype alignment")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Run seed; overrides train.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for preprocessing and evaluation. Results do not
    /// depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic corpus as an ETRIAL directory.
    Synth,
    /// Reconstruction pretraining.
    Pretrain {
        /// Resume from this pretrain checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Instruction tuning.
    Tune {
        /// Pretrain checkpoint to start from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// EMBTXT store; pseudo-embeddings when absent.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Evaluate a tuned checkpoint on the test split at several instruction
    /// levels.
    Eval {
        /// Tuned checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// EMBTXT store the model was tuned with.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Comma-separated: none, task, task_and_targets.
        #[arg(long, value_delimiter = ',', default_value = "none,task,task_and_targets")]
        levels: Vec<InstructionLevel>,
    },
    /// Classify one trial.
    Infer {
        /// Tuned checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// EMBTXT store the model was tuned with.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Instruction text; the tuned level's catalog string when absent.
        #[arg(long)]
        instruction: Option<String>,
        /// ETRIAL directory holding the trial.
        #[arg(long)]
        trial: PathBuf,
        /// Trial to pick from the directory; the first when absent.
        #[arg(long)]
        trial_id: Option<String>,
    },
    /// Write test-split head outputs and prototypes as CSV.
    Dump {
        /// Tuned checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// EMBTXT store the model was tuned with.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Comma-separated: none, task, task_and_targets.
        #[arg(long, value_delimiter = ',', default_value = "task_and_targets")]
        levels: Vec<InstructionLevel>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain { .. } => "pretrain",
            Command::Tune { .. } => "tune",
            Command::Eval { .. } => "eval",
            Command::Infer { .. } => "infer",
            Command::Dump { .. } => "dump",
        }
    }
}

pub fn help_text() -> String {
    let mut s = String::from("Exit codes:\n");
    for (code, kind, doc) in EXIT_CODES {
        s.push_str(&format!("  {code:>2}  {kind:<25} {doc}\n"));
    }
    s.push_str("\nErrors are printed to stderr as one line:\n  error code=<n> kind=<kind> message=\"...\"\n");
    s.push_str("\nConfiguration keys (section, key = default):\n");
    s.push_str(&RunConfig::key_reference());
    s
}

pub fn command() -> clap::Command {
    Cli::command().after_long_help(help_text())
}

pub fn parse_from<I, T>(args: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = command().try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

/// Record of one command invocation, written as `<command>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// Resolved configuration; writing it to a file and passing it with
    /// `--config` reproduces the run.
    pub config: RunConfig,
    pub seed: u64,
    pub threads: usize,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<PathBuf>,
    pub counts: BTreeMap<String, usize>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// What a command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub config: RunConfig,
    pub artifacts: Vec<PathBuf>,
    pub counts: BTreeMap<String, usize>,
    /// Lines for stdout.
    pub lines: Vec<String>,
}

struct Ctx<'a> {
    global: &'a Global,
}

impl Ctx<'_> {
    fn config(&self, fallback: Option<&RunConfig>) -> CliResult<RunConfig> {
        let mut cfg = match (&self.global.config, fallback) {
            (Some(p), _) => {
                let mut cfg = RunConfig::load(p)?;
                // corpus paths are relative to the config file
                let corpus = Path::new(&cfg.data.corpus);
                if !cfg.data.corpus.is_empty() && corpus.is_relative() {
                    if let Some(dir) = p.parent() {
                        cfg.data.corpus = dir.join(corpus).to_string_lossy().into_owned();
                    }
                }
                cfg
            }
            (None, Some(c)) => c.clone(),
            (None, None) => RunConfig::default(),
        };
        if let Some(s) = self.global.seed {
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn artifact(&self, name: &str) -> CliResult<PathBuf> {
        let p = self.global.out.join(name);
        if p.exists() && !self.global.force {
            return Err(CliError::OutputExists(p));
        }
        Ok(p)
    }

    fn write(&self, name: &str, text: &str, out: &mut Outcome) -> CliResult<()> {
        let p = self.artifact(name)?;
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        out.artifacts.push(p);
        Ok(())
    }
}

fn load_store(path: Option<&Path>, dim: usize) -> CliResult<Option<EmbeddingStore>> {
    let Some(p) = path else { return Ok(None) };
    let store = EmbeddingStore::load(p)?;
    if store.dim() != dim {
        return Err(Error::Dim {
            what: format!("text store {}", p.display()),
            expected: dim,
            found: store.dim(),
        }
        .into());
    }
    Ok(Some(store))
}

fn load_checkpoint(path: &Path, stage: Stage) -> CliResult<Checkpoint> {
    let c = Checkpoint::load(path)?;
    if c.stage != stage {
        return Err(Error::Corrupt(format!("{} is a {} checkpoint, expected {stage}", path.display(), c.stage)).into());
    }
    Ok(c)
}

fn tuned_tasks(c: &Checkpoint) -> CliResult<&TaskSet> {
    c.tasks
        .as_ref()
        .ok_or_else(|| Error::Corrupt("tune checkpoint carries no tasks".into()).into())
}

/// Checks a supplied store against the one the model was tuned with.
fn check_store(tasks: &TaskSet, store: Option<EmbeddingStore>) -> CliResult<Option<Embedder>> {
    match store {
        None => Ok(None),
        Some(s) => Ok(Some(tasks.source.embedder(Some(s))?)),
    }
}

pub fn run(cli: &Cli) -> CliResult<Outcome> {
    let ctx = Ctx { global: &cli.global };
    let g = &cli.global;
    if g.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let mut out = Outcome::default();
    match &cli.command {
        Command::Synth => {
            let mut cfg = ctx.config(None)?;
            cfg.data.corpus.clear();
            if g.out.is_dir() && std::fs::read_dir(&g.out).map_err(|e| Error::io(&g.out, e))?.next().is_some() && !g.force {
                return Err(CliError::OutputExists(g.out.clone()));
            }
            let trials = load_corpus(&cfg.data, cfg.signal.target_rate, cfg.train.seed)?;
            write_corpus(&g.out, &trials)?;
            out.artifacts.push(g.out.join(eeglang::signal::etrial::MANIFEST));
            out.counts.insert("trials".into(), trials.len());
            for t in &trials {
                *out.counts.entry(format!("dataset:{}", t.dataset.as_deref().unwrap_or(""))).or_default() += 1;
            }
            out.lines.push(format!("wrote {} trials to {}", trials.len(), g.out.display()));
            out.config = cfg;
        }
        Command::Pretrain { checkpoint } => {
            let resume = checkpoint.as_deref().map(|p| load_checkpoint(p, Stage::Pretrain)).transpose()?;
            let cfg = ctx.config(resume.as_ref().map(|c| &c.config))?;
            let ckpt_path = ctx.artifact("pretrain.ckpt")?;
            let data = prepare_corpus(&cfg, cfg.train.seed)?;
            count_split(&mut out, &data);
            let ck = run_pretrain(&data.train, &data.val, &cfg, RunOptions { resume, stop_after: None })?;
            ck.save(&ckpt_path)?;
            out.artifacts.push(ckpt_path);
            ctx.write("pretrain_loss.csv", &ck.curve.to_csv(), &mut out)?;
            out.lines.push(final_losses(&ck));
            out.config = cfg;
        }
        Command::Tune { checkpoint, store } => {
            let pre = checkpoint.as_deref().map(|p| load_checkpoint(p, Stage::Pretrain)).transpose()?;
            let cfg = ctx.config(pre.as_ref().map(|c| &c.config))?;
            let store = load_store(store.as_deref(), cfg.instruct.text_dim)?;
            let embedder = match store {
                Some(s) => Embedder::new(Some(s), None, cfg.instruct.text_dim),
                None => Embedder::pseudo(cfg.train.text_seed, cfg.instruct.text_dim),
            };
            let ckpt_path = ctx.artifact("tune.ckpt")?;
            let data = prepare_corpus(&cfg, cfg.train.seed)?;
            count_split(&mut out, &data);
            let tasks = TaskSet::build(&datasets_of(&data.train), &Catalog::bundled(), &embedder)?;
            let ck = run_tune(&data.train, &data.val, pre.as_ref(), &tasks, &cfg, RunOptions::default())?;
            ck.save(&ckpt_path)?;
            out.artifacts.push(ckpt_path);
            ctx.write("tune_loss.csv", &ck.curve.to_csv(), &mut out)?;
            out.lines.push(final_losses(&ck));
            out.config = cfg;
        }
        Command::Eval { checkpoint, store, levels } => {
            let ck = load_checkpoint(checkpoint, Stage::Tune)?;
            let tasks = tuned_tasks(&ck)?;
            check_store(tasks, load_store(store.as_deref(), ck.config.instruct.text_dim)?)?;
            let cfg = ctx.config(Some(&ck.config))?;
            let data = prepare_corpus(&cfg, cfg.train.seed)?;
            let model = ck.model()?;
            let reports = evaluate_instruction_levels(&model, tasks, &data.test, levels)?;
            ctx.write("eval.json", &reports_to_json(&reports)?, &mut out)?;
            ctx.write("eval.csv", &reports_to_csv(&reports), &mut out)?;
            out.counts.insert("test_trials".into(), data.test.len());
            out.counts.insert("reports".into(), reports.len());
            for r in &reports {
                out.lines.push(format!(
                    "{} {}: balanced_accuracy {:.4} kappa {:.4} n {}",
                    r.dataset, r.level, r.balanced_accuracy, r.kappa, r.n_samples
                ));
            }
            out.config = cfg;
        }
        Command::Infer {
            checkpoint,
            store,
            instruction,
            trial,
            trial_id,
        } => {
            let ck = load_checkpoint(checkpoint, Stage::Tune)?;
            let tasks = tuned_tasks(&ck)?;
            let cfg = ck.config.clone();
            let supplied = load_store(store.as_deref(), cfg.instruct.text_dim)?;
            let trials = read_corpus(trial)?;
            let raw = match trial_id {
                Some(id) => trials
                    .iter()
                    .find(|t| &t.trial_id == id)
                    .ok_or_else(|| Error::Invalid(format!("no trial `{id}` in {}", trial.display())))?,
                None => trials
                    .first()
                    .ok_or_else(|| Error::Invalid(format!("{} holds no trials", trial.display())))?,
            };
            let dataset = match &raw.dataset {
                Some(d) => d.clone(),
                None if tasks.tasks.len() == 1 => tasks.tasks[0].dataset.clone(),
                None => cfg.data.default_dataset.clone(),
            };
            let binding = tasks.get(&dataset)?;
            let level = cfg.instruct.train_level;
            let text = instruction.clone().unwrap_or_else(|| binding.entry.instruction(level).to_string());
            let stored = InstructionLevel::ALL
                .iter()
                .find(|&&l| binding.entry.instruction(l) == text)
                .map(|&l| binding.instruction(l).to_vec());
            let e_ins = match stored {
                Some(v) => v,
                None => tasks.source.embedder(supplied)?.embed(&text)?.vector,
            };
            let model = ck.model()?;
            let prepared = model.prepare(raw, &Montage65::standard(), &cfg.signal)?;
            let h = model.embed_trial(&prepared, &e_ins)?;
            let pred = model.classify(&h, &dataset, &binding.bank)?;
            out.lines.push(format!("trial {} dataset {dataset}", raw.trial_id));
            out.lines.push(format!("instruction {text:?}"));
            out.lines.push(format!("predicted {}", pred.class));
            for (c, s) in binding.bank.classes.iter().zip(&pred.scores) {
                out.lines.push(format!("score {c} {s:.6}"));
            }
            let json = serde_json::json!({
                "trial_id": raw.trial_id,
                "dataset": dataset,
                "instruction": text,
                "predicted": pred.class,
                "classes": binding.bank.classes,
                "scores": pred.scores,
            });
            ctx.write("infer.json", &serde_json::to_string_pretty(&json).map_err(Error::from)?, &mut out)?;
            out.config = cfg;
        }
        Command::Dump { checkpoint, store, levels } => {
            let ck = load_checkpoint(checkpoint, Stage::Tune)?;
            let tasks = tuned_tasks(&ck)?;
            check_store(tasks, load_store(store.as_deref(), ck.config.instruct.text_dim)?)?;
            let cfg = ctx.config(Some(&ck.config))?;
            let data = prepare_corpus(&cfg, cfg.train.seed)?;
            let model = ck.model()?;
            let path = ctx.artifact("embeddings.csv")?;
            dump_embeddings(&model, tasks, &data.test, levels, &path)?;
            out.artifacts.push(path.clone());
            out.counts.insert("trials".into(), data.test.len());
            out.lines.push(format!("wrote {}", path.display()));
            out.config = cfg;
        }
    }
    Ok(out)
}

fn count_split(out: &mut Outcome, data: &eval::PreparedSplit) {
    out.counts.insert("train_trials".into(), data.train.len());
    out.counts.insert("val_trials".into(), data.val.len());
    out.counts.insert("test_trials".into(), data.test.len());
}

fn final_losses(ck: &Checkpoint) -> String {
    let last = |split: &str| ck.curve.split(split).last().copied();
    format!(
        "{} finished after {} updates: train loss {:?} val loss {:?}",
        ck.stage,
        ck.schedule.updates,
        last("train"),
        last("val")
    )
}

/// Runs a parsed command, then writes its manifest.
pub fn execute(cli: &Cli) -> CliResult<Outcome> {
    let started = unix_now();
    std::fs::create_dir_all(&cli.global.out).map_err(|e| Error::io(&cli.global.out, e))?;
    let out = run(cli)?;
    let manifest = RunManifest {
        command: cli.command.name().into(),
        config_path: cli.global.config.clone(),
        config: out.config.clone(),
        seed: out.config.train.seed,
        threads: cli.global.threads,
        out_dir: cli.global.out.clone(),
        started_unix: started,
        finished_unix: unix_now(),
        artifacts: out.artifacts.clone(),
        counts: out.counts.clone(),
    };
    let path = cli.global.out.join(format!("{}.manifest.json", cli.command.name()));
    let json = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}
