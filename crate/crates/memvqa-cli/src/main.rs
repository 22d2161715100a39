//! Command-line front end: synthetic task generation, training,
//! evaluation, and inspection. All outputs are JSON or JSON lines so any
//! plotting toolchain can consume them.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags,
//! missing inputs, invalid configuration).

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use memvqa::data::{
    features_dir, questions_path, read_question_lines, build_vocabularies, generate_synth_task,
    Dataset, SynthManifest, SynthTaskConfig,
};
use memvqa::model::{build_forward, next_stream_state, ForwardOptions, StreamState};
use memvqa::numeric::Graph;
use memvqa::training::{evaluate, train, Checkpoint, EvalMode, EvalReport, TrainConfig};
use serde::Serialize;
use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// CLI numeric precision. Checkpoints written here hold f32 tensors and
/// reload only at the same precision.
type P = f32;

#[derive(Parser)]
#[command(name = "memvqa", version, about = "Memory-augmented co-attention VQA toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic heavy-tailed task directory.
    GenSynth(GenSynthArgs),
    /// Train a model on a task directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Dump attention weights and memory traces for plotting.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Number of answer classes.
    #[arg(long, default_value_t = 50)]
    classes: usize,
    /// Zipf exponent of the class distribution.
    #[arg(long, default_value_t = 1.2)]
    zipf: f64,
    /// Distinct pseudo-words available to questions.
    #[arg(long, default_value_t = 50)]
    word_vocab: usize,
    /// Regions per image.
    #[arg(long, default_value_t = 16)]
    regions: usize,
    /// Feature width per region.
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    #[arg(long, default_value_t = 5000)]
    train_examples: usize,
    #[arg(long, default_value_t = 1000)]
    test_examples: usize,
    /// Noise standard deviation on every feature entry.
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file mirroring the training config; missing fields take
    /// defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task directory (as produced by gen-synth).
    #[arg(long)]
    data: PathBuf,
    /// Run directory: receives train_config.json and checkpoint/.
    #[arg(long)]
    out: PathBuf,
    /// Train the ablation arm: the head sees zeros instead of memory
    /// reads.
    #[arg(long)]
    no_external_memory: bool,
    /// Write into a non-empty run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    OpenEnded,
    MultipleChoice,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::OpenEnded => EvalMode::OpenEnded,
            ModeArg::MultipleChoice => EvalMode::MultipleChoice,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task directory.
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_enum, default_value = "open-ended")]
    mode: ModeArg,
    /// Also write the metrics JSON here (stdout always receives it).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-question predictions as JSON lines.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint directory written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task directory.
    #[arg(long)]
    data: PathBuf,
    /// Split to inspect.
    #[arg(long, default_value = "test")]
    split: String,
    /// Question to dump attention weights for.
    #[arg(long)]
    question_id: u64,
    /// Also write the attention JSON here (stdout always receives it).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stream the split with memory writes enabled and log one JSON line
    /// of memory weights per step.
    #[arg(long)]
    memory_trace: Option<PathBuf>,
}

/// Failure caused by how the tool was invoked; maps to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<UsageError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

/// Refuses to write into a non-empty directory unless forced.
fn claim_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.is_file() {
        return Err(usage_err(format!("{} is a file", dir.display())));
    }
    if dir.is_dir() {
        let occupied = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(usage_err(format!(
                "{} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    Ok(())
}

fn require_dir(dir: &Path, what: &str) -> Result<()> {
    if !dir.is_dir() {
        return Err(usage_err(format!(
            "{what} {} does not exist or is not a directory",
            dir.display()
        )));
    }
    Ok(())
}

fn write_json_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<()> {
    let config = SynthTaskConfig {
        classes: args.classes,
        zipf_exponent: args.zipf,
        word_vocab: args.word_vocab,
        regions: args.regions,
        feature_dim: args.feature_dim,
        train_examples: args.train_examples,
        test_examples: args.test_examples,
        noise_std: args.noise_std,
        seed: args.seed,
    };
    config.validate().map_err(|e| usage_err(e.to_string()))?;
    claim_output_dir(&args.out, args.force)?;
    generate_synth_task(&config, &args.out)?;
    println!(
        "wrote {} train and {} test examples across {} classes to {}",
        config.train_examples,
        config.test_examples,
        config.classes,
        args.out.display()
    );
    Ok(())
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| usage_err(format!("reading config {}: {e}", path.display())))?;
    let config: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| usage_err(format!("parsing config {}: {e}", path.display())))?;
    config.validate().map_err(|e| usage_err(e.to_string()))?;
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    require_dir(&args.data, "data directory")?;
    let questions = questions_path(&args.data, "train");
    if !questions.is_file() {
        return Err(usage_err(format!(
            "no train split at {}",
            questions.display()
        )));
    }
    let mut config = load_train_config(args.config.as_deref())?;
    if args.no_external_memory {
        config.external_memory_enabled = false;
    }
    claim_output_dir(&args.out, args.force)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let records = read_question_lines(&questions)?;
    let (words, answers, coverage) = build_vocabularies(&records, config.vocab_k)?;
    let dataset = Dataset::<P>::load(&questions, &features_dir(&args.data), &words, &answers)?;

    // The resolved config sits beside the outputs so the run can be
    // reproduced from the directory alone.
    let config_json = serde_json::to_string_pretty(&config)?;
    write_json_file(&args.out.join("train_config.json"), &format!("{config_json}\n"))?;

    let checkpoint = train(&config, &dataset, &words, &answers, coverage)?;
    let ckpt_dir = args.out.join("checkpoint");
    checkpoint.save(&ckpt_dir)?;

    let last = checkpoint.metrics.last().expect("training ran at least one step");
    println!(
        "trained {} epochs ({} steps); final train accuracy {:.4}, loss {:.6}; checkpoint at {}",
        checkpoint.epochs_completed,
        checkpoint.global_step,
        last.train_acc,
        last.loss,
        ckpt_dir.display()
    );
    Ok(())
}

/// Rare answers marked by the task manifest, when one exists.
fn rare_answers_from_manifest(data_dir: &Path) -> Result<Option<BTreeSet<String>>> {
    let path = data_dir.join("manifest.json");
    if !path.is_file() {
        return Ok(None);
    }
    let manifest = SynthManifest::load(&path)?;
    Ok(Some(
        manifest
            .rare_class_ids
            .iter()
            .filter_map(|&id| manifest.answer_of(id).map(str::to_string))
            .collect(),
    ))
}

fn load_eval_dataset(
    data_dir: &Path,
    split: &str,
    ckpt: &Checkpoint<P>,
) -> Result<Dataset<P>> {
    require_dir(data_dir, "data directory")?;
    let questions = questions_path(data_dir, split);
    if !questions.is_file() {
        return Err(usage_err(format!(
            "no {split} split at {}",
            questions.display()
        )));
    }
    Ok(Dataset::<P>::load(
        &questions,
        &features_dir(data_dir),
        &ckpt.word_vocab,
        &ckpt.answer_vocab,
    )?)
}

#[derive(Serialize)]
struct EvalRunConfig {
    checkpoint: String,
    data: String,
    split: String,
    mode: String,
}

#[derive(Serialize)]
struct EvalOutput {
    config: EvalRunConfig,
    metrics: EvalReport,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::<P>::load(&args.checkpoint)?;
    let dataset = load_eval_dataset(&args.data, &args.split, &ckpt)?;
    let mode: EvalMode = args.mode.into();
    if mode == EvalMode::MultipleChoice {
        if let Some(e) = dataset.examples.iter().find(|e| e.multiple_choices.is_none()) {
            return Err(usage_err(format!(
                "question {} has no multiple-choice candidates; this split cannot be \
                 evaluated in multiple-choice mode",
                e.question_id
            )));
        }
    }
    let rare = rare_answers_from_manifest(&args.data)?;
    let report = evaluate(&ckpt, &dataset, mode, rare.as_ref())?;

    if let Some(path) = &args.predictions {
        let mut text = String::new();
        for p in &report.predictions {
            text.push_str(&serde_json::to_string(p)?);
            text.push('\n');
        }
        write_json_file(path, &text)?;
    }
    let output = EvalOutput {
        config: EvalRunConfig {
            checkpoint: args.checkpoint.display().to_string(),
            data: args.data.display().to_string(),
            split: args.split.clone(),
            mode: mode.as_str().to_string(),
        },
        metrics: report,
    };
    let json = serde_json::to_string_pretty(&output)?;
    println!("{json}");
    if let Some(path) = &args.out {
        write_json_file(path, &format!("{json}\n"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct InspectRunConfig {
    checkpoint: String,
    data: String,
    split: String,
}

#[derive(Serialize)]
struct AttentionDump {
    config: InspectRunConfig,
    question_id: u64,
    question_tokens: Vec<String>,
    answer: String,
    prob: f64,
    /// Attention over image regions; sums to 1.
    alpha_regions: Vec<f64>,
    /// Attention over question words; sums to 1.
    alpha_words: Vec<f64>,
    /// Positions of the three largest word weights, descending.
    top_word_indices: Vec<usize>,
}

#[derive(Serialize)]
struct TraceRow {
    step: usize,
    question_id: u64,
    read_weights: Vec<f64>,
    write_weights: Vec<f64>,
    usage: Vec<f64>,
}

fn to_f64(values: &[P]) -> Vec<f64> {
    values.iter().map(|&v| v as f64).collect()
}

/// Indices of the largest values, descending, ties to the lower index.
fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("attention weights are finite")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let ckpt = Checkpoint::<P>::load(&args.checkpoint)?;
    let dataset = load_eval_dataset(&args.data, &args.split, &ckpt)?;

    let example = dataset
        .examples
        .iter()
        .find(|e| e.question_id == args.question_id)
        .ok_or_else(|| {
            let mut ids: Vec<u64> = dataset.examples.iter().map(|e| e.question_id).collect();
            ids.sort_unstable();
            let shown: Vec<String> = ids.iter().take(50).map(u64::to_string).collect();
            let suffix = if ids.len() > 50 {
                format!(" and {} more", ids.len() - 50)
            } else {
                String::new()
            };
            usage_err(format!(
                "question {} is not in the {} split; available ids: {}{}",
                args.question_id,
                args.split,
                shown.join(", "),
                suffix
            ))
        })?;

    let grid = dataset.grid(&example.image_id)?;
    let mut g = Graph::new();
    let nodes = ckpt.params.register_all(&mut g)?;
    let pass = build_forward(
        &mut g,
        &nodes,
        &ckpt.model_config,
        grid,
        &example.tokens,
        &ckpt.stream,
        ForwardOptions {
            external_memory: ckpt.train_config.external_memory_enabled,
            write_memory: false,
        },
    )?;
    let probs = to_f64(g.value(pass.probs).data());
    let alpha_regions = to_f64(g.value(pass.alpha_regions).data());
    let alpha_words = to_f64(g.value(pass.alpha_words).data());
    let best = memvqa::head::argmax(&probs);
    let dump = AttentionDump {
        config: InspectRunConfig {
            checkpoint: args.checkpoint.display().to_string(),
            data: args.data.display().to_string(),
            split: args.split.clone(),
        },
        question_id: example.question_id,
        question_tokens: example
            .tokens
            .iter()
            .map(|&i| {
                ckpt.word_vocab
                    .token(i)
                    .expect("dataset tokens come from this vocabulary")
                    .to_string()
            })
            .collect(),
        answer: ckpt.answer_vocab.answer(best).to_string(),
        prob: probs[best],
        top_word_indices: top_indices(&alpha_words, 3),
        alpha_regions,
        alpha_words,
    };
    let json = serde_json::to_string_pretty(&dump)?;
    println!("{json}");
    if let Some(path) = &args.out {
        write_json_file(path, &format!("{json}\n"))?;
    }

    if let Some(path) = &args.memory_trace {
        if !ckpt.train_config.external_memory_enabled {
            return Err(usage_err(
                "this checkpoint was trained without external memory; no trace to produce",
            ));
        }
        write_memory_trace(&ckpt, &dataset, path)?;
        eprintln!("memory trace written to {}", path.display());
    }
    Ok(())
}

/// Replays the split in file order from a fresh memory with writes
/// enabled, logging the memory weights after every step.
fn write_memory_trace(ckpt: &Checkpoint<P>, dataset: &Dataset<P>, path: &Path) -> Result<()> {
    let mut state = StreamState::<P>::init(&ckpt.model_config);
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = std::io::BufWriter::new(file);
    for (i, example) in dataset.examples.iter().enumerate() {
        let grid = dataset.grid(&example.image_id)?;
        let mut g = Graph::new();
        let nodes = ckpt.params.register_all(&mut g)?;
        let pass = build_forward(
            &mut g,
            &nodes,
            &ckpt.model_config,
            grid,
            &example.tokens,
            &state,
            ForwardOptions {
                external_memory: true,
                write_memory: true,
            },
        )?;
        state = next_stream_state(&g, &pass, &state);
        let row = TraceRow {
            step: i + 1,
            question_id: example.question_id,
            read_weights: to_f64(state.memory.read.data()),
            write_weights: to_f64(state.memory.write.data()),
            usage: to_f64(state.memory.usage.data()),
        };
        writeln!(out, "{}", serde_json::to_string(&row)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
