//! Command-line pipeline: ingest, export-train, export-config, predict,
//! score, record.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 backend error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use attrib_core::backend::{BackendError, CompletionBackend, RecordingBackend};
use attrib_core::corpus::{annotation_to_doc, corpus_stats, load_corpus, Corpus, CorpusError};
use attrib_core::metrics::{render_report, report_to_json, score_corpus, MetricsError, Subtask};
use attrib_core::pipeline::{
    build_manifest, file_sha256, load_predictions, predictions_from_doc, predictions_to_doc,
    save_manifest, save_predictions, PipelineError, Predictions,
};
use attrib_core::postprocess::PostprocessError;
use attrib_core::prompt::{
    build_training_set, emit_training_config, ExternalTokenCounter, HeuristicTokenCounter,
    TokenCounter, TrainingConfig,
};
use attrib_core::{ReplayBackend, WireBackend};

const AUTH_TOKEN_VAR: &str = "ATTRIB_AUTH_TOKEN";

#[derive(Parser)]
#[command(
    name = "attrib",
    version,
    about = "Speaker attribution for parliamentary debates: prompts, prediction, scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Wire,
    Replay,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubtaskArg {
    Full,
    Roles,
}

impl From<SubtaskArg> for Subtask {
    fn from(value: SubtaskArg) -> Subtask {
        match value {
            SubtaskArg::Full => Subtask::Full,
            SubtaskArg::Roles => Subtask::RolesOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenizerKind {
    Heuristic,
    External,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus file and print its statistics
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Serialize instruction pairs for the cue and role models
    ExportTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "heuristic")]
        tokenizer: TokenizerKind,
        /// Shell command reading text on stdin and printing a token count;
        /// required with --tokenizer external
        #[arg(long)]
        tokenizer_cmd: Option<String>,
    },
    /// Write the fine-tuning hyperparameter file
    ExportConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-step cue/role prediction over a corpus
    Predict {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        backend: BackendKind,
        /// Completions endpoint URL (wire backend)
        #[arg(long)]
        endpoint: Option<String>,
        /// Replay store path (replay backend)
        #[arg(long)]
        replay_store: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        subtask: SubtaskArg,
        /// Concurrent backend requests
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions document against gold annotations
    Score {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        subtask: SubtaskArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run prediction against a wire backend and capture every exchange
    /// into a replay store
    Record {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        replay_store: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        subtask: SubtaskArg,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also write the prediction document here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    Validation(String),
    Backend(String),
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Validation(_) => ExitCode::from(1),
            CliError::Backend(_) => ExitCode::from(2),
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Backend(m) => m,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<PostprocessError> for CliError {
    fn from(e: PostprocessError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(format!("i/o error: {e}"))
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Backend(b) => b.into(),
            PipelineError::Postprocess(p) => p.into(),
            PipelineError::Io(io) => io.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest { corpus } => ingest(&corpus),
        Command::ExportTrain {
            corpus,
            out,
            tokenizer,
            tokenizer_cmd,
        } => export_train(&corpus, &out, tokenizer, tokenizer_cmd),
        Command::ExportConfig { out } => export_config(&out),
        Command::Predict {
            corpus,
            backend,
            endpoint,
            replay_store,
            subtask,
            jobs,
            out,
        } => {
            let backend = make_backend(backend, endpoint, replay_store)?;
            let (corpus, sha) = load_with_hash(&corpus)?;
            let predictions =
                predict_to_dir(&corpus, sha, backend.as_ref(), subtask.into(), jobs, &out)?;
            let total: usize = predictions.values().map(Vec::len).sum();
            println!(
                "predicted {} annotation(s) across {} speech(es) -> {}",
                total,
                predictions.len(),
                out.display()
            );
            Ok(())
        }
        Command::Score {
            gold,
            predictions,
            subtask,
            out,
        } => score(&gold, &predictions, subtask.into(), &out),
        Command::Record {
            corpus,
            endpoint,
            replay_store,
            subtask,
            jobs,
            out,
        } => record(&corpus, &endpoint, &replay_store, subtask.into(), jobs, out),
    }
}

fn load_with_hash(path: &Path) -> Result<(Corpus, String), CliError> {
    let sha = file_sha256(path)?;
    let corpus = load_corpus(path)?;
    Ok((corpus, sha))
}

fn ingest(corpus_path: &Path) -> Result<(), CliError> {
    match load_corpus(corpus_path) {
        Ok(corpus) => {
            print!("{}", corpus_stats(&corpus).render());
            Ok(())
        }
        Err(CorpusError::Invalid(violations)) => {
            for v in &violations {
                eprintln!("{v}");
            }
            Err(CliError::Validation(format!(
                "{} validation violation(s)",
                violations.len()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn export_train(
    corpus_path: &Path,
    out: &Path,
    tokenizer: TokenizerKind,
    tokenizer_cmd: Option<String>,
) -> Result<(), CliError> {
    let counter: Box<dyn TokenCounter> = match tokenizer {
        TokenizerKind::Heuristic => Box::new(HeuristicTokenCounter),
        TokenizerKind::External => {
            let cmd = tokenizer_cmd.ok_or_else(|| {
                CliError::Validation("--tokenizer external requires --tokenizer-cmd".to_string())
            })?;
            Box::new(ExternalTokenCounter::new(cmd))
        }
    };
    let corpus = load_corpus(corpus_path)?;
    let config = TrainingConfig::default();
    let set = build_training_set(&corpus, counter.as_ref(), &config);
    fs::create_dir_all(out)?;
    attrib_core::prompt::write_pairs_jsonl(&set.cue_pairs, out.join("cue_pairs.jsonl"))?;
    attrib_core::prompt::write_pairs_jsonl(&set.role_pairs, out.join("role_pairs.jsonl"))?;
    let report = serde_json::json!({
        "cue_pairs": set.cue_pairs.len(),
        "role_pairs": set.role_pairs.len(),
        "truncated": set.truncation,
    });
    fs::write(
        out.join("truncation_report.json"),
        format!(
            "{}\n",
            serde_json::to_string_pretty(&report).expect("report serializes")
        ),
    )?;
    println!(
        "wrote {} cue pair(s), {} role pair(s); truncated inputs/outputs: cue {}/{}, role {}/{}",
        set.cue_pairs.len(),
        set.role_pairs.len(),
        set.truncation.cue_inputs,
        set.truncation.cue_outputs,
        set.truncation.role_inputs,
        set.truncation.role_outputs,
    );
    Ok(())
}

fn export_config(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let path = out.join("training_config.txt");
    emit_training_config(&TrainingConfig::default(), &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn make_backend(
    kind: BackendKind,
    endpoint: Option<String>,
    replay_store: Option<PathBuf>,
) -> Result<Box<dyn CompletionBackend>, CliError> {
    match kind {
        BackendKind::Replay => {
            let store = replay_store.ok_or_else(|| {
                CliError::Validation("--backend replay requires --replay-store".to_string())
            })?;
            Ok(Box::new(ReplayBackend::open(store)?))
        }
        BackendKind::Wire => {
            let endpoint = endpoint.ok_or_else(|| {
                CliError::Validation("--backend wire requires --endpoint".to_string())
            })?;
            let token = std::env::var(AUTH_TOKEN_VAR).ok();
            Ok(Box::new(WireBackend::new(endpoint, token)))
        }
    }
}

/// Runs prediction, checkpointing each speech, and writes the prediction
/// document plus the run manifest.
fn predict_to_dir(
    corpus: &Corpus,
    corpus_sha256: String,
    backend: &dyn CompletionBackend,
    subtask: Subtask,
    jobs: usize,
    out: &Path,
) -> Result<Predictions, CliError> {
    fs::create_dir_all(out)?;
    let checkpoint_path = out.join("checkpoints.jsonl");
    let mut checkpoint = fs::File::create(&checkpoint_path)?;

    let result = attrib_core::pipeline::predict_corpus(
        corpus,
        backend,
        subtask,
        jobs,
        |speech_id, annotations| {
            let line = serde_json::json!({
                "speech_id": speech_id,
                "annotations": annotations.iter().map(annotation_to_doc).collect::<Vec<_>>(),
            });
            // Checkpoints survive an aborted run; write-through per speech.
            let _ = writeln!(checkpoint, "{line}");
            let _ = checkpoint.flush();
        },
    );
    let predictions = result?;

    let doc = predictions_to_doc(&predictions, &corpus.split_name, subtask);
    save_predictions(&doc, out.join("predictions.json"))?;
    let manifest = build_manifest(
        corpus_sha256,
        &corpus.split_name,
        subtask,
        backend.identity(),
    );
    save_manifest(&manifest, out.join("manifest.json"))?;
    Ok(predictions)
}

fn score(
    gold_path: &Path,
    predictions_path: &Path,
    subtask: Subtask,
    out: &Path,
) -> Result<(), CliError> {
    let gold = load_corpus(gold_path)?;
    let doc = load_predictions(predictions_path)?;
    let predictions = predictions_from_doc(&doc)?;
    let report = score_corpus(&predictions, &gold, subtask)?;
    let rendered = render_report(&report);
    fs::create_dir_all(out)?;
    fs::write(out.join("report.txt"), &rendered)?;
    fs::write(
        out.join("report.json"),
        format!(
            "{}\n",
            serde_json::to_string_pretty(&report_to_json(&report)).expect("report serializes")
        ),
    )?;
    print!("{rendered}");
    Ok(())
}

fn record(
    corpus_path: &Path,
    endpoint: &str,
    replay_store: &Path,
    subtask: Subtask,
    jobs: usize,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let (corpus, sha) = load_with_hash(corpus_path)?;
    let token = std::env::var(AUTH_TOKEN_VAR).ok();
    let wire = WireBackend::new(endpoint.to_string(), token);
    let recording = RecordingBackend::new(&wire);

    let predictions = match &out {
        Some(dir) => predict_to_dir(&corpus, sha, &recording, subtask, jobs, dir)?,
        None => {
            attrib_core::pipeline::predict_corpus(&corpus, &recording, subtask, jobs, |_, _| {})?
        }
    };
    let recorded = recording.write_to(replay_store)?;
    let total: usize = predictions.values().map(Vec::len).sum();
    println!(
        "recorded {} exchange(s) into {}; predicted {} annotation(s)",
        recorded,
        replay_store.display(),
        total
    );
    Ok(())
}
