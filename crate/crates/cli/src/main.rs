mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;
use pess_core::corpus::{
    load_esconv, load_persona_chat, make_toy_corpus, split_examples, write_esconv, write_persona_chat, CorpusSplits,
    Dialogue, GenerationExample, Speaker,
};
use pess_core::embedder::{build_embedder, SentenceEmbedder};
use pess_core::matcher::{build_similarity_matrix, match_persona};
use pess_core::metrics::{evaluate_text, perplexity};
use pess_core::pipeline::{
    extraction_examples, extractor_predictions, respond, train_extractor, train_generator, Ablation,
    PersonaExtractor, ResponseGenerator,
};
use pess_core::seq2seq::{encode_generator_source, encode_source, serialize_persona, EOS};
use pess_core::{Error, ProviderError};
use serde_json::{json, Value};

use config::{AppConfig, CorpusFormat};

#[derive(Parser)]
#[command(name = "pess", version, about = "Persona extraction and persona-grounded response generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a toy corpus with train/validation/test splits
    MakeCorpus(MakeCorpusArgs),
    /// Train the persona extractor
    TrainExtractor(TrainArgs),
    /// Train the response generator on personas from a frozen extractor
    TrainGenerator(TrainGeneratorArgs),
    /// Extract one speaker's persona from a dialogue
    Extract(ExtractArgs),
    /// Generate speaker B's next response for a dialogue
    Respond(RespondArgs),
    /// Compute the metric suite for a checkpoint on a data file
    Evaluate(EvaluateArgs),
    /// Match ground-truth against generated persona sentences
    MatchDebug(MatchDebugArgs),
}

#[derive(Args)]
struct MakeCorpusArgs {
    #[arg(long, default_value_t = 500)]
    dialogues: usize,
    #[arg(long, default_value_t = 8)]
    traits: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Train/validation/test ratios
    #[arg(long, default_value = "0.7,0.2,0.1")]
    split: String,
    #[arg(long, value_enum, default_value_t = CorpusFormat::PersonaChat)]
    format: CorpusFormat,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CommonArgs {
    /// INI config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train.jsonl and validation.jsonl
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<CorpusFormat>,
    /// Output root for run directories (default: $PESS_HOME/runs or ./runs)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exact run directory, overriding the generated name
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    epochs_nll_only: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args)]
struct TrainGeneratorArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Frozen extractor checkpoint directory
    #[arg(long, required_unless_present = "no_persona")]
    extractor: Option<PathBuf>,
    /// Train without persona input
    #[arg(long)]
    no_persona: bool,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL file containing the dialogue
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = CorpusFormat::PersonaChat)]
    format: CorpusFormat,
    #[arg(long)]
    dialogue_id: String,
    #[arg(long, default_value = "A")]
    speaker: String,
}

#[derive(Args)]
struct RespondArgs {
    #[arg(long)]
    generator: PathBuf,
    #[arg(long)]
    extractor: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = CorpusFormat::PersonaChat)]
    format: CorpusFormat,
    /// The history is the dialogue up to and including its last A turn
    #[arg(long)]
    dialogue_id: String,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Extractor checkpoint, or generator checkpoint with --extractor
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = CorpusFormat::PersonaChat)]
    format: CorpusFormat,
    /// Evaluate a generator checkpoint using this extractor
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Also write the metrics JSON to this file
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    embedder_dim: usize,
}

#[derive(Args)]
struct MatchDebugArgs {
    /// Ground-truth persona, one sentence per line
    #[arg(long)]
    gt: PathBuf,
    /// Generated persona, one sentence per line
    #[arg(long)]
    gen: PathBuf,
    #[arg(long, default_value_t = pess_core::matcher::DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = 256)]
    embedder_dim: usize,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Argument(_) | Error::Config(_) | Error::Parse { .. } | Error::Schema { .. } => {
                Failure::Usage(e.to_string())
            }
            Error::Provider(ProviderError::Config(_)) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ProviderError> for Failure {
    fn from(e: ProviderError) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn emit(value: &Value) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("JSON value serializes");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::MakeCorpus(a) => cmd_make_corpus(a),
        Command::TrainExtractor(a) => cmd_train_extractor(a),
        Command::TrainGenerator(a) => cmd_train_generator(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Respond(a) => cmd_respond(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::MatchDebug(a) => cmd_match_debug(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn parse_ratios(text: &str) -> CliResult<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Usage(format!("--split expects three comma-separated numbers, got {text:?}")))?;
    <[f64; 3]>::try_from(parts).map_err(|_| Failure::Usage(format!("--split expects three ratios, got {text:?}")))
}

fn write_split(path: &Path, format: CorpusFormat, dialogues: &[Dialogue]) -> CliResult {
    let r = match format {
        CorpusFormat::PersonaChat => write_persona_chat(path, dialogues),
        CorpusFormat::Esconv => write_esconv(path, dialogues),
    };
    r.map_err(|e| Failure::Usage(e.to_string()))
}

fn cmd_make_corpus(a: MakeCorpusArgs) -> CliResult {
    let ratios = parse_ratios(&a.split)?;
    let (dialogues, grammar) = make_toy_corpus(a.dialogues, a.traits, a.seed)?;
    let splits = split_examples(&dialogues, ratios, a.seed)?;
    let mut files = Vec::new();
    for (name, part) in [("train", &splits.train), ("validation", &splits.validation), ("test", &splits.test)] {
        let path = a.out.join(format!("{name}.jsonl"));
        write_split(&path, a.format, part)?;
        files.push(path);
    }
    let manifest = json!({
        "dialogues": a.dialogues,
        "traits": a.traits,
        "seed": a.seed,
        "split": ratios,
        "format": match a.format { CorpusFormat::PersonaChat => "persona-chat", CorpusFormat::Esconv => "esconv" },
        "grammar": grammar,
        "inverse_map": grammar.inverse_map().into_iter().collect::<std::collections::BTreeMap<_, _>>(),
    });
    let path = a.out.join("grammar.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?;
    files.push(path);
    info!(
        "wrote {} / {} / {} dialogues to {}",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        a.out.display()
    );
    emit(&json!({
        "out": a.out,
        "files": files,
        "n_train": splits.train.len(),
        "n_validation": splits.validation.len(),
        "n_test": splits.test.len(),
    }));
    Ok(())
}

fn load_dialogues(path: &Path, format: CorpusFormat) -> CliResult<Vec<Dialogue>> {
    let r = match format {
        CorpusFormat::PersonaChat => load_persona_chat(path),
        CorpusFormat::Esconv => load_esconv(path),
    };
    Ok(r?)
}

fn resolve(common: &CommonArgs) -> CliResult<AppConfig> {
    let mut c = match &common.config {
        Some(p) => AppConfig::load(p).map_err(Failure::Usage)?,
        None => AppConfig::default(),
    };
    if let Some(dir) = &common.data {
        c.data.train = Some(dir.join("train.jsonl"));
        c.data.validation = Some(dir.join("validation.jsonl"));
        c.data.test = Some(dir.join("test.jsonl"));
    }
    if let Some(f) = common.format {
        c.data.format = f;
    }
    if let Some(o) = &common.out {
        c.data.out_dir = Some(o.clone());
    }
    let t = &mut c.train;
    let m = &mut c.model;
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(t.seed, common.seed);
    set!(t.epochs_total, common.epochs);
    set!(t.epochs_nll_only, common.epochs_nll_only);
    set!(t.learning_rate, common.lr);
    set!(t.batch_size, common.batch_size);
    set!(t.tau, common.tau);
    set!(m.d_model, common.d_model);
    set!(m.n_layers, common.n_layers);
    set!(m.n_heads, common.n_heads);
    set!(m.ffn_dim, common.ffn_dim);
    set!(m.max_len, common.max_len);
    set!(m.dropout, common.dropout);
    c.validate().map_err(Failure::Usage)?;
    Ok(c)
}

fn load_splits(c: &AppConfig) -> CliResult<CorpusSplits> {
    let train = c
        .data
        .train
        .as_ref()
        .ok_or_else(|| Failure::Usage("no training data: pass --data or set [data] train".into()))?;
    let validation = match &c.data.validation {
        Some(p) if p.exists() => load_dialogues(p, c.data.format)?,
        _ => Vec::new(),
    };
    Ok(CorpusSplits {
        train: load_dialogues(train, c.data.format)?,
        validation,
        test: Vec::new(),
    })
}

fn run_dir(common: &CommonArgs, c: &AppConfig, kind: &str) -> PathBuf {
    if let Some(d) = &common.run_dir {
        return d.clone();
    }
    let root = c.data.out_dir.clone().unwrap_or_else(|| {
        std::env::var_os("PESS_HOME")
            .map(|h| PathBuf::from(h).join("runs"))
            .unwrap_or_else(|| PathBuf::from("runs"))
    });
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    root.join(format!("{kind}-{stamp}-seed{}", c.train.seed))
}

fn cmd_train_extractor(a: TrainArgs) -> CliResult {
    let mut c = resolve(&a.common)?;
    if let Some(ab) = &a.ablation {
        c.train.ablation = ab.parse::<Ablation>()?;
    }
    let splits = load_splits(&c)?;
    let embedder = build_embedder(&c.embedder)?;
    let dir = run_dir(&a.common, &c, &format!("extractor-{}", c.train.ablation));
    info!("training extractor ({}) into {}", c.train.ablation, dir.display());
    let run = train_extractor(&splits, &c.model, &c.train, embedder.as_ref(), Some(&dir))?;
    emit(&json!({
        "run_dir": dir,
        "checkpoint": run.record.checkpoint_paths.first(),
        "best_epoch": run.record.best_epoch,
        "best_validation": run.record.best_validation,
    }));
    Ok(())
}

fn cmd_train_generator(a: TrainGeneratorArgs) -> CliResult {
    let c = resolve(&a.common)?;
    let splits = load_splits(&c)?;
    let extractor = match (&a.extractor, a.no_persona) {
        (Some(p), false) => Some(PersonaExtractor::load(p)?),
        _ => None,
    };
    let dir = run_dir(&a.common, &c, "generator");
    info!("training generator into {}", dir.display());
    let run = train_generator(&splits, extractor.as_ref(), &c.model, &c.train, Some(&dir))?;
    emit(&json!({
        "run_dir": dir,
        "checkpoint": run.record.checkpoint_paths.first(),
        "best_epoch": run.record.best_epoch,
        "best_validation": run.record.best_validation,
        "validation_ppl": run.record.epochs.iter().map(|e| e.validation.get("ppl").copied()).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn find_dialogue(path: &Path, format: CorpusFormat, id: &str) -> CliResult<Dialogue> {
    load_dialogues(path, format)?
        .into_iter()
        .find(|d| d.id == id)
        .ok_or_else(|| Failure::Usage(format!("no dialogue with id {id:?} in {}", path.display())))
}

fn cmd_extract(a: ExtractArgs) -> CliResult {
    let speaker: Speaker = a
        .speaker
        .parse()
        .map_err(|_| Failure::Usage(format!("speaker must be A or B, got {:?}", a.speaker)))?;
    let dialogue = find_dialogue(&a.data, a.format, &a.dialogue_id)?;
    let extractor = PersonaExtractor::load(&a.checkpoint)?;
    let persona = extractor.extract_from_dialogue(&dialogue, speaker)?;
    emit(&json!({ "persona": persona }));
    Ok(())
}

fn cmd_respond(a: RespondArgs) -> CliResult {
    let dialogue = find_dialogue(&a.data, a.format, &a.dialogue_id)?;
    let last_a = dialogue
        .utterances
        .iter()
        .rposition(|u| u.speaker == Speaker::A)
        .ok_or_else(|| Failure::Runtime(format!("dialogue {} has no speaker-A turn", dialogue.id)))?;
    let history = &dialogue.utterances[..=last_a];
    let generator = ResponseGenerator::load(&a.generator)?;
    let extractor = PersonaExtractor::load(&a.extractor)?;
    let response = respond(&generator, &extractor, history)?;
    emit(&json!({ "response": response }));
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    let dialogues = load_dialogues(&a.data, a.format)?;
    let embedder = build_embedder(&pess_core::embedder::EmbedderSpec {
        dimension: a.embedder_dim,
        ..Default::default()
    })?;
    let report = match &a.extractor {
        None => evaluate_extractor_checkpoint(&a.checkpoint, &dialogues, embedder.as_ref())?,
        Some(ex) => evaluate_generator_checkpoint(&a.checkpoint, ex, &dialogues, embedder.as_ref())?,
    };
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&report).expect("report serializes"))
            .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", out.display())))?;
    }
    emit(&report);
    Ok(())
}

fn evaluate_extractor_checkpoint(ckpt: &Path, dialogues: &[Dialogue], embedder: &dyn SentenceEmbedder) -> CliResult<Value> {
    let extractor = PersonaExtractor::load(ckpt)?;
    let (model, vocab) = (extractor.model(), extractor.vocab());
    let examples = extraction_examples(dialogues)?;
    let (cands, refs) = extractor_predictions(model, vocab, &examples, model.config().max_len)?;
    let report = evaluate_text(&cands, &refs, embedder)?;
    let pairs = examples
        .iter()
        .map(|ex| {
            let max_len = model.config().max_len;
            Ok((
                encode_source(vocab, &ex.source_utterances, max_len)?,
                serialize_persona(vocab, ex.target_persona.sentences(), max_len)?,
            ))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    with_ppl(report, perplexity(model, &pairs)?)
}

fn evaluate_generator_checkpoint(
    ckpt: &Path,
    extractor: &Path,
    dialogues: &[Dialogue],
    embedder: &dyn SentenceEmbedder,
) -> CliResult<Value> {
    let generator = ResponseGenerator::load(ckpt)?;
    let extractor = PersonaExtractor::load(extractor)?;
    let (model, vocab) = (generator.model(), generator.vocab());
    let max_len = model.config().max_len;
    let (mut cands, mut refs, mut pairs) = (Vec::new(), Vec::new(), Vec::new());
    for d in dialogues {
        let Some(ex) = GenerationExample::from_dialogue(d) else {
            continue;
        };
        cands.push(respond(&generator, &extractor, &ex.history)?);
        refs.push(ex.target_response.clone());
        let persona = if generator.uses_persona() {
            extractor.extract(&ex.seeker_utterances())?
        } else {
            Vec::new()
        };
        let turns: Vec<String> = ex.history.iter().map(|u| u.text.clone()).collect();
        let mut target = vocab.encode_text(&ex.target_response);
        target.push(EOS);
        target.truncate(max_len);
        pairs.push((encode_generator_source(vocab, &persona, &turns, max_len)?, target));
    }
    if cands.is_empty() {
        return Err(Failure::Runtime("no dialogue ends on a speaker-B turn".into()));
    }
    let report = evaluate_text(&cands, &refs, embedder)?;
    with_ppl(report, perplexity(model, &pairs)?)
}

fn with_ppl(report: pess_core::metrics::MetricReport, ppl: f64) -> CliResult<Value> {
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["ppl"] = json!(ppl);
    Ok(value)
}

fn read_sentences(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn cmd_match_debug(a: MatchDebugArgs) -> CliResult {
    let gt = read_sentences(&a.gt)?;
    let gen = read_sentences(&a.gen)?;
    let embedder = build_embedder(&pess_core::embedder::EmbedderSpec {
        dimension: a.embedder_dim,
        ..Default::default()
    })?;
    let sim = build_similarity_matrix(&gt, &gen, embedder.as_ref())?;
    let result = match_persona(&sim, a.tau)?;
    emit(&serde_json::to_value(&result).expect("match result serializes"));
    Ok(())
}
