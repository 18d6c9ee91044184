//! Training orchestration: two-phase extractor training with ablations,
//! extractor freezing, and response-generator training on extracted personas.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplits, Dialogue, ExtractionExample, GenerationExample, Speaker, Utterance};
use crate::embedder::SentenceEmbedder;
use crate::error::{Error, Result};
use crate::losses::{extractor_step, generator_step, ExtractorLossConfig, LossCounts, LossReport, LossWeights};
use crate::matcher::validate_tau;
use crate::metrics::{embed_score, perplexity, rouge_l};
use crate::seq2seq::{
    checkpoint_hash, clip_grad_norm, decode, decode_persona, encode_generator_source, encode_source, load_checkpoint,
    save_checkpoint, serialize_persona, AdamW, DecodeMode, Matrix, ModelConfig, NllMode, Seq2Seq, Vocab, EOS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoComplete,
    NoConsist,
    NllOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoComplete, Ablation::NoConsist, Ablation::NllOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoComplete => "no_complete",
            Ablation::NoConsist => "no_consist",
            Ablation::NllOnly => "nll_only",
        }
    }

    pub fn uses_complete(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoConsist)
    }

    pub fn uses_consist(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoComplete)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}; expected full, no_complete, no_consist or nll_only")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_total: usize,
    pub epochs_nll_only: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub loss_weights: LossWeights,
    pub ablation: Ablation,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub nll_mode: NllMode,
    /// Decode budget for generated personas and responses.
    pub max_new: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_total: 8,
            epochs_nll_only: 4,
            learning_rate: 3e-4,
            batch_size: 8,
            tau: crate::matcher::DEFAULT_TAU,
            loss_weights: LossWeights::default(),
            ablation: Ablation::Full,
            seed: 0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            nll_mode: NllMode::Mean,
            max_new: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_total == 0 {
            return Err(Error::Config("epochs_total must be positive".into()));
        }
        if self.epochs_nll_only > self.epochs_total {
            return Err(Error::Config(format!(
                "epochs_nll_only ({}) exceeds epochs_total ({})",
                self.epochs_nll_only, self.epochs_total
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_new == 0 {
            return Err(Error::Config("batch_size and max_new must be positive".into()));
        }
        if !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("grad_clip must be positive and weight_decay non-negative".into()));
        }
        validate_tau(self.tau).map_err(|e| Error::Config(e.to_string()))?;
        self.loss_weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `nll_only` during the warm-up epochs, the ablation name afterwards.
    pub phase: String,
    pub mean_l_nll: f64,
    pub mean_l_complete: f64,
    pub mean_l_consist: f64,
    pub mean_l_total: f64,
    pub validation: BTreeMap<String, f64>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub n_train: usize,
    pub n_validation: usize,
    pub vocab_size: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation: BTreeMap<String, f64>,
    pub checkpoint_paths: Vec<PathBuf>,
}

/// One line of `training_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Vocabulary over every utterance and persona sentence of the training split.
pub fn build_vocab(train: &[Dialogue]) -> Vocab {
    let mut texts: Vec<&str> = Vec::new();
    for d in train {
        texts.extend(d.utterances.iter().map(|u| u.text.as_str()));
        for p in [&d.persona_a, &d.persona_b].into_iter().flatten() {
            texts.extend(p.sentences().iter().map(String::as_str));
        }
    }
    Vocab::build(texts)
}

/// Extraction examples for speaker A; every dialogue must carry A's persona.
pub fn extraction_examples(dialogues: &[Dialogue]) -> Result<Vec<ExtractionExample>> {
    dialogues
        .iter()
        .map(|d| {
            ExtractionExample::from_dialogue(d, Speaker::A)
                .ok_or_else(|| Error::Data(format!("dialogue {} lacks a speaker-A persona or utterances", d.id)))
        })
        .collect()
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn mean_grads(mut acc: Vec<Matrix>, n: usize) -> Vec<Matrix> {
    acc.iter_mut().for_each(|g| g.scale_assign(1.0 / n as f64));
    acc
}

struct RunDir {
    root: PathBuf,
    log: BufWriter<File>,
}

impl RunDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(root, e))?;
        let path = root.join("training_log.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            log: BufWriter::new(file),
        })
    }

    fn log_step(&mut self, entry: &StepLog) -> Result<()> {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.root.join("training_log.jsonl"), e))
    }

    fn finish(mut self, record: &RunRecord) -> Result<()> {
        self.log
            .flush()
            .map_err(|e| Error::io(self.root.join("training_log.jsonl"), e))?;
        let path = self.root.join("run.json");
        let text = serde_json::to_string_pretty(record).expect("run record serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// A persona extractor; once frozen its parameters can no longer be borrowed
/// mutably.
#[derive(Debug, Clone)]
pub struct PersonaExtractor {
    model: Seq2Seq,
    vocab: Vocab,
    frozen: bool,
    checkpoint: Option<PathBuf>,
}

impl PersonaExtractor {
    pub fn new(model: Seq2Seq, vocab: Vocab) -> Result<Self> {
        if model.vocab_size() != vocab.len() {
            return Err(Error::Config("extractor vocabulary does not match the model".into()));
        }
        Ok(Self {
            model,
            vocab,
            frozen: false,
            checkpoint: None,
        })
    }

    /// Loads a checkpoint directory; the result is frozen.
    pub fn load(dir: &Path) -> Result<Self> {
        let (model, vocab) = load_checkpoint(dir)?;
        Ok(Self {
            model,
            vocab,
            frozen: true,
            checkpoint: Some(dir.to_path_buf()),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.model, &self.vocab)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn checkpoint(&self) -> Option<&Path> {
        self.checkpoint.as_deref()
    }

    pub fn model(&self) -> &Seq2Seq {
        &self.model
    }

    pub fn model_mut(&mut self) -> Result<&mut Seq2Seq> {
        if self.frozen {
            return Err(Error::Precondition("extractor is frozen".into()));
        }
        Ok(&mut self.model)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Greedy persona for a list of one speaker's utterances.
    pub fn extract(&self, utterances: &[String]) -> Result<Vec<String>> {
        let source = encode_source(&self.vocab, utterances, self.model.config().max_len)?;
        let budget = self.model.config().max_len;
        Ok(decode_persona(&self.model, &self.vocab, &source, DecodeMode::Greedy, budget)?.0)
    }

    pub fn extract_from_dialogue(&self, dialogue: &Dialogue, speaker: Speaker) -> Result<Vec<String>> {
        let utterances = dialogue.utterances_of(speaker);
        if utterances.is_empty() {
            return Err(Error::Precondition(format!(
                "dialogue {} has no utterances by speaker {}",
                dialogue.id,
                speaker.as_str()
            )));
        }
        self.extract(&utterances)
    }
}

/// Loads a frozen extractor checkpoint and extracts one speaker's persona.
pub fn extract_persona(checkpoint: &Path, dialogue: &Dialogue, speaker: Speaker) -> Result<Vec<String>> {
    PersonaExtractor::load(checkpoint)?.extract_from_dialogue(dialogue, speaker)
}

/// Greedy persona decodes for `examples`, as (candidate, reference) texts.
pub fn extractor_predictions(
    model: &Seq2Seq,
    vocab: &Vocab,
    examples: &[ExtractionExample],
    max_new: usize,
) -> Result<(Vec<String>, Vec<String>)> {
    let mut cands = Vec::with_capacity(examples.len());
    let mut refs = Vec::with_capacity(examples.len());
    for ex in examples {
        let source = encode_source(vocab, &ex.source_utterances, model.config().max_len)?;
        let (sentences, _) = decode_persona(model, vocab, &source, DecodeMode::Greedy, max_new)?;
        cands.push(sentences.join(" "));
        refs.push(ex.target_persona.sentences().join(" "));
    }
    Ok((cands, refs))
}

/// Validation ROUGE-L and embed-score of greedy persona decodes.
pub fn evaluate_extractor(
    model: &Seq2Seq,
    vocab: &Vocab,
    examples: &[ExtractionExample],
    embedder: &dyn SentenceEmbedder,
    max_new: usize,
) -> Result<BTreeMap<String, f64>> {
    let (cands, refs) = extractor_predictions(model, vocab, examples, max_new)?;
    let mut out = BTreeMap::new();
    out.insert("rouge_l".to_string(), rouge_l(&cands, &refs)?);
    out.insert("embed_score".to_string(), embed_score(&cands, &refs, embedder)?);
    Ok(out)
}

pub struct ExtractorRun {
    pub record: RunRecord,
    /// Best-by-validation-ROUGE-L parameters, unfrozen.
    pub extractor: PersonaExtractor,
    pub log: Vec<StepLog>,
}

/// Two-phase extractor training. Epochs `1..=epochs_nll_only` optimize the
/// likelihood term alone; later epochs add the terms enabled by the ablation.
/// With `run_dir`, writes `training_log.jsonl`, `run.json` and
/// `checkpoints/best`.
pub fn train_extractor(
    splits: &CorpusSplits,
    model_config: &ModelConfig,
    config: &TrainConfig,
    embedder: &dyn SentenceEmbedder,
    run_dir: Option<&Path>,
) -> Result<ExtractorRun> {
    config.validate()?;
    let model_config = ModelConfig {
        seed: config.seed,
        ..model_config.clone()
    };
    model_config.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let train = extraction_examples(&splits.train)?;
    let validation = extraction_examples(&splits.validation)?;
    let vocab = build_vocab(&splits.train);
    for ex in &train {
        serialize_persona(&vocab, ex.target_persona.sentences(), model_config.max_len)
            .map_err(|e| Error::Config(format!("max_len too small for training personas: {e}")))?;
    }
    let mut model = Seq2Seq::new(model_config.clone(), vocab.len())?;
    let mut opt = AdamW::new(config.learning_rate, model.params());
    opt.weight_decay = config.weight_decay;
    let mut dir = run_dir.map(RunDir::create).transpose()?;
    let max_new = config.max_new.min(model_config.max_len);

    let mut epochs = Vec::with_capacity(config.epochs_total);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, Vec<Matrix>, BTreeMap<String, f64>)> = None;
    let mut step = 0;
    for epoch in 1..=config.epochs_total {
        let started = Instant::now();
        let warmup = epoch <= config.epochs_nll_only;
        let loss_config = ExtractorLossConfig {
            tau: config.tau,
            weights: config.loss_weights,
            use_complete: !warmup && config.ablation.uses_complete(),
            use_consist: !warmup && config.ablation.uses_consist(),
            nll_mode: config.nll_mode,
            max_new,
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(config.seed, epoch as u64));
        let mut dropout_rng = epoch_rng(config.seed, 1_000_000 + epoch as u64);
        let mut sums = [0.0; 4];

        for batch in order.chunks(config.batch_size) {
            step += 1;
            let mut acc = model.zero_grads();
            let mut batch_sums = [0.0; 4];
            let mut counts = LossCounts::default();
            for &i in batch {
                let out = extractor_step(&model, &vocab, embedder, &train[i], &loss_config, true, Some(&mut dropout_rng))?;
                let grads = out.grads.expect("gradients requested");
                acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g));
                let r = out.report;
                for (s, v) in batch_sums.iter_mut().zip([r.l_nll, r.l_complete, r.l_consist, r.l_total]) {
                    *s += v;
                }
                counts.m += r.counts.m;
                counts.k += r.counts.k;
                counts.n_con += r.counts.n_con;
                counts.n_miss += r.counts.n_miss;
            }
            let n = batch.len() as f64;
            let mut grads = mean_grads(acc, batch.len());
            clip_grad_norm(&mut grads, config.grad_clip);
            opt.step(model.params_mut(), &grads);

            for (s, b) in sums.iter_mut().zip(batch_sums) {
                *s += b;
            }
            let entry = StepLog {
                step,
                epoch,
                report: LossReport {
                    l_nll: batch_sums[0] / n,
                    l_complete: batch_sums[1] / n,
                    l_consist: batch_sums[2] / n,
                    l_total: batch_sums[3] / n,
                    counts,
                },
            };
            if let Some(d) = dir.as_mut() {
                d.log_step(&entry)?;
            }
            log.push(entry);
        }

        let validation_metrics = if validation.is_empty() {
            BTreeMap::new()
        } else {
            evaluate_extractor(&model, &vocab, &validation, embedder, max_new)?
        };
        let score = validation_metrics.get("rouge_l").copied().unwrap_or(0.0);
        if best.as_ref().map_or(true, |b| score > b.1) {
            best = Some((epoch, score, model.params().to_vec(), validation_metrics.clone()));
        }
        let n = train.len() as f64;
        let record = EpochRecord {
            epoch,
            phase: if warmup { Ablation::NllOnly.as_str() } else { config.ablation.as_str() }.to_string(),
            mean_l_nll: sums[0] / n,
            mean_l_complete: sums[1] / n,
            mean_l_consist: sums[2] / n,
            mean_l_total: sums[3] / n,
            validation: validation_metrics,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "extractor epoch {epoch}/{} [{}] l_total {:.4} val rouge_l {:.4}",
            config.epochs_total,
            record.phase,
            record.mean_l_total,
            score
        );
        epochs.push(record);
    }

    let (best_epoch, _, best_params, best_validation) = best.expect("at least one epoch");
    model.params_mut().clone_from_slice(&best_params);
    let mut checkpoint_paths = Vec::new();
    if let Some(d) = &dir {
        let path = d.root.join("checkpoints").join("best");
        save_checkpoint(&path, &model, &vocab)?;
        checkpoint_paths.push(path);
    }
    let record = RunRecord {
        kind: "extractor".into(),
        model_config,
        train_config: config.clone(),
        n_train: train.len(),
        n_validation: validation.len(),
        vocab_size: vocab.len(),
        epochs,
        best_epoch,
        best_validation,
        checkpoint_paths,
    };
    if let Some(d) = dir {
        d.finish(&record)?;
    }
    let mut extractor = PersonaExtractor::new(model, vocab)?;
    extractor.checkpoint = record.checkpoint_paths.first().cloned();
    Ok(ExtractorRun {
        record,
        extractor,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GeneratorMeta {
    uses_persona: bool,
}

/// Response generator conditioned on an extracted persona.
#[derive(Debug, Clone)]
pub struct ResponseGenerator {
    model: Seq2Seq,
    vocab: Vocab,
    uses_persona: bool,
}

impl ResponseGenerator {
    pub fn model(&self) -> &Seq2Seq {
        &self.model
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn uses_persona(&self) -> bool {
        self.uses_persona
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.model, &self.vocab)?;
        let path = dir.join("generator.json");
        let meta = GeneratorMeta {
            uses_persona: self.uses_persona,
        };
        fs::write(&path, serde_json::to_string(&meta).expect("meta serializes")).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (model, vocab) = load_checkpoint(dir)?;
        let path = dir.join("generator.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: GeneratorMeta = serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Ok(Self {
            model,
            vocab,
            uses_persona: meta.uses_persona,
        })
    }

    fn source(&self, persona: &[String], history: &[Utterance]) -> Result<Vec<usize>> {
        let turns: Vec<String> = history.iter().map(|u| u.text.clone()).collect();
        let persona = if self.uses_persona { persona } else { &[] };
        encode_generator_source(&self.vocab, persona, &turns, self.model.config().max_len)
    }

    /// Greedy response to a history that ends on an A turn.
    pub fn respond(&self, persona: &[String], history: &[Utterance]) -> Result<String> {
        let last = history
            .last()
            .ok_or_else(|| Error::Precondition("history is empty".into()))?;
        if last.speaker != Speaker::A {
            return Err(Error::Precondition("the last history turn must be by speaker A".into()));
        }
        let source = self.source(persona, history)?;
        let out = decode(&self.model, &self.vocab, &source, DecodeMode::Greedy, self.model.config().max_len)?;
        Ok(out.text)
    }
}

/// Precomputed generator inputs for one dialogue.
#[derive(Debug, Clone)]
struct GeneratorItem {
    source: Vec<usize>,
    target: Vec<usize>,
}

fn generator_items(
    dialogues: &[Dialogue],
    extractor: Option<&PersonaExtractor>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<GeneratorItem>> {
    let mut items = Vec::new();
    for d in dialogues {
        let Some(mut ex) = GenerationExample::from_dialogue(d) else {
            continue;
        };
        let persona = match extractor {
            Some(e) if !ex.seeker_utterances().is_empty() => e.extract(&ex.seeker_utterances())?,
            _ => Vec::new(),
        };
        ex.inferred_persona = Some(persona);
        let turns: Vec<String> = ex.history.iter().map(|u| u.text.clone()).collect();
        let source = encode_generator_source(vocab, ex.inferred_persona.as_deref().unwrap_or(&[]), &turns, max_len)?;
        let mut target = vocab.encode_text(&ex.target_response);
        target.push(EOS);
        target.truncate(max_len);
        items.push(GeneratorItem { source, target });
    }
    Ok(items)
}

pub struct GeneratorRun {
    pub record: RunRecord,
    /// Lowest-validation-perplexity parameters.
    pub generator: ResponseGenerator,
}

/// Trains the response generator with personas from a frozen extractor, or
/// with empty personas when `extractor` is `None`. Personas are extracted
/// once per dialogue before training starts.
pub fn train_generator(
    splits: &CorpusSplits,
    extractor: Option<&PersonaExtractor>,
    model_config: &ModelConfig,
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<GeneratorRun> {
    config.validate()?;
    if let Some(e) = extractor {
        if !e.is_frozen() {
            return Err(Error::Config("the extractor must be frozen before generator training".into()));
        }
    }
    let model_config = ModelConfig {
        seed: config.seed,
        ..model_config.clone()
    };
    model_config.validate()?;
    let hash_before = extractor.and_then(|e| e.checkpoint()).map(checkpoint_hash).transpose()?;

    let vocab = build_vocab(&splits.train);
    let max_len = model_config.max_len;
    let train = generator_items(&splits.train, extractor, &vocab, max_len)?;
    let validation = generator_items(&splits.validation, extractor, &vocab, max_len)?;
    if train.is_empty() {
        return Err(Error::Data("no training dialogue ends on a speaker-B turn".into()));
    }
    let mut model = Seq2Seq::new(model_config.clone(), vocab.len())?;
    let mut opt = AdamW::new(config.learning_rate, model.params());
    opt.weight_decay = config.weight_decay;
    let mut dir = run_dir.map(RunDir::create).transpose()?;

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Vec<Matrix>, BTreeMap<String, f64>)> = None;
    let mut step = 0;
    for epoch in 1..=config.epochs_total {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(config.seed, epoch as u64));
        let mut dropout_rng = epoch_rng(config.seed, 1_000_000 + epoch as u64);
        let mut sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let mut acc = model.zero_grads();
            let mut batch_sum = 0.0;
            for &i in batch {
                let (loss, grads) = generator_step(&model, &train[i].source, &train[i].target, Some(&mut dropout_rng))?;
                acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g));
                batch_sum += loss;
            }
            let mut grads = mean_grads(acc, batch.len());
            clip_grad_norm(&mut grads, config.grad_clip);
            opt.step(model.params_mut(), &grads);
            sum += batch_sum;
            if let Some(d) = dir.as_mut() {
                let l = batch_sum / batch.len() as f64;
                d.log_step(&StepLog {
                    step,
                    epoch,
                    report: LossReport {
                        l_nll: l,
                        l_complete: 0.0,
                        l_consist: 0.0,
                        l_total: l,
                        counts: LossCounts::default(),
                    },
                })?;
            }
        }
        let mut validation_metrics = BTreeMap::new();
        if !validation.is_empty() {
            let pairs: Vec<(Vec<usize>, Vec<usize>)> =
                validation.iter().map(|it| (it.source.clone(), it.target.clone())).collect();
            validation_metrics.insert("ppl".to_string(), perplexity(&model, &pairs)?);
        }
        let ppl = validation_metrics.get("ppl").copied().unwrap_or(f64::INFINITY);
        if best.as_ref().map_or(true, |b| ppl < b.1) {
            best = Some((epoch, ppl, model.params().to_vec(), validation_metrics.clone()));
        }
        let mean = sum / train.len() as f64;
        log::info!("generator epoch {epoch}/{} l_gen {mean:.4} val ppl {ppl:.4}", config.epochs_total);
        epochs.push(EpochRecord {
            epoch,
            phase: "generator".into(),
            mean_l_nll: mean,
            mean_l_complete: 0.0,
            mean_l_consist: 0.0,
            mean_l_total: mean,
            validation: validation_metrics,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });
    }

    if let (Some(before), Some(path)) = (hash_before, extractor.and_then(|e| e.checkpoint())) {
        if checkpoint_hash(path)? != before {
            return Err(Error::Data("extractor checkpoint changed during generator training".into()));
        }
    }

    let (best_epoch, _, best_params, best_validation) = best.unwrap_or((
        config.epochs_total,
        f64::INFINITY,
        model.params().to_vec(),
        BTreeMap::new(),
    ));
    model.params_mut().clone_from_slice(&best_params);
    let generator = ResponseGenerator {
        model,
        vocab,
        uses_persona: extractor.is_some(),
    };
    let mut checkpoint_paths = Vec::new();
    if let Some(d) = &dir {
        let path = d.root.join("checkpoints").join("best");
        generator.save(&path)?;
        checkpoint_paths.push(path);
    }
    let record = RunRecord {
        kind: "generator".into(),
        model_config,
        train_config: config.clone(),
        n_train: train.len(),
        n_validation: validation.len(),
        vocab_size: generator.vocab.len(),
        epochs,
        best_epoch,
        best_validation,
        checkpoint_paths,
    };
    if let Some(d) = dir {
        d.finish(&record)?;
    }
    Ok(GeneratorRun { record, generator })
}

/// Extracts speaker A's persona from the history and generates B's reply.
pub fn respond(generator: &ResponseGenerator, extractor: &PersonaExtractor, history: &[Utterance]) -> Result<String> {
    let seeker: Vec<String> = history
        .iter()
        .filter(|u| u.speaker == Speaker::A)
        .map(|u| u.text.clone())
        .collect();
    if seeker.is_empty() {
        return Err(Error::Precondition("history has no speaker-A turn".into()));
    }
    let persona = if generator.uses_persona() {
        extractor.extract(&seeker)?
    } else {
        Vec::new()
    };
    generator.respond(&persona, history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_toy_corpus, split_examples};
    use crate::embedder::HashedNgramEmbedder;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 32,
            max_len: 96,
            dropout: 0.0,
            seed: 0,
        }
    }

    fn tiny_splits() -> CorpusSplits {
        let (d, _) = make_toy_corpus(12, 4, 3).unwrap();
        split_examples(&d, [0.5, 0.25, 0.25], 1).unwrap()
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!("everything".parse::<Ablation>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.epochs_nll_only = 9;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn missing_persona_is_a_data_error() {
        let mut splits = tiny_splits();
        splits.train[0].persona_a = None;
        let e = HashedNgramEmbedder::new(64).unwrap();
        let r = train_extractor(&splits, &tiny_model(), &TrainConfig::default(), &e, None);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn nll_only_logs_zero_extra_terms() {
        let splits = tiny_splits();
        let e = HashedNgramEmbedder::new(64).unwrap();
        let config = TrainConfig {
            epochs_total: 2,
            epochs_nll_only: 1,
            ablation: Ablation::NllOnly,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let run = train_extractor(&splits, &tiny_model(), &config, &e, None).unwrap();
        assert!(run.log.iter().all(|s| s.report.l_complete == 0.0 && s.report.l_consist == 0.0));
        assert_eq!(run.record.epochs.len(), 2);
    }

    #[test]
    fn unfrozen_extractor_rejected() {
        let splits = tiny_splits();
        let vocab = build_vocab(&splits.train);
        let model = Seq2Seq::new(tiny_model(), vocab.len()).unwrap();
        let extractor = PersonaExtractor::new(model, vocab).unwrap();
        let r = train_generator(&splits, Some(&extractor), &tiny_model(), &TrainConfig::default(), None);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn respond_preconditions() {
        let splits = tiny_splits();
        let vocab = build_vocab(&splits.train);
        let model = Seq2Seq::new(tiny_model(), vocab.len()).unwrap();
        let mut extractor = PersonaExtractor::new(model.clone(), vocab.clone()).unwrap();
        extractor.freeze();
        assert!(extractor.model_mut().is_err());
        let generator = ResponseGenerator {
            model,
            vocab,
            uses_persona: true,
        };
        let d = &splits.train[0];
        assert!(matches!(
            respond(&generator, &extractor, &d.utterances),
            Err(Error::Precondition(_))
        ));
        let history = &d.utterances[..d.utterances.len() - 1];
        let a = respond(&generator, &extractor, history).unwrap();
        assert_eq!(a, respond(&generator, &extractor, history).unwrap());
        assert!(respond(&generator, &extractor, &[]).is_err());
    }
}
