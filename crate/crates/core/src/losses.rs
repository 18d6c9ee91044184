//! Extractor objective (likelihood, completeness and consistency terms) and
//! the response-generator objective.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ExtractionExample;
use crate::embedder::SentenceEmbedder;
use crate::error::{Error, Result};
use crate::matcher::{build_similarity_matrix, match_persona, MatchResult};
use crate::seq2seq::{
    decode, encode_source, persona_sentences, serialize_persona, serialize_persona_truncated, teacher_forced_nll, DecodeMode, Dropout, Graph,
    Matrix, NllMode, SentenceRep, Seq2Seq, Var, Vocab,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_complete: f64,
    pub w_consist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_complete: 1.0,
            w_consist: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_complete.is_finite() && self.w_consist.is_finite() && self.w_complete >= 0.0 && self.w_consist >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative, got {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossCounts {
    pub m: usize,
    pub k: usize,
    pub n_con: usize,
    pub n_miss: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_nll: f64,
    pub l_complete: f64,
    pub l_consist: f64,
    pub l_total: f64,
    pub counts: LossCounts,
}

/// NLL of the serialized new target.
pub fn completeness_loss(model: &Seq2Seq, vocab: &Vocab, source: &[usize], p_new: &[String]) -> Result<f64> {
    if p_new.is_empty() {
        return Err(Error::arg("new target persona is empty"));
    }
    let target = serialize_persona_truncated(vocab, p_new, model.config().max_len);
    crate::seq2seq::nll(model, source, &target)
}

fn check_consistent(consistent: &[usize], k: usize) -> Result<()> {
    if let Some(bad) = consistent.iter().find(|&&i| i >= k) {
        return Err(Error::arg(format!("consistent index {bad} out of range for {k} generated sentences")));
    }
    Ok(())
}

/// Records `−Σ_{i∈con} log softmax_j(cos(h_j, h_P))_i` on `g`; `None` when
/// the consistent set is empty.
pub fn consistency_term(g: &mut Graph, h_gen: &[Var], h_gt: Var, consistent: &[usize]) -> Result<Option<Var>> {
    check_consistent(consistent, h_gen.len())?;
    if consistent.is_empty() {
        return Ok(None);
    }
    let sims: Vec<Var> = h_gen.iter().map(|&h| g.cosine(h, h_gt)).collect();
    let row = g.concat_cols(&sims);
    let lse = g.log_sum_exp(row);
    let lse_total = g.scale(lse, consistent.len() as f64);
    let mut loss = lse_total;
    for &i in consistent {
        let s = g.pick(row, 0, i);
        loss = g.sub(loss, s);
    }
    Ok(Some(loss))
}

/// Consistency loss on plain representation vectors.
pub fn consistency_loss(h_gen: &[SentenceRep], h_gt: &SentenceRep, consistent: &[usize]) -> Result<f64> {
    Ok(consistency_loss_with_grad(h_gen, h_gt, consistent)?.0)
}

/// Loss together with its gradient with respect to each generated
/// representation and the ground-truth representation.
pub fn consistency_loss_with_grad(
    h_gen: &[SentenceRep],
    h_gt: &SentenceRep,
    consistent: &[usize],
) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>)> {
    let dim = h_gt.vector.len();
    if h_gen.iter().any(|h| h.vector.len() != dim) {
        return Err(Error::arg("representation widths differ"));
    }
    let reps = h_gen.iter().chain(std::iter::once(h_gt));
    if reps.clone().any(|h| h.vector.iter().all(|&x| x == 0.0)) {
        return Err(Error::arg("zero representation has no direction"));
    }
    let mut g = Graph::new(&[]);
    let gen: Vec<Var> = h_gen.iter().map(|h| g.leaf(Matrix::row_vector(h.vector.clone()))).collect();
    let gt = g.leaf(Matrix::row_vector(h_gt.vector.clone()));
    let Some(loss) = consistency_term(&mut g, &gen, gt, consistent)? else {
        return Ok((0.0, vec![vec![0.0; dim]; h_gen.len()], vec![0.0; dim]));
    };
    let grads = g.backward(loss);
    let grad_of = |v: Var| grads.get(v).map_or_else(|| vec![0.0; dim], |m| m.data.clone());
    Ok((g.value(loss).item(), gen.iter().map(|&v| grad_of(v)).collect(), grad_of(gt)))
}

fn dropout<'a>(rng: &'a mut Option<&mut ChaCha8Rng>, rate: f64) -> Option<Dropout<'a>> {
    rng.as_deref_mut().map(|rng| Dropout { rate, rng })
}

/// Which extractor terms are active and how they are combined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractorLossConfig {
    pub tau: f64,
    pub weights: LossWeights,
    pub use_complete: bool,
    pub use_consist: bool,
    pub nll_mode: NllMode,
    /// Decode budget for the generated persona.
    pub max_new: usize,
}

impl Default for ExtractorLossConfig {
    fn default() -> Self {
        Self {
            tau: crate::matcher::DEFAULT_TAU,
            weights: LossWeights::default(),
            use_complete: true,
            use_consist: true,
            nll_mode: NllMode::Mean,
            max_new: 64,
        }
    }
}

pub struct ExtractorStep {
    pub report: LossReport,
    /// Gradient of `l_total` for every parameter tensor, when requested.
    pub grads: Option<Vec<Matrix>>,
    /// Matching outcome; absent when neither extra term is active.
    pub matching: Option<MatchResult>,
}

/// Full extractor objective for one example: greedy-decode the persona,
/// match it against the ground truth, then record the likelihood,
/// completeness and consistency terms on one tape.
pub fn extractor_step(
    model: &Seq2Seq,
    vocab: &Vocab,
    embedder: &dyn SentenceEmbedder,
    example: &ExtractionExample,
    config: &ExtractorLossConfig,
    want_grads: bool,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ExtractorStep> {
    let max_len = model.config().max_len;
    let source = encode_source(vocab, &example.source_utterances, max_len)?;
    let gt_sentences = example.target_persona.sentences();
    let target = serialize_persona(vocab, gt_sentences, max_len)?;
    let rate = model.config().dropout;

    let mut counts = LossCounts {
        m: gt_sentences.len(),
        ..LossCounts::default()
    };
    let needs_match = config.use_complete || config.use_consist;
    let mut matching = None;
    let mut gen_ids = Vec::new();
    let mut spans = Vec::new();
    if needs_match {
        let out = decode(model, vocab, &source, DecodeMode::Greedy, config.max_new)?;
        let (texts, sentence_spans): (Vec<String>, Vec<(usize, usize)>) =
            persona_sentences(vocab, &out.token_ids).into_iter().unzip();
        spans = sentence_spans;
        gen_ids = out.token_ids;
        let sim = build_similarity_matrix(gt_sentences, &texts, embedder)?;
        let result = match_persona(&sim, config.tau)?;
        counts.k = texts.len();
        counts.n_con = result.consistent_set.len();
        counts.n_miss = result.missing_set.len();
        matching = Some(result);
    }

    let mut g = Graph::new(model.params());
    let memory = model.encode(&mut g, &source, dropout(&mut dropout_rng, rate))?;
    let base = teacher_forced_nll(model, &mut g, memory, &target, config.nll_mode, dropout(&mut dropout_rng, rate))?;
    let mut total = base.loss;
    let mut l_complete = 0.0;
    let mut l_consist = 0.0;

    if let Some(result) = &matching {
        if config.use_complete {
            let new_target = serialize_persona_truncated(vocab, &result.new_target, max_len);
            let tf = teacher_forced_nll(model, &mut g, memory, &new_target, config.nll_mode, dropout(&mut dropout_rng, rate))?;
            l_complete = g.value(tf.loss).item();
            let weighted = g.scale(tf.loss, config.weights.w_complete);
            total = g.add(total, weighted);
        }
        let consistent = result.consistent_generated_indices();
        if config.use_consist && !consistent.is_empty() {
            let pass = model.decode_teacher_forced(&mut g, memory, &gen_ids, dropout(&mut dropout_rng, rate))?;
            let n_gt = g.value(base.pass.reps).rows;
            let h_p = g.mean_rows(base.pass.reps, 0, n_gt);
            let h_gen: Vec<Var> = spans.iter().map(|&(a, b)| g.mean_rows(pass.reps, a, b)).collect();
            if let Some(term) = consistency_term(&mut g, &h_gen, h_p, &consistent)? {
                l_consist = g.value(term).item();
                let weighted = g.scale(term, config.weights.w_consist);
                total = g.add(total, weighted);
            }
        }
    }

    let l_nll = g.value(base.loss).item();
    let report = LossReport {
        l_nll,
        l_complete,
        l_consist,
        l_total: g.value(total).item(),
        counts,
    };
    if [report.l_nll, report.l_complete, report.l_consist, report.l_total]
        .iter()
        .any(|v| !v.is_finite())
    {
        return Err(Error::Data(format!("non-finite loss {report:?}")));
    }
    let grads = want_grads.then(|| {
        let grads = g.backward(total);
        let mut acc = model.zero_grads();
        g.accumulate_param_grads(&grads, &mut acc);
        acc
    });
    Ok(ExtractorStep {
        report,
        grads,
        matching,
    })
}

/// Full objective with default weights, no dropout and no gradients.
pub fn total_extractor_loss(
    model: &Seq2Seq,
    vocab: &Vocab,
    example: &ExtractionExample,
    embedder: &dyn SentenceEmbedder,
    tau: f64,
) -> Result<LossReport> {
    let config = ExtractorLossConfig {
        tau,
        max_new: model.config().max_len,
        ..ExtractorLossConfig::default()
    };
    Ok(extractor_step(model, vocab, embedder, example, &config, false, None)?.report)
}

/// Mean NLL of the response given the generator source (persona plus history).
pub fn generator_loss(model: &Seq2Seq, source: &[usize], response: &[usize]) -> Result<f64> {
    if response.is_empty() {
        return Err(Error::arg("response is empty"));
    }
    crate::seq2seq::nll(model, source, response)
}

/// Generator loss and parameter gradients for one example.
pub fn generator_step(
    model: &Seq2Seq,
    source: &[usize],
    response: &[usize],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Matrix>)> {
    if response.is_empty() {
        return Err(Error::arg("response is empty"));
    }
    let rate = model.config().dropout;
    let mut rng = dropout_rng;
    let mut g = Graph::new(model.params());
    let memory = model.encode(&mut g, source, dropout(&mut rng, rate))?;
    let tf = teacher_forced_nll(
        model,
        &mut g,
        memory,
        response,
        NllMode::Mean,
        dropout(&mut rng, rate),
    )?;
    let grads = g.backward(tf.loss);
    let mut acc = model.zero_grads();
    g.accumulate_param_grads(&grads, &mut acc);
    Ok((g.value(tf.loss).item(), acc))
}
