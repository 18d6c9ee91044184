//! Toy encoder-decoder: sequence layouts, teacher-forced likelihoods,
//! greedy/sampled decoding and decoder representations.

pub mod checkpoint;
pub mod graph;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod vocab;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint};
pub use graph::{Gradients, Graph, Var};
pub use model::{DecoderPass, Dropout, IncrementalDecoder, ModelConfig, Seq2Seq};
pub use optim::{clip_grad_norm, AdamW};
pub use tensor::Matrix;
pub use vocab::{Vocab, BOS, EOS, PAD, PERSONA_SEP, SEP, UNK};

/// `[BOS] u1 SEP u2 … EOS`, dropping the oldest tokens when over `max_len`.
pub fn encode_source(vocab: &Vocab, utterances: &[String], max_len: usize) -> Result<Vec<usize>> {
    if utterances.is_empty() {
        return Err(Error::arg("source needs at least one utterance"));
    }
    let body = join_with(vocab, utterances, SEP);
    frame(body, Vec::new(), max_len)
}

/// `s1 PSEP s2 … EOS`.
pub fn serialize_persona(vocab: &Vocab, sentences: &[String], max_len: usize) -> Result<Vec<usize>> {
    let mut ids = join_with(vocab, sentences, PERSONA_SEP);
    ids.push(EOS);
    if ids.len() > max_len {
        return Err(Error::arg(format!(
            "serialized persona has {} tokens, max_len is {max_len}",
            ids.len()
        )));
    }
    Ok(ids)
}

/// Like [`serialize_persona`], but cuts the sequence to its first `max_len`
/// tokens instead of failing.
pub fn serialize_persona_truncated(vocab: &Vocab, sentences: &[String], max_len: usize) -> Vec<usize> {
    let mut ids = join_with(vocab, sentences, PERSONA_SEP);
    ids.push(EOS);
    ids.truncate(max_len);
    ids
}

/// `[BOS] p1 PSEP … pk PSEP t1 SEP t2 … EOS`. The history loses its oldest
/// tokens first. The persona is kept whole unless it would take more than half
/// of the budget, in which case trailing sentences are dropped.
pub fn encode_generator_source(
    vocab: &Vocab,
    persona: &[String],
    history: &[String],
    max_len: usize,
) -> Result<Vec<usize>> {
    if history.is_empty() {
        return Err(Error::arg("generator source needs at least one history turn"));
    }
    let persona_budget = max_len.saturating_sub(2) / 2;
    let mut prefix = Vec::new();
    for s in persona {
        let ids = vocab.encode_text(s);
        if prefix.len() + ids.len() + 1 > persona_budget {
            break;
        }
        prefix.extend(ids);
        prefix.push(PERSONA_SEP);
    }
    frame(join_with(vocab, history, SEP), prefix, max_len)
}

fn join_with(vocab: &Vocab, parts: &[String], sep: usize) -> Vec<usize> {
    let mut ids = Vec::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            ids.push(sep);
        }
        ids.extend(vocab.encode_text(p));
    }
    ids
}

fn frame(mut body: Vec<usize>, prefix: Vec<usize>, max_len: usize) -> Result<Vec<usize>> {
    let budget = max_len.saturating_sub(2 + prefix.len());
    if budget == 0 {
        return Err(Error::arg(format!("max_len {max_len} leaves no room for the source")));
    }
    if body.len() > budget {
        body.drain(..body.len() - budget);
        if body.first() == Some(&SEP) && body.len() > 1 {
            body.remove(0);
        }
    }
    let mut ids = Vec::with_capacity(body.len() + prefix.len() + 2);
    ids.push(BOS);
    ids.extend(prefix);
    ids.extend(body);
    ids.push(EOS);
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NllMode {
    #[default]
    Mean,
    Sum,
}

/// Taped teacher-forced pass with its NLL node.
pub struct TeacherForced {
    pub pass: DecoderPass,
    pub loss: Var,
    pub n_tokens: usize,
}

/// Records the NLL of `target` given the encoder `memory` on `g`. PAD
/// positions are excluded.
pub fn teacher_forced_nll(
    model: &Seq2Seq,
    g: &mut Graph,
    memory: Var,
    target: &[usize],
    mode: NllMode,
    dropout: Option<Dropout>,
) -> Result<TeacherForced> {
    let targets: Vec<Option<usize>> = target.iter().map(|&t| (t != PAD).then_some(t)).collect();
    let n_tokens = targets.iter().flatten().count();
    if n_tokens == 0 {
        return Err(Error::arg("target has no non-PAD tokens"));
    }
    let pass = model.decode_teacher_forced(g, memory, target, dropout)?;
    let weight = match mode {
        NllMode::Mean => 1.0 / n_tokens as f64,
        NllMode::Sum => 1.0,
    };
    let loss = g.cross_entropy(pass.logits, &targets, weight);
    Ok(TeacherForced { pass, loss, n_tokens })
}

/// Per-token mean negative log-likelihood of `target` given `source`.
pub fn nll(model: &Seq2Seq, source: &[usize], target: &[usize]) -> Result<f64> {
    nll_with_mode(model, source, target, NllMode::Mean)
}

pub fn nll_with_mode(model: &Seq2Seq, source: &[usize], target: &[usize], mode: NllMode) -> Result<f64> {
    let mut g = Graph::new(model.params());
    let memory = model.encode(&mut g, source, None)?;
    let tf = teacher_forced_nll(model, &mut g, memory, target, mode, None)?;
    Ok(g.value(tf.loss).item())
}

/// `log p(target_t | target_<t, source)` for every position.
pub fn token_logprobs(model: &Seq2Seq, source: &[usize], target: &[usize]) -> Result<Vec<f64>> {
    let logp = step_log_distributions(model, source, target)?;
    Ok(target.iter().enumerate().map(|(t, &id)| logp.get(t, id)).collect())
}

/// Full next-token log-distributions along a teacher-forced pass.
pub fn step_log_distributions(model: &Seq2Seq, source: &[usize], target: &[usize]) -> Result<Matrix> {
    let mut g = Graph::new(model.params());
    let memory = model.encode(&mut g, source, None)?;
    let pass = model.decode_teacher_forced(&mut g, memory, target, None)?;
    Ok(tensor::log_softmax_rows(g.value(pass.logits)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DecodeMode {
    Greedy,
    Sampled { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub token_ids: Vec<usize>,
    pub text: String,
    pub per_token_logprob: Vec<f64>,
    /// Last decoder layer, one row per emitted token.
    pub decoder_reps: Vec<Vec<f64>>,
}

/// Autoregressive decode; stops after emitting EOS or when the budget or
/// `max_len` is exhausted.
pub fn decode(model: &Seq2Seq, vocab: &Vocab, source: &[usize], mode: DecodeMode, max_new: usize) -> Result<DecodeOutput> {
    if max_new == 0 {
        return Err(Error::arg("max_new must be at least 1"));
    }
    let mut rng = match mode {
        DecodeMode::Greedy => None,
        DecodeMode::Sampled { temperature, seed } => {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(Error::arg(format!("temperature must be positive, got {temperature}")));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
    };
    let budget = max_new.min(model.config().max_len);
    let mut dec = model.start_decoder(model.encode_memory(source)?);
    let mut out = DecodeOutput {
        token_ids: Vec::new(),
        text: String::new(),
        per_token_logprob: Vec::new(),
        decoder_reps: Vec::new(),
    };
    let mut prev = BOS;
    while out.token_ids.len() < budget {
        let step = dec.step(prev)?;
        let lse = tensor::log_sum_exp(&step.logits);
        let next = match (&mut rng, mode) {
            (Some(rng), DecodeMode::Sampled { temperature, .. }) => {
                let w: Vec<f64> = step.logits.iter().map(|l| ((l - lse) / temperature).exp()).collect();
                WeightedIndex::new(&w)
                    .map_err(|e| Error::arg(format!("degenerate sampling distribution: {e}")))?
                    .sample(rng)
            }
            _ => argmax(&step.logits),
        };
        out.token_ids.push(next);
        out.per_token_logprob.push(step.logits[next] - lse);
        out.decoder_reps.push(step.rep);
        if next == EOS {
            break;
        }
        prev = next;
    }
    out.text = vocab.decode_text(&out.token_ids);
    Ok(out)
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Decodes a persona and splits it into sentences.
pub fn decode_persona(
    model: &Seq2Seq,
    vocab: &Vocab,
    source: &[usize],
    mode: DecodeMode,
    max_new: usize,
) -> Result<(Vec<String>, DecodeOutput)> {
    let out = decode(model, vocab, source, mode, max_new)?;
    let sentences = persona_sentences(vocab, &out.token_ids)
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    Ok((sentences, out))
}

/// Token spans of the sentences in a persona sequence: maximal runs between
/// PERSONA_SEP delimiters, ending at the first EOS. Empty runs are skipped.
pub fn sentence_spans(ids: &[usize]) -> Vec<(usize, usize)> {
    let end = ids.iter().position(|&t| t == EOS).unwrap_or(ids.len());
    let mut spans = Vec::new();
    let mut start = 0;
    for i in 0..=end {
        if i == end || ids[i] == PERSONA_SEP {
            if i > start {
                spans.push((start, i));
            }
            start = i + 1;
        }
    }
    spans
}

/// Sentences paired with their token spans; spans whose text is empty are dropped.
pub fn persona_sentences(vocab: &Vocab, ids: &[usize]) -> Vec<(String, (usize, usize))> {
    sentence_spans(ids)
        .into_iter()
        .filter_map(|(a, b)| {
            let text = vocab.decode_text(&ids[a..b]);
            (!text.is_empty()).then_some((text, (a, b)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRep {
    pub vector: Vec<f64>,
    pub sentence_span: (usize, usize),
}

/// Mean of `reps` rows over each span.
pub fn sentence_reps(reps: &[Vec<f64>], spans: &[(usize, usize)]) -> Result<Vec<SentenceRep>> {
    check_spans(spans, reps.len())?;
    let mut out = Vec::with_capacity(spans.len());
    for &(a, b) in spans {
        let dim = reps[a].len();
        let mut v = vec![0.0; dim];
        for row in &reps[a..b] {
            if row.len() != dim {
                return Err(Error::arg("representation rows differ in width"));
            }
            v.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        let n = (b - a) as f64;
        v.iter_mut().for_each(|x| *x /= n);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg("non-finite sentence representation"));
        }
        out.push(SentenceRep {
            vector: v,
            sentence_span: (a, b),
        });
    }
    Ok(out)
}

/// Spans must be non-empty, in range, and pairwise disjoint.
pub fn check_spans(spans: &[(usize, usize)], len: usize) -> Result<()> {
    let mut sorted = spans.to_vec();
    sorted.sort_unstable();
    for (i, &(a, b)) in sorted.iter().enumerate() {
        if a >= b {
            return Err(Error::arg(format!("empty span {a}..{b}")));
        }
        if b > len {
            return Err(Error::arg(format!("span {a}..{b} exceeds {len} rows")));
        }
        if i > 0 && sorted[i - 1].1 > a {
            return Err(Error::arg(format!("span {a}..{b} overlaps another span")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["hi there how are you", "my favorite food is sushi.", "i listen to rap music."])
    }

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 32,
            max_len: 32,
            dropout: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn source_layouts() {
        let v = vocab();
        assert_eq!(encode_source(&v, &strings(&["hi"]), 16).unwrap(), vec![BOS, v.id("hi"), EOS]);
        let two = encode_source(&v, &strings(&["hi", "how are you"]), 16).unwrap();
        assert_eq!(two.iter().filter(|&&t| t == SEP).count(), 1);
        let long = encode_source(&v, &strings(&["hi there", "how are you"]), 5).unwrap();
        assert_eq!(long, vec![BOS, v.id("how"), v.id("are"), v.id("you"), EOS]);
        assert!(encode_source(&v, &[], 16).is_err());
    }

    #[test]
    fn persona_serialization_and_spans() {
        let v = vocab();
        let ids = serialize_persona(&v, &strings(&["my favorite food is sushi.", "i listen to rap music."]), 32).unwrap();
        assert_eq!(ids.iter().filter(|&&t| t == PERSONA_SEP).count(), 1);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(sentence_spans(&ids), vec![(0, 5), (6, 11)]);
        let sents: Vec<String> = persona_sentences(&v, &ids).into_iter().map(|p| p.0).collect();
        assert_eq!(sents, strings(&["my favorite food is sushi.", "i listen to rap music."]));
        assert_eq!(sentence_spans(&[PERSONA_SEP, EOS]), vec![]);
        assert_eq!(sentence_spans(&[7, 8]), vec![(0, 2)]);

        let two = strings(&["my favorite food is sushi.", "i listen to rap music."]);
        assert!(serialize_persona(&v, &two, 8).is_err());
        assert_eq!(serialize_persona_truncated(&v, &two, 8), ids[..8].to_vec());
        assert_eq!(serialize_persona_truncated(&v, &two, 32), ids);
    }

    #[test]
    fn generator_source_keeps_persona() {
        let v = vocab();
        let p = strings(&["my favorite food is sushi."]);
        let history = strings(&["hi there", "how are you", "how are you"]);
        let ids = encode_generator_source(&v, &p, &history, 14).unwrap();
        assert_eq!(ids.len(), 14);
        assert_eq!(&ids[..7], &[BOS, v.id("my"), v.id("favorite"), v.id("food"), v.id("is"), v.id("sushi."), PERSONA_SEP]);
        assert_eq!(&ids[7..], &[v.id("are"), v.id("you"), SEP, v.id("how"), v.id("are"), v.id("you"), EOS]);
        let long: Vec<String> = (0..10).map(|_| "my favorite food is sushi.".to_string()).collect();
        let capped = encode_generator_source(&v, &long, &strings(&["hi"]), 20).unwrap();
        assert_eq!(capped.len(), 2 + 6 + 1);
        let no_persona = encode_generator_source(&v, &[], &strings(&["hi"]), 10).unwrap();
        assert_eq!(no_persona, vec![BOS, v.id("hi"), EOS]);
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let v = vocab();
        let mut m = Seq2Seq::new(tiny_config(), v.len()).unwrap();
        m.make_uniform();
        let l = nll(&m, &[BOS, 7, EOS], &[8, 9, 10, EOS]).unwrap();
        assert!((l - (v.len() as f64).ln()).abs() < 1e-6);
        let s = nll_with_mode(&m, &[BOS, 7, EOS], &[8, 9, 10, EOS], NllMode::Sum).unwrap();
        assert!((s - 4.0 * (v.len() as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn pad_positions_excluded() {
        let v = vocab();
        let m = Seq2Seq::new(tiny_config(), v.len()).unwrap();
        assert!(nll(&m, &[BOS, 7, EOS], &[PAD, PAD]).is_err());
        let lp = token_logprobs(&m, &[BOS, 7, EOS], &[8, 9, PAD]).unwrap();
        let manual = -(lp[0] + lp[1]) / 2.0;
        let got = nll(&m, &[BOS, 7, EOS], &[8, 9, PAD]).unwrap();
        assert!((manual - got).abs() < 1e-12);
    }

    #[test]
    fn step_distributions_normalized() {
        let v = vocab();
        let m = Seq2Seq::new(tiny_config(), v.len()).unwrap();
        let lp = step_log_distributions(&m, &[BOS, 7, 8, EOS], &[9, 10, 11, EOS]).unwrap();
        for r in 0..lp.rows {
            let s: f64 = lp.row(r).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nll_bit_reproducible() {
        let v = vocab();
        let m = Seq2Seq::new(tiny_config(), v.len()).unwrap();
        let a = nll(&m, &[BOS, 7, EOS], &[8, 9, EOS]).unwrap();
        let b = nll(&m, &[BOS, 7, EOS], &[8, 9, EOS]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn decode_budget_and_consistency() {
        let v = vocab();
        let m = Seq2Seq::new(tiny_config(), v.len()).unwrap();
        let src = [BOS, 7, 8, EOS];
        let (sents, out) = decode_persona(&m, &v, &src, DecodeMode::Greedy, 1).unwrap();
        assert!(out.token_ids.len() <= 1);
        assert!(sents.len() <= 1);
        assert!(decode(&m, &v, &src, DecodeMode::Greedy, 0).is_err());

        let a = decode(&m, &v, &src, DecodeMode::Greedy, 12).unwrap();
        let b = decode(&m, &v, &src, DecodeMode::Greedy, 12).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.token_ids.len(), a.per_token_logprob.len());
        assert_eq!(a.token_ids.len(), a.decoder_reps.len());
        assert_eq!(a.text, v.decode_text(&a.token_ids));
        let lp = token_logprobs(&m, &src, &a.token_ids).unwrap();
        for (x, y) in lp.iter().zip(&a.per_token_logprob) {
            assert!((x - y).abs() < 1e-9);
        }

        let s1 = decode(&m, &v, &src, DecodeMode::Sampled { temperature: 1.0, seed: 5 }, 12).unwrap();
        let s2 = decode(&m, &v, &src, DecodeMode::Sampled { temperature: 1.0, seed: 5 }, 12).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn sentence_rep_means() {
        let reps = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 9.0], vec![3.0, 4.0]];
        let r = sentence_reps(&reps, &[(0, 1), (1, 4)]).unwrap();
        assert_eq!(r[0].vector, vec![1.0, 2.0]);
        assert!((r[1].vector[0] - 11.0 / 3.0).abs() < 1e-9);
        assert!((r[1].vector[1] - 17.0 / 3.0).abs() < 1e-9);
        let same = sentence_reps(&[vec![0.5, -1.0], vec![0.5, -1.0]], &[(0, 2)]).unwrap();
        assert_eq!(same[0].vector, vec![0.5, -1.0]);
        assert!(sentence_reps(&reps, &[(2, 2)]).is_err());
        assert!(sentence_reps(&reps, &[(0, 5)]).is_err());
        assert!(sentence_reps(&reps, &[(0, 2), (1, 3)]).is_err());
    }
}
