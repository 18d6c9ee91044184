//! Corpus-level text metrics: BLEU, ROUGE-n, ROUGE-L, Distinct-n,
//! perplexity and an embedding-cosine score. All bounded metrics are in [0, 1].

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::normalize;
use crate::embedder::{cosine, SentenceEmbedder};
use crate::error::{Error, Result};
use crate::seq2seq::{nll_with_mode, NllMode, Seq2Seq, PAD};

pub const BLEU_EPSILON: f64 = 1e-9;

fn tokens(text: &str) -> Vec<String> {
    normalize(text).split(' ').filter(|w| !w.is_empty()).map(str::to_string).collect()
}

fn ngrams(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_pairs(candidates: &[String], references: &[String]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::arg("metric needs at least one candidate"));
    }
    if candidates.len() != references.len() {
        return Err(Error::arg(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

/// Corpus BLEU up to order `n` with brevity penalty and add-epsilon smoothing.
pub fn bleu_n(candidates: &[String], references: &[String], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::arg(format!("BLEU order must be 1..4, got {n}")));
    }
    check_pairs(candidates, references)?;
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut cand_len, mut ref_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        let (ct, rt) = (tokens(c), tokens(r));
        cand_len += ct.len();
        ref_len += rt.len();
        for k in 1..=n {
            let rc = ngrams(&rt, k);
            for (g, cnt) in ngrams(&ct, k) {
                matched[k - 1] += cnt.min(rc.get(g).copied().unwrap_or(0));
                total[k - 1] += cnt;
            }
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..n)
        .map(|k| {
            let m = if matched[k] == 0 { BLEU_EPSILON } else { matched[k] as f64 };
            let t = if total[k] == 0 { 1.0 } else { total[k] as f64 };
            (m / t).ln()
        })
        .sum::<f64>()
        / n as f64;
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok((bp * log_p.exp()).clamp(0.0, 1.0))
}

fn f1(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 || cand == 0 || reference == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean LCS F-measure over pairs.
pub fn rouge_l(candidates: &[String], references: &[String]) -> Result<f64> {
    check_pairs(candidates, references)?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| {
            let (ct, rt) = (tokens(c), tokens(r));
            f1(lcs(&ct, &rt), ct.len(), rt.len())
        })
        .sum();
    Ok(sum / candidates.len() as f64)
}

/// Mean n-gram overlap F-measure over pairs.
pub fn rouge_n(candidates: &[String], references: &[String], n: usize) -> Result<f64> {
    if !(1..=2).contains(&n) {
        return Err(Error::arg(format!("ROUGE order must be 1 or 2, got {n}")));
    }
    check_pairs(candidates, references)?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| {
            let (ct, rt) = (tokens(c), tokens(r));
            let (cg, rg) = (ngrams(&ct, n), ngrams(&rt, n));
            let overlap = cg.iter().map(|(g, &k)| k.min(rg.get(g).copied().unwrap_or(0))).sum();
            f1(overlap, cg.values().sum(), rg.values().sum())
        })
        .sum();
    Ok(sum / candidates.len() as f64)
}

/// Unique n-grams over total n-grams across all candidates.
pub fn distinct_n(candidates: &[String], n: usize) -> Result<f64> {
    if !(1..=2).contains(&n) {
        return Err(Error::arg(format!("Distinct order must be 1 or 2, got {n}")));
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for c in candidates {
        let t = tokens(c);
        if t.len() >= n {
            for w in t.windows(n) {
                unique.insert(w.to_vec());
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::arg(format!("no candidate has at least {n} tokens")));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// `exp` of the token-weighted mean NLL over `(source, target)` pairs.
pub fn perplexity(model: &Seq2Seq, examples: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::arg("perplexity needs at least one example"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (source, target) in examples {
        total += nll_with_mode(model, source, target, NllMode::Sum)?;
        count += target.iter().filter(|&&t| t != PAD).count();
    }
    Ok((total / count as f64).exp())
}

/// Mean of `(cos + 1) / 2` between embedded candidate and reference.
pub fn embed_score(candidates: &[String], references: &[String], embedder: &dyn SentenceEmbedder) -> Result<f64> {
    check_pairs(candidates, references)?;
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += embed_pair(c, r, embedder)?;
    }
    Ok(sum / candidates.len() as f64)
}

fn embed_pair(c: &str, r: &str, embedder: &dyn SentenceEmbedder) -> Result<f64> {
    let (c_empty, r_empty) = (normalize(c).is_empty(), normalize(r).is_empty());
    if c_empty || r_empty {
        return Ok(if c_empty && r_empty { 1.0 } else { 0.0 });
    }
    let cos = cosine(&embedder.embed(c)?, &embedder.embed(r)?)?;
    Ok(((cos + 1.0) / 2.0).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub bleu_orders: Vec<usize>,
    pub rouge_orders: Vec<usize>,
    pub distinct_orders: Vec<usize>,
    pub bleu_smoothing_epsilon: f64,
    pub embedder: String,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bleu_orders: vec![1, 2, 3, 4],
            rouge_orders: vec![1, 2],
            distinct_orders: vec![1, 2],
            bleu_smoothing_epsilon: BLEU_EPSILON,
            embedder: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub values: BTreeMap<String, f64>,
    pub n_examples: usize,
    pub config: MetricConfig,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}

/// Every text metric over one corpus. Distinct-n is skipped when no
/// candidate is long enough; perplexity is added by the caller.
pub fn evaluate_text(
    candidates: &[String],
    references: &[String],
    embedder: &dyn SentenceEmbedder,
) -> Result<MetricReport> {
    let mut config = MetricConfig {
        embedder: embedder.spec().name.clone(),
        ..MetricConfig::default()
    };
    let mut values = BTreeMap::new();
    for &n in &config.bleu_orders {
        values.insert(format!("bleu_{n}"), bleu_n(candidates, references, n)?);
    }
    for &n in &config.rouge_orders {
        values.insert(format!("rouge_{n}"), rouge_n(candidates, references, n)?);
    }
    values.insert("rouge_l".into(), rouge_l(candidates, references)?);
    let mut distinct = Vec::new();
    for &n in &config.distinct_orders {
        if let Ok(d) = distinct_n(candidates, n) {
            values.insert(format!("distinct_{n}"), d);
            distinct.push(n);
        }
    }
    config.distinct_orders = distinct;
    values.insert("embed_score".into(), embed_score(candidates, references, embedder)?);
    Ok(MetricReport {
        values,
        n_examples: candidates.len(),
        config,
    })
}
