//! Sentence-level consistency between ground-truth and generated personas.
//!
//! Each ground-truth sentence is mapped to its most similar generated
//! sentence. Matches at or above the threshold are consistent; ground-truth
//! sentences without such a match are missing. The new training target is the
//! consistent generated sentences followed by the missing ground-truth ones.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::normalize;
use crate::embedder::{cosine, SentenceEmbedder};
use crate::error::{Error, Result};

/// Similarity threshold used throughout the experiments.
pub const DEFAULT_TAU: f64 = 0.9;

pub fn default_tau() -> f64 {
    DEFAULT_TAU
}

pub fn validate_tau(tau: f64) -> Result<f64> {
    if tau.is_finite() && tau > 0.0 && tau <= 1.0 {
        Ok(tau)
    } else {
        Err(Error::arg(format!("tau must lie in (0, 1], got {tau}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    /// Row `i` holds the scores of ground-truth sentence `i` against every generated sentence.
    pub scores: Vec<Vec<f64>>,
    pub ground_truth: Vec<String>,
    pub generated: Vec<String>,
}

impl SimilarityMatrix {
    /// Wraps precomputed scores after checking shape and range.
    pub fn from_scores(scores: Vec<Vec<f64>>, ground_truth: Vec<String>, generated: Vec<String>) -> Result<Self> {
        if ground_truth.is_empty() {
            return Err(Error::arg("similarity matrix needs at least one ground-truth sentence"));
        }
        if scores.len() != ground_truth.len() {
            return Err(Error::arg(format!(
                "score rows ({}) do not match ground-truth sentences ({})",
                scores.len(),
                ground_truth.len()
            )));
        }
        for (i, row) in scores.iter().enumerate() {
            if row.len() != generated.len() {
                return Err(Error::arg(format!(
                    "score row {i} has {} columns, expected {}",
                    row.len(),
                    generated.len()
                )));
            }
            if let Some(bad) = row.iter().find(|s| !s.is_finite() || s.abs() > 1.0 + 1e-12) {
                return Err(Error::arg(format!("score {bad} in row {i} is outside [-1, 1]")));
            }
        }
        Ok(Self {
            scores,
            ground_truth,
            generated,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.ground_truth.len(), self.generated.len())
    }
}

pub fn build_similarity_matrix(
    ground_truth: &[String],
    generated: &[String],
    embedder: &dyn SentenceEmbedder,
) -> Result<SimilarityMatrix> {
    if ground_truth.is_empty() {
        return Err(Error::arg("similarity matrix needs at least one ground-truth sentence"));
    }
    let gt = ground_truth
        .iter()
        .map(|s| embedder.embed(s))
        .collect::<Result<Vec<_>>>()?;
    let gen = generated
        .iter()
        .map(|s| embedder.embed(s))
        .collect::<Result<Vec<_>>>()?;
    let mut scores = Vec::with_capacity(gt.len());
    for g in &gt {
        scores.push(gen.iter().map(|h| cosine(g, h)).collect::<Result<Vec<_>>>()?);
    }
    Ok(SimilarityMatrix {
        scores,
        ground_truth: ground_truth.to_vec(),
        generated: generated.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchVerdict {
    pub gt_index: usize,
    pub best_gen_index: Option<usize>,
    pub best_score: Option<f64>,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub verdicts: Vec<MatchVerdict>,
    #[serde(rename = "p_con")]
    pub consistent_set: Vec<String>,
    #[serde(rename = "p_miss")]
    pub missing_set: Vec<String>,
    #[serde(rename = "p_new")]
    pub new_target: Vec<String>,
    pub tau: f64,
}

impl MatchResult {
    /// Generated-sentence indices that are the consistent best match of some
    /// ground-truth sentence, ascending and without repeats.
    pub fn consistent_generated_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .verdicts
            .iter()
            .filter(|v| v.consistent)
            .filter_map(|v| v.best_gen_index)
            .collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

/// Row-wise argmax (first index wins ties) followed by thresholding.
pub fn match_persona(sim: &SimilarityMatrix, tau: f64) -> Result<MatchResult> {
    let tau = validate_tau(tau)?;
    let mut verdicts = Vec::with_capacity(sim.ground_truth.len());
    for (i, row) in sim.scores.iter().enumerate() {
        let best = row
            .iter()
            .enumerate()
            .fold(None::<(usize, f64)>, |acc, (j, &s)| match acc {
                Some((_, b)) if b >= s => acc,
                _ => Some((j, s)),
            });
        verdicts.push(MatchVerdict {
            gt_index: i,
            best_gen_index: best.map(|(j, _)| j),
            best_score: best.map(|(_, s)| s),
            consistent: best.is_some_and(|(_, s)| s >= tau),
        });
    }

    let mut con_idx: Vec<usize> = verdicts
        .iter()
        .filter(|v| v.consistent)
        .filter_map(|v| v.best_gen_index)
        .collect();
    con_idx.sort_unstable();
    con_idx.dedup();

    let mut seen = HashSet::new();
    let consistent_set: Vec<String> = con_idx
        .iter()
        .map(|&j| sim.generated[j].clone())
        .filter(|s| seen.insert(normalize(s)))
        .collect();
    let missing_set: Vec<String> = verdicts
        .iter()
        .filter(|v| !v.consistent)
        .map(|v| sim.ground_truth[v.gt_index].clone())
        .collect();
    let mut new_target = consistent_set.clone();
    for s in &missing_set {
        if seen.insert(normalize(s)) {
            new_target.push(s.clone());
        }
    }

    Ok(MatchResult {
        verdicts,
        consistent_set,
        missing_set,
        new_target,
        tau,
    })
}
