//! Sentence embeddings and cosine similarity.
//!
//! Providers implement [`SentenceEmbedder`] over already-normalized text. The
//! built-in provider hashes word unigrams and boundary-padded character
//! trigrams into a signed feature vector and L2-normalizes it.

use serde::{Deserialize, Serialize};

use crate::corpus::normalize;
use crate::error::{Error, ProviderError, Result};

pub const HASHED_NGRAM: &str = "hashed-ngram";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub name: String,
    pub dimension: usize,
    pub deterministic: bool,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            name: HASHED_NGRAM.to_string(),
            dimension: 256,
            deterministic: true,
        }
    }
}

impl EmbedderSpec {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.dimension < 8 {
            return Err(ProviderError::Config(format!(
                "embedding dimension must be at least 8, got {}",
                self.dimension
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    pub source_text: String,
}

impl SentenceEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

pub trait SentenceEmbedder: Send + Sync {
    fn spec(&self) -> &EmbedderSpec;

    /// Embeds text that has already been passed through [`normalize`].
    fn embed_normalized(&self, text: &str) -> Result<Vec<f64>, ProviderError>;

    /// Normalizes `text`, embeds it and checks the provider contract.
    fn embed(&self, text: &str) -> Result<SentenceEmbedding> {
        let norm = normalize(text);
        if norm.is_empty() {
            return Err(Error::arg("cannot embed empty text"));
        }
        let vector = self.embed_normalized(&norm)?;
        if vector.len() != self.spec().dimension {
            return Err(ProviderError::Runtime(format!(
                "provider returned dimension {} but declares {}",
                vector.len(),
                self.spec().dimension
            ))
            .into());
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(ProviderError::Runtime("provider returned non-finite values".into()).into());
        }
        Ok(SentenceEmbedding {
            vector,
            source_text: norm,
        })
    }
}

/// Resolves a provider by name.
pub fn build_embedder(spec: &EmbedderSpec) -> Result<Box<dyn SentenceEmbedder>, ProviderError> {
    spec.validate()?;
    match spec.name.as_str() {
        HASHED_NGRAM => Ok(Box::new(HashedNgramEmbedder::new(spec.dimension)?)),
        other => Err(ProviderError::Config(format!(
            "unknown embedder provider `{other}` (available: {HASHED_NGRAM})"
        ))),
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct HashedNgramEmbedder {
    spec: EmbedderSpec,
}

impl HashedNgramEmbedder {
    pub fn new(dimension: usize) -> Result<Self, ProviderError> {
        let spec = EmbedderSpec {
            name: HASHED_NGRAM.to_string(),
            dimension,
            deterministic: true,
        };
        spec.validate()?;
        Ok(Self { spec })
    }

    fn add_feature(&self, out: &mut [f64], feature: &str) {
        let h = fnv1a(feature.as_bytes());
        let idx = (h % self.spec.dimension as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        out[idx] += sign;
    }
}

impl SentenceEmbedder for HashedNgramEmbedder {
    fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    fn embed_normalized(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let mut v = vec![0.0; self.spec.dimension];
        for word in text.split_whitespace() {
            self.add_feature(&mut v, &format!("w:{word}"));
            let padded: Vec<char> = std::iter::once('<').chain(word.chars()).chain(std::iter::once('>')).collect();
            for tri in padded.windows(3) {
                let gram: String = tri.iter().collect();
                self.add_feature(&mut v, &format!("c:{gram}"));
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(ProviderError::Runtime(format!("hashed features cancelled out for {text:?}")));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Cosine similarity of two raw vectors, clamped to [-1, 1].
pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::arg("cosine of a zero vector is undefined"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine(a: &SentenceEmbedding, b: &SentenceEmbedding) -> Result<f64> {
    cosine_slices(&a.vector, &b.vector)
}
