//! Dialogue data model, record loaders and the synthetic toy corpus.

mod io;
mod toy;

pub use io::{load_esconv, load_persona_chat, write_esconv, write_persona_chat};
pub use toy::{make_toy_corpus, ToyGrammar, TraitEntry, TRAIT_INVENTORY_SIZE};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercase, trim and collapse internal whitespace.
///
/// Every comparison, tokenization and metric in the crate goes through this
/// one function.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::A => "A",
            Speaker::B => "B",
        }
    }
}

impl std::str::FromStr for Speaker {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Speaker::A),
            "B" | "b" => Ok(Speaker::B),
            other => Err(Error::arg(format!("unknown speaker `{other}` (expected A or B)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    /// 1-based turn ordinal within the dialogue.
    pub index: usize,
}

/// Ordered persona sentences of one speaker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaProfile {
    sentences: Vec<String>,
}

impl PersonaProfile {
    /// Rejects empty sentences and duplicates (compared after normalization).
    pub fn new(sentences: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (i, s) in sentences.iter().enumerate() {
            let norm = normalize(s);
            if norm.is_empty() {
                return Err(Error::arg(format!("persona sentence {i} is empty")));
            }
            if !seen.insert(norm) {
                return Err(Error::arg(format!("persona sentence {i} duplicates an earlier one: {s:?}")));
            }
        }
        Ok(Self { sentences })
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub persona_a: Option<PersonaProfile>,
    pub persona_b: Option<PersonaProfile>,
}

impl Dialogue {
    /// Builds a dialogue from `(speaker, text)` turns, assigning 1-based indices.
    pub fn from_turns(
        id: impl Into<String>,
        turns: Vec<(Speaker, String)>,
        persona_a: Option<PersonaProfile>,
        persona_b: Option<PersonaProfile>,
    ) -> Result<Self> {
        let id = id.into();
        if turns.is_empty() {
            return Err(Error::arg(format!("dialogue {id} has no utterances")));
        }
        let mut utterances = Vec::with_capacity(turns.len());
        for (i, (speaker, text)) in turns.into_iter().enumerate() {
            if normalize(&text).is_empty() {
                return Err(Error::arg(format!("dialogue {id}: utterance {} is empty", i + 1)));
            }
            utterances.push(Utterance {
                speaker,
                text,
                index: i + 1,
            });
        }
        Ok(Self {
            id,
            utterances,
            persona_a,
            persona_b,
        })
    }

    pub fn persona(&self, speaker: Speaker) -> Option<&PersonaProfile> {
        match speaker {
            Speaker::A => self.persona_a.as_ref(),
            Speaker::B => self.persona_b.as_ref(),
        }
    }

    /// Texts of every utterance spoken by `speaker`, in dialogue order.
    pub fn utterances_of(&self, speaker: Speaker) -> Vec<String> {
        self.utterances
            .iter()
            .filter(|u| u.speaker == speaker)
            .map(|u| u.text.clone())
            .collect()
    }
}

/// One speaker's utterances paired with that speaker's ground-truth persona.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionExample {
    pub source_utterances: Vec<String>,
    pub target_persona: PersonaProfile,
}

impl ExtractionExample {
    pub fn new(source_utterances: Vec<String>, target_persona: PersonaProfile) -> Result<Self> {
        if source_utterances.is_empty() {
            return Err(Error::arg("extraction example needs at least one source utterance"));
        }
        if target_persona.is_empty() {
            return Err(Error::arg("extraction example needs a non-empty target persona"));
        }
        Ok(Self {
            source_utterances,
            target_persona,
        })
    }

    /// `None` when the speaker has no persona or never speaks.
    pub fn from_dialogue(dialogue: &Dialogue, speaker: Speaker) -> Option<Self> {
        let persona = dialogue.persona(speaker)?.clone();
        Self::new(dialogue.utterances_of(speaker), persona).ok()
    }
}

/// Dialogue history (ending on an A turn) and the B response that follows it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationExample {
    pub history: Vec<Utterance>,
    pub target_response: String,
    pub inferred_persona: Option<Vec<String>>,
}

impl GenerationExample {
    /// Uses the final B turn as target and everything before it as history.
    ///
    /// Returns `None` when the dialogue does not end on a B turn or the
    /// history would be empty.
    pub fn from_dialogue(dialogue: &Dialogue) -> Option<Self> {
        let (last, history) = dialogue.utterances.split_last()?;
        if last.speaker != Speaker::B || history.is_empty() {
            return None;
        }
        Some(Self {
            history: history.to_vec(),
            target_response: last.text.clone(),
            inferred_persona: None,
        })
    }

    /// A-side utterances of the history, the extractor's input.
    pub fn seeker_utterances(&self) -> Vec<String> {
        self.history
            .iter()
            .filter(|u| u.speaker == Speaker::A)
            .map(|u| u.text.clone())
            .collect()
    }
}

/// Train / validation / test partition of a dialogue set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplits {
    pub train: Vec<Dialogue>,
    pub validation: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Seeded shuffle followed by a proportional three-way cut.
///
/// The train and validation sizes are rounded to the nearest integer; test
/// takes the remainder.
pub fn split_examples(dialogues: &[Dialogue], ratios: [f64; 3], seed: u64) -> Result<CorpusSplits> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::arg(format!("split ratios must be non-negative, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("split ratios must sum to 1, got {total}")));
    }
    let n = dialogues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_train = ((n as f64) * ratios[0]).round() as usize;
    let n_val = (((n as f64) * ratios[1]).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let pick = |idx: &[usize]| idx.iter().map(|&i| dialogues[i].clone()).collect::<Vec<_>>();
    Ok(CorpusSplits {
        train: pick(&order[..n_train]),
        validation: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}
