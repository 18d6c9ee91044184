//! Synthetic persona corpus with a known persona/utterance correspondence.
//!
//! Each trait carries one canonical persona sentence and several utterance
//! paraphrases. Dialogues interleave paraphrases with small talk, and every
//! dialogue ends with a supporter turn that refers back to one of the
//! seeker's traits.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize, Dialogue, PersonaProfile, Speaker};
use crate::error::{Error, Result};

struct RawTrait {
    key: &'static str,
    persona: &'static str,
    paraphrases: &'static [&'static str],
    suggestion: &'static str,
}

const INVENTORY: &[RawTrait] = &[
    RawTrait {
        key: "likes_sushi",
        persona: "My favorite food is sushi.",
        paraphrases: &[
            "One of the foods I like is tasty sushi.",
            "I could eat fresh sushi rolls every day.",
            "Tasty sushi is the food I crave most.",
        ],
        suggestion: "Maybe treat yourself to some sushi tonight.",
    },
    RawTrait {
        key: "likes_rap",
        persona: "I listen to rap music.",
        paraphrases: &[
            "I love hearing the rap hip hop music.",
            "Rap and hip hop music is always playing in my car.",
            "My playlist is all rap and hip hop music.",
        ],
        suggestion: "Putting on some rap music might lift your mood.",
    },
    RawTrait {
        key: "has_dog",
        persona: "I have a dog named max.",
        paraphrases: &[
            "My dog max waits for me at the door.",
            "Walking max, my dog, is the best part of my day.",
            "Max is a fluffy dog who sleeps on my bed.",
        ],
        suggestion: "A long walk with your dog could help.",
    },
    RawTrait {
        key: "is_nurse",
        persona: "I work as a nurse.",
        paraphrases: &[
            "My nurse shifts at the hospital are long.",
            "Being a nurse means I help patients at the hospital.",
            "The hospital called me in for another nurse shift.",
        ],
        suggestion: "Your friends at the hospital might understand.",
    },
    RawTrait {
        key: "likes_hiking",
        persona: "I enjoy hiking in the mountains.",
        paraphrases: &[
            "Every weekend I go hiking up mountain trails.",
            "Hiking the mountain trails clears my head.",
            "I bought new boots for hiking mountain trails.",
        ],
        suggestion: "A hike in the mountains might clear your head.",
    },
    RawTrait {
        key: "likes_blue",
        persona: "My favorite color is blue.",
        paraphrases: &[
            "I painted my whole room blue, my favorite color.",
            "Blue is the color I always pick.",
            "Most of my clothes are the color blue.",
        ],
        suggestion: "Wearing something blue might cheer you up.",
    },
    RawTrait {
        key: "plays_guitar",
        persona: "I play the guitar.",
        paraphrases: &[
            "I practice my guitar every evening.",
            "My old guitar just got new strings.",
            "Playing songs on my guitar relaxes me.",
        ],
        suggestion: "Playing your guitar for a while could help you relax.",
    },
    RawTrait {
        key: "drinks_coffee",
        persona: "I drink a lot of coffee.",
        paraphrases: &[
            "I need three cups of coffee each morning.",
            "Coffee keeps me going all day.",
            "My coffee maker runs before work every morning.",
        ],
        suggestion: "A quiet cup of coffee might help you think.",
    },
    RawTrait {
        key: "has_cats",
        persona: "I have two cats.",
        paraphrases: &[
            "My two cats fight over the sunny window.",
            "Feeding my cats is the first thing I do.",
            "The cats knocked my cup off the table again.",
        ],
        suggestion: "Some quiet time with your cats could be comforting.",
    },
    RawTrait {
        key: "is_teacher",
        persona: "I am a teacher.",
        paraphrases: &[
            "My students gave me a card in class today.",
            "As a teacher I grade papers for my class.",
            "I plan lessons for my students as a teacher.",
        ],
        suggestion: "Your students would surely want you to rest.",
    },
    RawTrait {
        key: "likes_swimming",
        persona: "I like to swim.",
        paraphrases: &[
            "I swim laps at the pool every morning.",
            "Swimming in the pool is my favorite exercise.",
            "The pool opens early so I can swim.",
        ],
        suggestion: "A swim at the pool might help you unwind.",
    },
    RawTrait {
        key: "likes_pizza",
        persona: "I love eating pizza.",
        paraphrases: &[
            "Pizza with extra cheese is my weekly treat.",
            "We order cheese pizza every friday night.",
            "Nothing beats a hot slice of pizza.",
        ],
        suggestion: "Ordering a pizza tonight could be a nice treat.",
    },
    RawTrait {
        key: "reads_books",
        persona: "I read many books.",
        paraphrases: &[
            "I finished two library books this week.",
            "Reading books before bed helps me sleep.",
            "My shelves are full of library books.",
        ],
        suggestion: "Getting lost in a good book might help.",
    },
    RawTrait {
        key: "plays_soccer",
        persona: "I play soccer.",
        paraphrases: &[
            "My soccer team has a game on saturday.",
            "I scored a goal at soccer practice.",
            "Soccer practice ran late tonight.",
        ],
        suggestion: "Kicking a soccer ball with your team might help.",
    },
    RawTrait {
        key: "is_vegan",
        persona: "I am a vegan.",
        paraphrases: &[
            "I stopped eating meat and dairy, I am vegan now.",
            "Vegan recipes are all I cook now.",
            "Being vegan means no meat or dairy for me.",
        ],
        suggestion: "Cooking a vegan recipe you love might help.",
    },
    RawTrait {
        key: "from_paris",
        persona: "I grew up in paris.",
        paraphrases: &[
            "Growing up in paris, I walked along the river.",
            "My childhood in paris was full of bakeries.",
            "I still miss the streets of paris.",
        ],
        suggestion: "Maybe call an old friend from paris.",
    },
    RawTrait {
        key: "likes_painting",
        persona: "I like to paint.",
        paraphrases: &[
            "I paint landscapes with watercolors.",
            "My paint brushes and watercolors are all over the table.",
            "Painting with watercolors calms me down.",
        ],
        suggestion: "Painting for an hour might calm you down.",
    },
    RawTrait {
        key: "grows_vegetables",
        persona: "I grow vegetables in my garden.",
        paraphrases: &[
            "The tomatoes in my vegetable garden are finally ripe.",
            "I spend mornings weeding my vegetable garden.",
            "My garden gave me so many vegetables this year.",
        ],
        suggestion: "Some time in your garden might help.",
    },
    RawTrait {
        key: "watches_horror",
        persona: "I watch horror movies.",
        paraphrases: &[
            "Scary horror movies are my favorite to watch.",
            "I watched two horror movies last night.",
            "Nothing is better than a good horror movie.",
        ],
        suggestion: "Maybe skip the horror movies tonight and rest.",
    },
    RawTrait {
        key: "runs_marathons",
        persona: "I run marathons.",
        paraphrases: &[
            "I am training for my third marathon run.",
            "Running a marathon takes months of training.",
            "I finished the city marathon run in four hours.",
        ],
        suggestion: "A short easy run might clear your mind.",
    },
];

pub const TRAIT_INVENTORY_SIZE: usize = 20;

const SMALL_TALK: &[&str] = &[
    "Hello, how are you today?",
    "The weather has been strange lately.",
    "I just got back from the store.",
    "It has been a long week.",
    "What did you do today?",
];

const FILLERS: &[&str] = &[
    "That sounds nice.",
    "Oh really? Tell me more.",
    "I see, that is interesting.",
    "Wow, that is cool.",
    "I understand.",
];

const DISTRESS: &[&str] = &[
    "I feel so stressed lately.",
    "I had a really rough week and feel down.",
    "I do not know how to cheer myself up.",
];

/// One entry of the built-in trait inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraitEntry {
    pub key: String,
    pub persona: String,
    pub paraphrases: Vec<String>,
    pub suggestion: String,
}

/// The generator grammar restricted to the traits a corpus was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyGrammar {
    pub traits: Vec<TraitEntry>,
    pub small_talk: Vec<String>,
    pub fillers: Vec<String>,
    pub distress: Vec<String>,
}

impl ToyGrammar {
    pub fn with_traits(num_traits: usize) -> Result<Self> {
        debug_assert_eq!(INVENTORY.len(), TRAIT_INVENTORY_SIZE);
        if num_traits == 0 || num_traits > INVENTORY.len() {
            return Err(Error::arg(format!(
                "num_traits must be in 1..={} (size of the built-in trait inventory), got {num_traits}",
                INVENTORY.len()
            )));
        }
        let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Ok(Self {
            traits: INVENTORY[..num_traits]
                .iter()
                .map(|t| TraitEntry {
                    key: t.key.to_string(),
                    persona: t.persona.to_string(),
                    paraphrases: owned(t.paraphrases),
                    suggestion: t.suggestion.to_string(),
                })
                .collect(),
            small_talk: owned(SMALL_TALK),
            fillers: owned(FILLERS),
            distress: owned(DISTRESS),
        })
    }

    pub fn trait_by_key(&self, key: &str) -> Option<&TraitEntry> {
        self.traits.iter().find(|t| t.key == key)
    }

    /// Trait whose paraphrase set contains `utterance` (normalized comparison).
    pub fn trait_of_utterance(&self, utterance: &str) -> Option<&TraitEntry> {
        let norm = normalize(utterance);
        self.traits
            .iter()
            .find(|t| t.paraphrases.iter().any(|p| normalize(p) == norm))
    }

    /// Trait whose canonical persona sentence equals `sentence`.
    pub fn trait_of_persona(&self, sentence: &str) -> Option<&TraitEntry> {
        let norm = normalize(sentence);
        self.traits.iter().find(|t| normalize(&t.persona) == norm)
    }

    /// Maps each normalized paraphrase to its trait's persona sentence.
    pub fn inverse_map(&self) -> HashMap<String, String> {
        self.traits
            .iter()
            .flat_map(|t| t.paraphrases.iter().map(move |p| (normalize(p), t.persona.clone())))
            .collect()
    }
}

fn persona_size(rng: &mut ChaCha8Rng, num_traits: usize) -> usize {
    let lo = 2.min(num_traits);
    let hi = 4.min(num_traits);
    rng.gen_range(lo..=hi)
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &'a [String]) -> &'a str {
    xs.choose(rng).expect("non-empty grammar list")
}

/// Builds `num_dialogues` dialogues from the first `num_traits` inventory traits.
///
/// Both speakers get a persona of 2-4 traits in random order. Every persona
/// sentence is expressed by at least one paraphrase utterance of its
/// speaker. Identical arguments yield identical corpora.
pub fn make_toy_corpus(num_dialogues: usize, num_traits: usize, seed: u64) -> Result<(Vec<Dialogue>, ToyGrammar)> {
    if num_dialogues == 0 {
        return Err(Error::arg("num_dialogues must be positive"));
    }
    let grammar = ToyGrammar::with_traits(num_traits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dialogues = Vec::with_capacity(num_dialogues);

    for index in 0..num_dialogues {
        let mut keys: Vec<usize> = (0..num_traits).collect();
        keys.shuffle(&mut rng);
        let traits_a: Vec<usize> = keys[..persona_size(&mut rng, num_traits)].to_vec();
        keys.shuffle(&mut rng);
        let mut traits_b: Vec<usize> = keys[..persona_size(&mut rng, num_traits)].to_vec();

        let mut a_lines: Vec<String> = traits_a
            .iter()
            .map(|&t| pick(&mut rng, &grammar.traits[t].paraphrases).to_string())
            .collect();
        for _ in 0..rng.gen_range(0..=2) {
            a_lines.push(pick(&mut rng, &grammar.small_talk).to_string());
        }
        a_lines.shuffle(&mut rng);
        a_lines.push(pick(&mut rng, &grammar.distress).to_string());

        // B answers every A turn but the last with either filler or one of its own traits.
        traits_b.truncate(a_lines.len() - 1);
        let mut b_lines: Vec<String> = traits_b
            .iter()
            .map(|&t| pick(&mut rng, &grammar.traits[t].paraphrases).to_string())
            .collect();
        while b_lines.len() < a_lines.len() - 1 {
            b_lines.push(pick(&mut rng, &grammar.fillers).to_string());
        }
        b_lines.shuffle(&mut rng);

        let mut turns = Vec::with_capacity(a_lines.len() + b_lines.len() + 1);
        let mut b_iter = b_lines.into_iter();
        let last_a = a_lines.len() - 1;
        for (i, a) in a_lines.into_iter().enumerate() {
            turns.push((Speaker::A, a));
            if i < last_a {
                turns.push((Speaker::B, b_iter.next().expect("enough B lines")));
            }
        }
        let referenced = *traits_a.choose(&mut rng).expect("persona non-empty");
        turns.push((Speaker::B, grammar.traits[referenced].suggestion.clone()));

        let persona = |ts: &[usize]| {
            PersonaProfile::new(ts.iter().map(|&t| grammar.traits[t].persona.clone()).collect())
                .expect("inventory personas are distinct")
        };
        dialogues.push(Dialogue::from_turns(
            format!("toy-{index:04}"),
            turns,
            Some(persona(&traits_a)),
            Some(persona(&traits_b)),
        )?);
    }
    Ok((dialogues, grammar))
}
