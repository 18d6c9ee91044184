use std::collections::BTreeSet;

use pess_core::corpus::{
    load_esconv, load_persona_chat, make_toy_corpus, normalize, split_examples, write_esconv, write_persona_chat,
    Dialogue, Speaker,
};
use proptest::prelude::*;

fn without_personas(ds: &[Dialogue]) -> Vec<Dialogue> {
    ds.iter()
        .map(|d| Dialogue {
            persona_a: None,
            persona_b: None,
            ..d.clone()
        })
        .collect()
}

#[test]
fn toy_persona_sentences_are_expressed_by_speaker_a() {
    let (dialogues, grammar) = make_toy_corpus(500, 8, 1).unwrap();
    let inverse = grammar.inverse_map();
    for d in &dialogues {
        let expressed: BTreeSet<String> = d
            .utterances_of(Speaker::A)
            .iter()
            .filter_map(|u| inverse.get(&normalize(u)))
            .map(|p| normalize(p))
            .collect();
        for p in d.persona_a.as_ref().unwrap().sentences() {
            assert!(expressed.contains(&normalize(p)), "{}: {p:?} has no A paraphrase", d.id);
        }
    }
}

#[test]
fn ids_are_source_and_padded_index() {
    let (dialogues, _) = make_toy_corpus(12, 4, 0).unwrap();
    let ids: Vec<&str> = dialogues.iter().map(|d| d.id.as_str()).collect();
    assert_eq!(ids[0], "toy-0000");
    assert_eq!(ids[11], "toy-0011");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn persona_chat_round_trip(n in 1usize..30, traits in 2usize..=20, seed in any::<u64>()) {
        let (dialogues, _) = make_toy_corpus(n, traits, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_persona_chat(&path, &dialogues).unwrap();
        prop_assert_eq!(load_persona_chat(&path).unwrap(), dialogues);
    }

    #[test]
    fn esconv_round_trip(n in 1usize..30, traits in 2usize..=20, seed in any::<u64>()) {
        let (dialogues, _) = make_toy_corpus(n, traits, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_esconv(&path, &dialogues).unwrap();
        prop_assert_eq!(load_esconv(&path).unwrap(), without_personas(&dialogues));
    }

    #[test]
    fn toy_inverse_map_covers_personas(n in 1usize..40, traits in 2usize..=20, seed in any::<u64>()) {
        let (dialogues, grammar) = make_toy_corpus(n, traits, seed).unwrap();
        let inverse = grammar.inverse_map();
        for d in &dialogues {
            let mapped: BTreeSet<String> = d
                .utterances_of(Speaker::A)
                .iter()
                .filter_map(|u| inverse.get(&normalize(u)).map(|p| normalize(p)))
                .collect();
            for p in d.persona_a.as_ref().unwrap().sentences() {
                prop_assert!(mapped.contains(&normalize(p)));
            }
        }
    }

    #[test]
    fn splits_partition_the_input(
        n in 1usize..80,
        seed in any::<u64>(),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
        c in 0.01f64..1.0,
    ) {
        let (dialogues, _) = make_toy_corpus(n, 6, 3).unwrap();
        let sum = a + b + c;
        let s = split_examples(&dialogues, [a / sum, b / sum, 1.0 - a / sum - b / sum], seed).unwrap();
        let ids = |ds: &[Dialogue]| ds.iter().map(|d| d.id.clone()).collect::<BTreeSet<_>>();
        let (tr, va, te) = (ids(&s.train), ids(&s.validation), ids(&s.test));
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len(), n);
        let union: BTreeSet<String> = tr.union(&va).chain(te.iter()).cloned().collect();
        prop_assert_eq!(union, ids(&dialogues));
    }
}
