use pess_core::corpus::{make_toy_corpus, split_examples, CorpusSplits, Dialogue, GenerationExample, Speaker};
use pess_core::embedder::HashedNgramEmbedder;
use pess_core::pipeline::{extract_persona, train_extractor, train_generator, Ablation, TrainConfig};
use pess_core::seq2seq::{checkpoint_hash, ModelConfig};
use pess_core::Error;

fn model(d_model: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 2 * d_model,
        max_len: 64,
        dropout: 0.1,
        seed: 0,
    }
}

fn splits(n: usize, traits: usize, seed: u64) -> CorpusSplits {
    let (dialogues, _) = make_toy_corpus(n, traits, seed).unwrap();
    split_examples(&dialogues, [0.7, 0.2, 0.1], seed).unwrap()
}

#[test]
fn same_seed_gives_identical_runs() {
    let data = splits(40, 6, 2);
    let embedder = HashedNgramEmbedder::new(256).unwrap();
    let config = TrainConfig {
        epochs_total: 3,
        epochs_nll_only: 1,
        learning_rate: 3e-3,
        seed: 9,
        ..TrainConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs
        .iter()
        .map(|d| train_extractor(&data, &model(16), &config, &embedder, Some(d.path())).unwrap())
        .collect();
    let hashes: Vec<String> = dirs
        .iter()
        .map(|d| checkpoint_hash(&d.path().join("checkpoints").join("best")).unwrap())
        .collect();
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(runs[0].log, runs[1].log);
    for (a, b) in runs[0].record.epochs.iter().zip(&runs[1].record.epochs) {
        assert_eq!(a.validation, b.validation);
        assert_eq!(a.mean_l_total.to_bits(), b.mean_l_total.to_bits());
    }
    assert_eq!(runs[0].record.best_validation, runs[1].record.best_validation);

    let other = train_extractor(&data, &model(16), &TrainConfig { seed: 10, ..config }, &embedder, None).unwrap();
    assert_ne!(other.log, runs[0].log);
}

#[test]
fn persona_input_lowers_generator_perplexity() {
    let data = splits(150, 4, 3);
    let embedder = HashedNgramEmbedder::new(256).unwrap();
    let ex_config = TrainConfig {
        epochs_total: 6,
        epochs_nll_only: 3,
        learning_rate: 3e-3,
        ablation: Ablation::Full,
        ..TrainConfig::default()
    };
    let mut extractor = train_extractor(&data, &model(32), &ex_config, &embedder, None).unwrap().extractor;
    extractor.freeze();
    let gen_config = TrainConfig {
        epochs_total: 4,
        epochs_nll_only: 0,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let with = train_generator(&data, Some(&extractor), &model(32), &gen_config, None).unwrap();
    let without = train_generator(&data, None, &model(32), &gen_config, None).unwrap();
    let (a, b) = (with.record.best_validation["ppl"], without.record.best_validation["ppl"]);
    assert!(a < b, "persona-grounded PPL {a} vs persona-ablated {b}");
    assert!(with.generator.uses_persona() && !without.generator.uses_persona());
}

#[test]
fn overfit_generator_memorizes_the_response() {
    let (dialogues, _) = make_toy_corpus(1, 4, 6).unwrap();
    let data = CorpusSplits {
        train: dialogues.clone(),
        validation: dialogues.clone(),
        test: Vec::new(),
    };
    let config = TrainConfig {
        epochs_total: 120,
        epochs_nll_only: 0,
        learning_rate: 1e-2,
        batch_size: 1,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mc = ModelConfig { dropout: 0.0, ..model(16) };
    let run = train_generator(&data, None, &mc, &config, None).unwrap();
    let ex = GenerationExample::from_dialogue(&dialogues[0]).unwrap();
    let reply = run.generator.respond(&[], &ex.history).unwrap();
    assert_eq!(reply, pess_core::corpus::normalize(&ex.target_response));
    assert!(run.record.best_validation["ppl"] < 1.2);
}

#[test]
fn extract_persona_contracts() {
    let (dialogues, _) = make_toy_corpus(12, 4, 1).unwrap();
    let data = CorpusSplits {
        train: dialogues.clone(),
        validation: dialogues[..2].to_vec(),
        test: Vec::new(),
    };
    let embedder = HashedNgramEmbedder::new(256).unwrap();
    let config = TrainConfig {
        epochs_total: 1,
        epochs_nll_only: 1,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    train_extractor(&data, &model(16), &config, &embedder, Some(dir.path())).unwrap();
    let ckpt = dir.path().join("checkpoints").join("best");

    let a = extract_persona(&ckpt, &dialogues[0], Speaker::A).unwrap();
    let b = extract_persona(&ckpt, &dialogues[0], Speaker::A).unwrap();
    assert_eq!(a, b);

    let only_b = Dialogue {
        utterances: dialogues[0].utterances.iter().filter(|u| u.speaker == Speaker::B).cloned().collect(),
        ..dialogues[0].clone()
    };
    assert!(matches!(extract_persona(&ckpt, &only_b, Speaker::A), Err(Error::Precondition(_))));
    assert!(matches!(
        extract_persona(&dir.path().join("missing"), &dialogues[0], Speaker::A),
        Err(Error::Io { .. })
    ));
}
