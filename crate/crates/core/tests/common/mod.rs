#![allow(dead_code)]

use std::sync::OnceLock;

use fwdedit_core::model::{generate_corpus, train_toy, CorpusParams, FactCorpus, ModelConfig, TrainConfig, TransformerModel};

pub struct Fixture {
    pub corpus: FactCorpus,
    pub model: TransformerModel,
}

pub fn tiny_params() -> (CorpusParams, ModelConfig) {
    let params = CorpusParams {
        n_subjects: 24,
        n_relations: 3,
        n_objects: 8,
        n_templates: 2,
        n_heldout_templates: 1,
        n_name_pieces: 6,
        subject_len: 2,
        n_neighbors: 3,
        seed: 11,
    };
    let config = ModelConfig {
        vocab_size: 0,
        d_model: 32,
        n_layers: 4,
        n_heads: 2,
        d_mlp: 64,
        max_seq_len: 8,
        decisive_layers: vec![1, 2, 3],
        seed: 5,
    };
    (params, config)
}

/// A small model trained once per test binary.
pub fn tiny() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let (params, mut config) = tiny_params();
        let corpus = generate_corpus(&params).unwrap();
        config.vocab_size = corpus.vocab_size();
        let opt = TrainConfig {
            target_accuracy: 0.97,
            eval_every: 2,
            ..TrainConfig::default()
        };
        let (model, _) = train_toy(&corpus, &config, &opt, |_| {}).unwrap();
        Fixture { corpus, model }
    })
}
