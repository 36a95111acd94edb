//! Toy decoder-only transformer, its synthetic fact corpus and training.

mod config;
mod corpus;
mod train;
mod transformer;

pub use config::ModelConfig;
pub use corpus::{generate_corpus, CorpusParams, FactCorpus, FactRecord, BOS};
pub use train::{greedy_accuracy, last_logits_many, predict_many, train_toy, EpochStats, TrainConfig, TrainReport};
pub use transformer::{
    Block, ForwardOutput, GraphOutput, HiddenTrace, Injection, PrefixCache, SuffixOutput, TransformerModel,
};

