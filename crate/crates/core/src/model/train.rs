use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::corpus::FactCorpus;
use super::transformer::TransformerModel;
use crate::autodiff::Tape;
use crate::error::{bail, Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once greedy exact match on the trained prompts reaches this.
    pub target_accuracy: f64,
    /// Accuracy is measured every `eval_every` epochs.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            batch_size: 32,
            max_epochs: 400,
            target_accuracy: 0.99,
            eval_every: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Present on evaluation epochs.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub history: Vec<EpochStats>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &mut TransformerModel) -> Self {
        let sizes: Vec<usize> = model.params_mut().iter().map(|p| p.len()).collect();
        Adam {
            m: sizes.iter().map(|&n| alloc::vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| alloc::vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut Arc<Tensor>>, grads: &[Option<Tensor>], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(cfg.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, self.t as f64);
        for (i, p) in params.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let w = Arc::make_mut(p);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (wj, gj)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *wj -= cfg.lr * mh / (math::sqrt(vh) + 1e-9);
            }
        }
    }
}

/// Next-token logits at the last position of each prompt, batched by length.
pub fn last_logits_many(model: &TransformerModel, prompts: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let mut out = alloc::vec![Vec::new(); prompts.len()];
    for (_, idx) in group_by_len(prompts.iter().map(|p| p.len())) {
        for chunk in idx.chunks(64) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|&i| prompts[i].as_slice()).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let logits = model.record_batch_last(&mut tape, &bound, &seqs)?;
            let lv = tape.value(logits);
            for (r, &i) in chunk.iter().enumerate() {
                out[i] = lv.row(r).to_vec();
            }
        }
    }
    Ok(out)
}

/// Greedy next-token predictions for many prompts.
pub fn predict_many(model: &TransformerModel, prompts: &[Vec<usize>]) -> Result<Vec<usize>> {
    Ok(last_logits_many(model, prompts)?.iter().map(|l| math::argmax(l)).collect())
}

/// Fraction of `(prompt, answer)` pairs whose greedy next token is the answer.
pub fn greedy_accuracy(model: &TransformerModel, pairs: &[(Vec<usize>, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let prompts: Vec<Vec<usize>> = pairs.iter().map(|(p, _)| p.clone()).collect();
    let pred = predict_many(model, &prompts)?;
    let hits = pred.iter().zip(pairs).filter(|(p, (_, a))| *p == a).count();
    Ok(hits as f64 / pairs.len() as f64)
}

fn group_by_len(lens: impl Iterator<Item = usize>) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, n) in lens.enumerate() {
        groups.entry(n).or_default().push(i);
    }
    groups
}

/// Trains a fresh model on every trained prompt of `corpus`, stopping at
/// `opt.target_accuracy` or failing with [`Error::TrainingBudget`].
/// Weights are rounded to 32-bit floats on return.
pub fn train_toy(
    corpus: &FactCorpus,
    config: &ModelConfig,
    opt: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(TransformerModel, TrainReport)> {
    if corpus.records.is_empty() {
        bail!(Input, "cannot train on an empty corpus");
    }
    if opt.batch_size == 0 || opt.max_epochs == 0 || opt.eval_every == 0 {
        bail!(Input, "batch_size, max_epochs and eval_every must be positive");
    }
    corpus.validate(config.vocab_size)?;
    let mut model = TransformerModel::init(config.clone())?;
    let pairs = corpus.training_pairs();
    let groups = group_by_len(pairs.iter().map(|(p, _)| p.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut adam = Adam::new(&mut model);
    let mut history = Vec::new();
    let mut accuracy = 0.0;
    let mut epochs = 0;
    for epoch in 1..=opt.max_epochs {
        epochs = epoch;
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for idx in groups.values() {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            batches.extend(idx.chunks(opt.batch_size).map(|c| c.to_vec()));
        }
        batches.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let seqs: Vec<&[usize]> = batch.iter().map(|&i| pairs[i].0.as_slice()).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| pairs[i].1).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let logits = model.record_batch_last(&mut tape, &bound, &seqs)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            total += tape.value(loss).data()[0] * batch.len() as f64;
            let mut grads = tape.backward(loss, None)?;
            let g: Vec<Option<Tensor>> = TransformerModel::bound_params(&bound)
                .into_iter()
                .map(|v| grads.take(v))
                .collect();
            drop(tape);
            adam.step(model.params_mut(), &g, opt);
        }
        let mut stats = EpochStats {
            epoch,
            mean_loss: total / pairs.len() as f64,
            accuracy: None,
        };
        let last = epoch == opt.max_epochs;
        if epoch % opt.eval_every == 0 || last {
            accuracy = greedy_accuracy(&model, &pairs)?;
            stats.accuracy = Some(accuracy);
        }
        on_epoch(&stats);
        history.push(stats);
        if accuracy >= opt.target_accuracy {
            break;
        }
    }
    model.round_to_f32();
    let train_accuracy = greedy_accuracy(&model, &pairs)?;
    if train_accuracy < opt.target_accuracy {
        return Err(Error::TrainingBudget {
            accuracy: train_accuracy,
            epochs,
            target: opt.target_accuracy,
        });
    }
    let heldout_accuracy = greedy_accuracy(&model, &corpus.heldout_pairs())?;
    Ok((
        model,
        TrainReport {
            epochs,
            train_accuracy,
            heldout_accuracy,
            history,
        },
    ))
}
