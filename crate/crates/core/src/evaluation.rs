//! Edit batches drawn from the synthetic corpus and the metrics used to
//! score an edit: efficacy, generalization and specificity.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::math;
use crate::model::{last_logits_many, FactCorpus, TransformerModel};
use crate::targets::EditRequest;

/// A prompt with the answer an edit should produce and the answer the model
/// gave before editing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    /// Index of the request this probe belongs to.
    pub case: usize,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub original: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProbeSet {
    pub rewrite: Vec<Probe>,
    pub paraphrase: Vec<Probe>,
    /// Prompts whose behaviour should not change. `case` ties each one to
    /// the request it was drawn for.
    pub neighborhood: Vec<(usize, Vec<usize>)>,
}

impl EvalProbeSet {
    pub fn validate(&self) -> Result<()> {
        let n = self.rewrite.len();
        if n == 0 {
            bail!(Input, "probe set has no rewrite prompts");
        }
        for (i, p) in self.rewrite.iter().enumerate() {
            if p.case != i {
                bail!(Input, "rewrite probe {} carries case {}", i, p.case);
            }
        }
        let mut para = alloc::vec![0usize; n];
        let mut neigh = alloc::vec![0usize; n];
        for p in &self.paraphrase {
            *para.get_mut(p.case).ok_or_else(|| case_err(p.case))? += 1;
        }
        for (c, _) in &self.neighborhood {
            *neigh.get_mut(*c).ok_or_else(|| case_err(*c))? += 1;
        }
        if let Some(i) = (0..n).find(|&i| para[i] == 0 || neigh[i] == 0) {
            bail!(Input, "request {} lacks a paraphrase or neighborhood probe", i);
        }
        Ok(())
    }
}

fn case_err(c: usize) -> crate::Error {
    crate::Error::Input(alloc::format!("probe refers to unknown request {}", c))
}

/// Requests to apply, the prompts to score them on and the pool that
/// preservation keys are sampled from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditBatch {
    pub requests: Vec<EditRequest>,
    pub probes: EvalProbeSet,
    /// `(prompt, decisive index)` pairs from subjects that are never edited.
    pub preservation_pool: Vec<(Vec<usize>, usize)>,
    /// Corpus subjects touched by the batch.
    pub edited_subjects: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchParams {
    pub n_edits: usize,
    /// Minimum neighborhood prompts per request.
    pub min_neighbors: usize,
    pub seed: u64,
}

impl Default for BatchParams {
    fn default() -> Self {
        BatchParams {
            n_edits: 100,
            min_neighbors: 3,
            seed: 0,
        }
    }
}

/// Draws `n_edits` facts to rewrite.
///
/// Subjects are shuffled and split: the first half may be edited, the third
/// quarter feeds the preservation pool and the last quarter supplies
/// neighborhood probes, so the three roles never share a subject. Each
/// request asks for a different object of the same relation than the one
/// the model currently predicts.
pub fn build_edit_batch(model: &TransformerModel, corpus: &FactCorpus, params: &BatchParams) -> Result<EditBatch> {
    let ns = corpus.params.n_subjects;
    let nr = corpus.params.n_relations;
    if ns < 4 {
        bail!(Input, "need at least 4 subjects to split roles, corpus has {}", ns);
    }
    if params.n_edits == 0 {
        bail!(Input, "n_edits must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut subjects: Vec<usize> = (0..ns).collect();
    subjects.shuffle(&mut rng);
    let (editable, rest) = subjects.split_at(ns / 2);
    let (keep, neighbors) = rest.split_at(rest.len() / 2);
    let max = editable.len() * nr;
    if params.n_edits > max {
        bail!(Input, "asked for {} edits but only {} facts are editable", params.n_edits, max);
    }
    let neighbor_set: BTreeSet<usize> = neighbors.iter().copied().collect();

    let mut facts: Vec<(usize, usize)> = editable
        .iter()
        .flat_map(|&s| (0..nr).map(move |r| (s, r)))
        .collect();
    facts.shuffle(&mut rng);
    facts.truncate(params.n_edits);

    let mut prompts = Vec::new();
    for &(s, r) in &facts {
        let rec = corpus.record(s, r);
        prompts.push(rec.prompt.clone());
        prompts.extend(rec.paraphrases.iter().cloned());
    }
    let greedy = next_tokens(model, &prompts)?;
    let mut greedy = greedy.into_iter();

    let mut requests = Vec::with_capacity(facts.len());
    let mut probes = EvalProbeSet {
        rewrite: Vec::new(),
        paraphrase: Vec::new(),
        neighborhood: Vec::new(),
    };
    for (case, &(s, r)) in facts.iter().enumerate() {
        let rec = corpus.record(s, r);
        let original = alloc::vec![greedy.next().expect("one per prompt")];
        let choices: Vec<usize> = corpus.objects[r]
            .iter()
            .copied()
            .filter(|o| *o != rec.answer[0] && *o != original[0])
            .collect();
        if choices.is_empty() {
            bail!(Input, "relation {} has no alternative object to edit toward", r);
        }
        let target = alloc::vec![choices[rng.random_range(0..choices.len())]];
        let req = EditRequest {
            prompt: rec.prompt.clone(),
            decisive_index: rec.decisive_index,
            target: target.clone(),
            original: original.clone(),
        };
        req.validate()?;
        probes.rewrite.push(Probe {
            case,
            prompt: rec.prompt.clone(),
            target: target.clone(),
            original,
        });
        for p in &rec.paraphrases {
            probes.paraphrase.push(Probe {
                case,
                prompt: p.clone(),
                target: target.clone(),
                original: alloc::vec![greedy.next().expect("one per prompt")],
            });
        }
        let mut neigh: Vec<Vec<usize>> = rec
            .neighborhood
            .iter()
            .filter(|p| subject_of(corpus, p).is_some_and(|x| neighbor_set.contains(&x)))
            .cloned()
            .collect();
        let mut pool: Vec<usize> = neighbors.to_vec();
        pool.shuffle(&mut rng);
        for &x in &pool {
            if neigh.len() >= params.min_neighbors {
                break;
            }
            let p = corpus.record(x, r).prompt.clone();
            if !neigh.contains(&p) {
                neigh.push(p);
            }
        }
        probes.neighborhood.extend(neigh.into_iter().map(|p| (case, p)));
        requests.push(req);
    }
    probes.validate()?;

    let mut preservation_pool = Vec::new();
    for &s in keep {
        for r in 0..nr {
            let rec = corpus.record(s, r);
            preservation_pool.push((rec.prompt.clone(), rec.decisive_index));
            for p in &rec.paraphrases {
                preservation_pool.push((p.clone(), p.len() - 1));
            }
        }
    }
    let mut edited_subjects: Vec<usize> = facts.iter().map(|f| f.0).collect();
    edited_subjects.sort_unstable();
    edited_subjects.dedup();
    Ok(EditBatch {
        requests,
        probes,
        preservation_pool,
        edited_subjects,
    })
}

/// Subject whose pieces end `prompt`, if any.
fn subject_of(corpus: &FactCorpus, prompt: &[usize]) -> Option<usize> {
    corpus.subjects.iter().position(|s| prompt.ends_with(s))
}

fn next_tokens(model: &TransformerModel, prompts: &[Vec<usize>]) -> Result<Vec<usize>> {
    Ok(last_logits_many(model, prompts)?.iter().map(|l| math::argmax(l)).collect())
}

fn check_answer(a: &[usize], what: &str) -> Result<()> {
    if a.is_empty() {
        bail!(Input, "{} answer is empty", what);
    }
    Ok(())
}

/// Length-normalized teacher-forced log-probability of `answer` after `prompt`.
pub fn mean_answer_logprob(model: &TransformerModel, prompt: &[usize], answer: &[usize]) -> Result<f64> {
    check_answer(answer, "scored")?;
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(answer);
    let out = model.forward(&seq, None)?;
    let p = prompt.len();
    Ok(-math::mean_nll(
        answer.iter().enumerate().map(|(i, &t)| (out.logits.row(p - 1 + i), t)),
    ))
}

/// 1 when the target is strictly more likely per token than the original.
pub fn success_metric(model: &TransformerModel, prompt: &[usize], target: &[usize], original: &[usize]) -> Result<bool> {
    check_answer(target, "target")?;
    check_answer(original, "original")?;
    Ok(mean_answer_logprob(model, prompt, target)? > mean_answer_logprob(model, prompt, original)?)
}

/// 1 when greedy decoding for `target.len()` steps reproduces `target`.
pub fn accuracy_metric(model: &TransformerModel, prompt: &[usize], target: &[usize]) -> Result<bool> {
    check_answer(target, "target")?;
    Ok(model.greedy(prompt, target.len())? == target)
}

/// `KL(p ‖ q)` between the softmaxes of two logit rows.
pub fn kl_from_logits(pre: &[f64], post: &[f64]) -> f64 {
    let lp = math::log_softmax(pre);
    let lq = math::log_softmax(post);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(a, b)| if *a == f64::NEG_INFINITY { 0.0 } else { math::exp(*a) * (a - b) })
        .sum();
    kl.max(0.0)
}

fn overlap(pre: &[f64], post: &[f64], k: usize) -> f64 {
    let a = math::top_k(pre, k);
    let b = math::top_k(post, k);
    a.iter().filter(|t| b.contains(t)).count() as f64 / k as f64
}

fn check_probes(prompts: &[Vec<usize>]) -> Result<()> {
    if prompts.is_empty() {
        bail!(Input, "probe set is empty");
    }
    Ok(())
}

/// Mean `KL(pre ‖ post)` of the next-token distribution over `prompts`.
pub fn specificity_kl(pre: &TransformerModel, post: &TransformerModel, prompts: &[Vec<usize>]) -> Result<f64> {
    check_probes(prompts)?;
    let a = last_logits_many(pre, prompts)?;
    let b = last_logits_many(post, prompts)?;
    Ok(a.iter().zip(&b).map(|(x, y)| kl_from_logits(x, y)).sum::<f64>() / prompts.len() as f64)
}

/// Mean share of the pre-edit top-`k` next tokens that survive the edit.
pub fn topk_overlap(pre: &TransformerModel, post: &TransformerModel, prompts: &[Vec<usize>], k: usize) -> Result<f64> {
    check_probes(prompts)?;
    if k == 0 || k > pre.config().vocab_size {
        bail!(Input, "k = {} outside 1..={}", k, pre.config().vocab_size);
    }
    let a = last_logits_many(pre, prompts)?;
    let b = last_logits_many(post, prompts)?;
    Ok(a.iter().zip(&b).map(|(x, y)| overlap(x, y, k)).sum::<f64>() / prompts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePair {
    pub success: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Specificity {
    pub kl: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub case: usize,
    pub kind: String,
    pub success: bool,
    pub accuracy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub efficacy: RatePair,
    pub generalization: RatePair,
    pub specificity: Specificity,
    pub per_prompt: Vec<PromptResult>,
}

fn score(model: &TransformerModel, probes: &[Probe], kind: &str) -> Result<(RatePair, Vec<PromptResult>)> {
    let single = probes.iter().all(|p| p.target.len() == 1 && p.original.len() == 1);
    let results: Vec<(bool, bool)> = if single {
        let prompts: Vec<Vec<usize>> = probes.iter().map(|p| p.prompt.clone()).collect();
        last_logits_many(model, &prompts)?
            .iter()
            .zip(probes)
            .map(|(l, p)| {
                let lp = math::log_softmax(l);
                (lp[p.target[0]] > lp[p.original[0]], math::argmax(l) == p.target[0])
            })
            .collect()
    } else {
        probes
            .iter()
            .map(|p| {
                Ok((
                    success_metric(model, &p.prompt, &p.target, &p.original)?,
                    accuracy_metric(model, &p.prompt, &p.target)?,
                ))
            })
            .collect::<Result<_>>()?
    };
    let n = probes.len().max(1) as f64;
    let rates = RatePair {
        success: results.iter().filter(|r| r.0).count() as f64 / n,
        accuracy: results.iter().filter(|r| r.1).count() as f64 / n,
    };
    let per = probes
        .iter()
        .zip(&results)
        .map(|(p, r)| PromptResult {
            case: p.case,
            kind: kind.into(),
            success: r.0,
            accuracy: r.1,
        })
        .collect();
    Ok((rates, per))
}

/// Scores `post` against `pre` on every probe of `probes`.
pub fn evaluate_run(pre: &TransformerModel, post: &TransformerModel, probes: &EvalProbeSet, method: &str, seed: u64) -> Result<EvalReport> {
    probes.validate()?;
    if pre.config() != post.config() {
        bail!(Input, "models being compared have different configurations");
    }
    let (efficacy, mut per_prompt) = score(post, &probes.rewrite, "rewrite")?;
    let (generalization, per) = score(post, &probes.paraphrase, "paraphrase")?;
    per_prompt.extend(per);
    let neigh: Vec<Vec<usize>> = probes.neighborhood.iter().map(|(_, p)| p.clone()).collect();
    let a = last_logits_many(pre, &neigh)?;
    let b = last_logits_many(post, &neigh)?;
    let n = neigh.len() as f64;
    let mean = |f: &dyn Fn(&[f64], &[f64]) -> f64| a.iter().zip(&b).map(|(x, y)| f(x, y)).sum::<f64>() / n;
    let specificity = Specificity {
        kl: mean(&|x, y| kl_from_logits(x, y)),
        top1: mean(&|x, y| overlap(x, y, 1)),
        top5: mean(&|x, y| overlap(x, y, 5.min(x.len()))),
        top10: mean(&|x, y| overlap(x, y, 10.min(x.len()))),
    };
    Ok(EvalReport {
        method: method.into(),
        seed,
        efficacy,
        generalization,
        specificity,
        per_prompt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_matches_naive_sum() {
        let a = [0.3, -1.0, 2.0, 0.0];
        let b = [0.1, 0.5, 1.0, -0.2];
        let z = |l: &[f64]| l.iter().map(|x| libm::exp(*x)).sum::<f64>();
        let (za, zb) = (z(&a), z(&b));
        let naive: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                let p = libm::exp(*x) / za;
                let q = libm::exp(*y) / zb;
                p * libm::log(p / q)
            })
            .sum();
        assert!((kl_from_logits(&a, &b) - naive).abs() < 1e-10);
        assert_eq!(kl_from_logits(&a, &a), 0.0);
    }

    #[test]
    fn overlap_ties_prefer_low_ids() {
        assert_eq!(overlap(&[1.0, 1.0, 0.0], &[1.0, 0.5, 1.0], 1), 1.0);
        assert_eq!(overlap(&[1.0, 1.0, 0.0], &[0.0, 1.0, 1.0], 1), 0.0);
        assert_eq!(overlap(&[3.0, 1.0, 2.0], &[0.0, 1.0, 2.0], 3), 1.0);
    }

    #[test]
    fn probe_set_needs_paraphrase_and_neighbor() {
        let p = Probe {
            case: 0,
            prompt: alloc::vec![0, 1],
            target: alloc::vec![2],
            original: alloc::vec![3],
        };
        let mut set = EvalProbeSet {
            rewrite: alloc::vec![p.clone()],
            paraphrase: alloc::vec![p],
            neighborhood: Vec::new(),
        };
        assert!(set.validate().is_err());
        set.neighborhood.push((0, alloc::vec![0, 4]));
        set.validate().unwrap();
        set.neighborhood.push((3, alloc::vec![0, 4]));
        assert!(set.validate().is_err());
    }
}
