use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub const BOS: usize = 0;

/// Knobs of the synthetic fact generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub n_subjects: usize,
    pub n_relations: usize,
    /// Candidate objects per relation; relations do not share objects.
    pub n_objects: usize,
    /// Trained prompt templates per relation. The first is the canonical
    /// prompt, the rest are paraphrases.
    pub n_templates: usize,
    /// Extra templates per relation that are never trained on.
    pub n_heldout_templates: usize,
    /// Name pieces per subject slot; subjects are `subject_len` pieces.
    pub n_name_pieces: usize,
    pub subject_len: usize,
    /// Neighborhood prompts per fact.
    pub n_neighbors: usize,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            n_subjects: 100,
            n_relations: 5,
            n_objects: 20,
            n_templates: 3,
            n_heldout_templates: 1,
            n_name_pieces: 12,
            subject_len: 2,
            n_neighbors: 5,
            seed: 0,
        }
    }
}

/// One (subject, relation, object) fact with its evaluation prompts.
///
/// Every prompt is `[BOS, relation words.., subject pieces..]`, so the
/// decisive token (last subject piece) is also the last prompt token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub prompt: Vec<usize>,
    pub decisive_index: usize,
    pub answer: Vec<usize>,
    pub paraphrases: Vec<Vec<usize>>,
    pub neighborhood: Vec<Vec<usize>>,
    #[serde(default)]
    pub subject: usize,
    #[serde(default)]
    pub relation: usize,
    #[serde(default)]
    pub heldout: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactCorpus {
    pub params: CorpusParams,
    pub vocab: Vec<String>,
    /// Token ids of each subject.
    pub subjects: Vec<Vec<usize>>,
    /// Object token ids available to each relation.
    pub objects: Vec<Vec<usize>>,
    /// Relation word sequences: `templates[r][t]`, trained ones first.
    pub templates: Vec<Vec<Vec<usize>>>,
    /// `records[s * n_relations + r]`.
    pub records: Vec<FactRecord>,
}

impl FactCorpus {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn record(&self, subject: usize, relation: usize) -> &FactRecord {
        &self.records[subject * self.params.n_relations + relation]
    }

    pub fn prompt_for(&self, subject: usize, relation: usize, template: usize) -> Vec<usize> {
        let mut p = vec![BOS];
        p.extend_from_slice(&self.templates[relation][template]);
        p.extend_from_slice(&self.subjects[subject]);
        p
    }

    /// Every trained (prompt, answer token) pair: canonical prompts and
    /// trained paraphrases.
    pub fn training_pairs(&self) -> Vec<(Vec<usize>, usize)> {
        let mut out = Vec::new();
        for r in &self.records {
            out.push((r.prompt.clone(), r.answer[0]));
            for p in &r.paraphrases {
                out.push((p.clone(), r.answer[0]));
            }
        }
        out
    }

    /// Canonical prompts only.
    pub fn canonical_pairs(&self) -> Vec<(Vec<usize>, usize)> {
        self.records
            .iter()
            .map(|r| (r.prompt.clone(), r.answer[0]))
            .collect()
    }

    /// Prompts built from templates that were never trained on.
    pub fn heldout_pairs(&self) -> Vec<(Vec<usize>, usize)> {
        let mut out = Vec::new();
        for r in &self.records {
            for p in &r.heldout {
                out.push((p.clone(), r.answer[0]));
            }
        }
        out
    }

    /// Checks structural invariants of the records against `vocab_size`.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.records.is_empty() {
            bail!(Input, "corpus has no records");
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.decisive_index >= r.prompt.len() {
                bail!(Input, "record {}: decisive index {} outside prompt", i, r.decisive_index);
            }
            if r.answer.is_empty() {
                bail!(Input, "record {}: empty answer", i);
            }
            let all = r
                .prompt
                .iter()
                .chain(&r.answer)
                .chain(r.paraphrases.iter().flatten())
                .chain(r.neighborhood.iter().flatten())
                .chain(r.heldout.iter().flatten());
            if let Some(t) = all.into_iter().find(|&&t| t >= vocab_size) {
                bail!(Input, "record {}: token {} >= vocab size {}", i, t, vocab_size);
            }
        }
        Ok(())
    }
}

/// Deterministic synthetic corpus for `params`.
pub fn generate_corpus(params: &CorpusParams) -> Result<FactCorpus> {
    let p = params;
    if p.subject_len == 0 || p.n_name_pieces == 0 {
        bail!(Input, "subjects need at least one name piece");
    }
    let capacity = (p.n_name_pieces as u128).checked_pow(p.subject_len as u32);
    if capacity.is_some_and(|c| c < p.n_subjects as u128) {
        bail!(
            Input,
            "{} name pieces over {} slots cannot form {} distinct subjects",
            p.n_name_pieces,
            p.subject_len,
            p.n_subjects
        );
    }
    if p.n_subjects < 2 {
        bail!(Input, "need at least two subjects for neighborhood prompts");
    }
    if p.n_relations == 0 || p.n_objects < 2 {
        bail!(Input, "need at least one relation and two objects per relation");
    }
    if p.n_templates < 2 {
        bail!(Input, "need at least two trained templates for paraphrases");
    }
    if p.n_neighbors == 0 || p.n_neighbors >= p.n_subjects {
        bail!(Input, "n_neighbors must be in 1..n_subjects");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut vocab: Vec<String> = vec![String::from("<bos>")];
    let mut piece_ids = Vec::with_capacity(p.subject_len);
    for slot in 0..p.subject_len {
        let ids: Vec<usize> = (0..p.n_name_pieces)
            .map(|i| {
                vocab.push(format!("name{slot}_{i}"));
                vocab.len() - 1
            })
            .collect();
        piece_ids.push(ids);
    }
    let mut objects = Vec::with_capacity(p.n_relations);
    for r in 0..p.n_relations {
        let ids: Vec<usize> = (0..p.n_objects)
            .map(|j| {
                vocab.push(format!("obj{r}_{j}"));
                vocab.len() - 1
            })
            .collect();
        objects.push(ids);
    }
    let n_tmpl = p.n_templates + p.n_heldout_templates;
    let mut templates = Vec::with_capacity(p.n_relations);
    for r in 0..p.n_relations {
        let mut ts = Vec::with_capacity(n_tmpl);
        for t in 0..n_tmpl {
            let len = 1 + (t % 2);
            let words: Vec<usize> = (0..len)
                .map(|w| {
                    vocab.push(format!("rel{r}_t{t}_w{w}"));
                    vocab.len() - 1
                })
                .collect();
            ts.push(words);
        }
        templates.push(ts);
    }

    // Distinct subjects drawn from the piece grid.
    let mut subjects: Vec<Vec<usize>> = Vec::with_capacity(p.n_subjects);
    while subjects.len() < p.n_subjects {
        let s: Vec<usize> = (0..p.subject_len)
            .map(|slot| piece_ids[slot][rng.random_range(0..p.n_name_pieces)])
            .collect();
        if !subjects.contains(&s) {
            subjects.push(s);
        }
    }

    let mut corpus = FactCorpus {
        params: p.clone(),
        vocab,
        subjects,
        objects,
        templates,
        records: Vec::with_capacity(p.n_subjects * p.n_relations),
    };
    for s in 0..p.n_subjects {
        for r in 0..p.n_relations {
            let obj = corpus.objects[r][rng.random_range(0..p.n_objects)];
            let prompt = corpus.prompt_for(s, r, 0);
            let paraphrases = (1..p.n_templates).map(|t| corpus.prompt_for(s, r, t)).collect();
            let heldout = (p.n_templates..n_tmpl).map(|t| corpus.prompt_for(s, r, t)).collect();
            let mut others: Vec<usize> = (0..p.n_subjects).filter(|&o| o != s).collect();
            others.shuffle(&mut rng);
            let neighborhood = others[..p.n_neighbors]
                .iter()
                .map(|&o| corpus.prompt_for(o, r, 0))
                .collect();
            corpus.records.push(FactRecord {
                decisive_index: prompt.len() - 1,
                prompt,
                answer: vec![obj],
                paraphrases,
                neighborhood,
                subject: s,
                relation: r,
                heldout,
            });
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusParams {
        CorpusParams {
            n_subjects: 12,
            n_relations: 3,
            n_objects: 4,
            n_name_pieces: 4,
            n_neighbors: 3,
            ..CorpusParams::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_corpus(&small()).unwrap(), generate_corpus(&small()).unwrap());
    }

    #[test]
    fn decisive_index_is_last_subject_token() {
        let c = generate_corpus(&small()).unwrap();
        for r in &c.records {
            assert_eq!(r.decisive_index, r.prompt.len() - 1);
            assert_eq!(r.prompt[r.decisive_index], *c.subjects[r.subject].last().unwrap());
        }
        c.validate(c.vocab_size()).unwrap();
    }

    #[test]
    fn neighborhood_never_contains_the_subject() {
        let c = generate_corpus(&small()).unwrap();
        for r in &c.records {
            assert!(!r.paraphrases.is_empty() && !r.neighborhood.is_empty());
            let subj = &c.subjects[r.subject];
            for n in &r.neighborhood {
                assert_ne!(&n[n.len() - subj.len()..], subj.as_slice());
            }
        }
    }

    #[test]
    fn inconsistent_parameters_are_rejected() {
        let mut p = small();
        p.n_subjects = 17;
        assert!(generate_corpus(&p).is_err());
        let mut p = small();
        p.n_templates = 1;
        assert!(generate_corpus(&p).is_err());
    }
}
