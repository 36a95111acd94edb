//! Corpus files: one JSON record per line, a vocabulary with one token per
//! line, and a small JSON file with the generator's tables.

use std::fs;
use std::path::Path;

use fwdedit_core::model::{CorpusParams, FactCorpus, FactRecord};
use serde::{Deserialize, Serialize};

use crate::error::{FwdError, Result};
use crate::output::{read_json, Staging};

pub const RECORDS: &str = "corpus.jsonl";
pub const VOCAB: &str = "vocab.txt";
pub const TABLES: &str = "corpus_tables.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tables {
    params: CorpusParams,
    subjects: Vec<Vec<usize>>,
    objects: Vec<Vec<usize>>,
    templates: Vec<Vec<Vec<usize>>>,
}

pub fn records_jsonl(records: &[FactRecord]) -> Vec<u8> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn parse_records(text: &str, path: &Path) -> Result<Vec<FactRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| FwdError::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn stage_corpus(staging: &mut Staging, corpus: &FactCorpus) -> Result<()> {
    staging.bytes("records", RECORDS, records_jsonl(&corpus.records));
    let mut vocab = corpus.vocab.join("\n");
    vocab.push('\n');
    staging.bytes("vocab", VOCAB, vocab.into_bytes());
    let tables = Tables {
        params: corpus.params.clone(),
        subjects: corpus.subjects.clone(),
        objects: corpus.objects.clone(),
        templates: corpus.templates.clone(),
    };
    staging.json("tables", TABLES, "tables", &tables)
}

pub fn load_corpus(dir: &Path) -> Result<FactCorpus> {
    let rec_path = dir.join(RECORDS);
    let text = fs::read_to_string(&rec_path).map_err(|e| FwdError::io(&rec_path, e))?;
    let records = parse_records(&text, &rec_path)?;
    let vocab_path = dir.join(VOCAB);
    let vocab: Vec<String> = fs::read_to_string(&vocab_path)
        .map_err(|e| FwdError::io(&vocab_path, e))?
        .lines()
        .map(str::to_string)
        .collect();
    let tables: Tables = read_json(&dir.join(TABLES), "tables")?;
    let corpus = FactCorpus {
        params: tables.params,
        vocab,
        subjects: tables.subjects,
        objects: tables.objects,
        templates: tables.templates,
        records,
    };
    let expected = corpus.params.n_subjects * corpus.params.n_relations;
    if corpus.records.len() != expected {
        return Err(FwdError::format(
            &rec_path,
            format!("{} records, tables describe {}", corpus.records.len(), expected),
        ));
    }
    corpus.validate(corpus.vocab_size())?;
    Ok(corpus)
}
