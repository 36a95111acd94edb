//! The experiment commands. Each one reads its inputs, computes everything
//! in memory and then commits all outputs plus a manifest at once.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fwdedit_core::diagnostics::{
    assemble_jacobian, cosine_table, definiteness_report, sample_directions, DefinitenessReport, JacobianBlock,
};
use fwdedit_core::editor::{run_edit, EditRunRecord};
use fwdedit_core::evaluation::{build_edit_batch, evaluate_run, EditBatch, EvalReport};
use fwdedit_core::model::{generate_corpus, train_toy, TrainReport, TransformerModel};
use fwdedit_core::targets::{Method, TargetPlan};
use fwdedit_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{encode, load_checkpoint};
use crate::config::RunConfig;
use crate::corpus_io::{load_corpus, stage_corpus};
use crate::error::{FwdError, Result};
use crate::output::{read_json, ExperimentManifest, Staging};

pub const CHECKPOINT: &str = "model.ckpt";
pub const POST_CHECKPOINT: &str = "post.ckpt";
pub const BATCH: &str = "batch.json";
pub const PLANS: &str = "plans.json";
pub const RECORD: &str = "record.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const EVAL_ROW: &str = "eval_row.csv";

/// Progress messages on stderr unless quiet.
#[derive(Debug, Clone, Copy)]
pub struct Log {
    pub quiet: bool,
}

impl Log {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn checkpoint_bytes(model: &TransformerModel) -> Result<Vec<u8>> {
    encode(model).map_err(|m| FwdError::format(CHECKPOINT, m))
}

pub fn gen_data(cfg: &RunConfig, out: &Path, log: Log) -> Result<ExperimentManifest> {
    let corpus = generate_corpus(&cfg.corpus)?;
    log.say(format!(
        "corpus: {} facts, vocabulary {}",
        corpus.records.len(),
        corpus.vocab_size()
    ));
    let mut st = Staging::new(out, &cfg.hash());
    stage_corpus(&mut st, &corpus)?;
    st.commit("gen-data", vec![])
}

pub fn train(cfg: &RunConfig, corpus_dir: &Path, out: &Path, log: Log) -> Result<ExperimentManifest> {
    let corpus = load_corpus(corpus_dir)?;
    let mconf = cfg.model.model_config(corpus.vocab_size());
    let t = Instant::now();
    let (model, report) = train_toy(&corpus, &mconf, &cfg.train, |s| {
        if let Some(a) = s.accuracy {
            log.say(format!(
                "epoch {:>3}  loss {:.4}  accuracy {:.4}  ({:.0}s)",
                s.epoch,
                s.mean_loss,
                a,
                t.elapsed().as_secs_f64()
            ));
        }
    })?;
    log.say(format!(
        "trained: accuracy {:.4}, held-out templates {:.4}",
        report.train_accuracy, report.heldout_accuracy
    ));
    let mut st = Staging::new(out, &cfg.hash());
    st.bytes("checkpoint", CHECKPOINT, checkpoint_bytes(&model)?);
    st.json("train_report", "train_report.json", "train_report", &report)?;
    st.commit("train", vec![display(corpus_dir)])
}

/// Output of one edit run, before it is written anywhere.
pub struct EditOutcome {
    pub post: TransformerModel,
    pub batch: EditBatch,
    pub record: EditRunRecord,
}

/// Draws the configured batch from `corpus` and edits a copy of `model`.
/// The edited weights are rounded to 32-bit floats, which is what a
/// checkpoint stores; the record's post checksum refers to the rounded model.
pub fn edit_model(cfg: &RunConfig, model: &TransformerModel, corpus: &fwdedit_core::model::FactCorpus, method: Method) -> Result<EditOutcome> {
    let batch = build_edit_batch(model, corpus, &cfg.batch_params())?;
    let mut post = model.clone();
    let mut record = run_edit(&mut post, &batch.requests, &batch.preservation_pool, &cfg.edit_config(method))?;
    post.round_to_f32();
    record.post_checksum = post.checksum();
    Ok(EditOutcome { post, batch, record })
}

pub fn edit(cfg: &RunConfig, checkpoint: &Path, corpus_dir: &Path, method: Method, out: &Path, log: Log) -> Result<ExperimentManifest> {
    let model = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(corpus_dir)?;
    let t = Instant::now();
    let o = edit_model(cfg, &model, &corpus, method)?;
    let means: Vec<String> = o.record.residuals.means().iter().map(|m| format!("{m:.3}")).collect();
    log.say(format!(
        "{}: {} requests, layers {:?}, residual ratios [{}] ({:.1}s)",
        method,
        o.batch.requests.len(),
        o.record.layers,
        means.join(", "),
        t.elapsed().as_secs_f64()
    ));
    let plans: &[TargetPlan] = &o.record.plans;
    let mut st = Staging::new(out, &cfg.hash());
    st.bytes("post_checkpoint", POST_CHECKPOINT, checkpoint_bytes(&o.post)?);
    st.json("batch", BATCH, "batch", &o.batch)?;
    st.json("plans", PLANS, "plans", &plans)?;
    st.json("record", RECORD, "record", &o.record)?;
    st.commit("edit", vec![display(checkpoint), display(corpus_dir)])
}

pub fn eval_row(r: &EvalReport) -> Vec<String> {
    vec![
        r.method.clone(),
        r.seed.to_string(),
        r.efficacy.success.to_string(),
        r.efficacy.accuracy.to_string(),
        r.generalization.success.to_string(),
        r.generalization.accuracy.to_string(),
        r.specificity.kl.to_string(),
        r.specificity.top1.to_string(),
        r.specificity.top5.to_string(),
        r.specificity.top10.to_string(),
    ]
}

pub const EVAL_HEADER: [&str; 10] = [
    "method",
    "seed",
    "efficacy_success",
    "efficacy_accuracy",
    "generalization_success",
    "generalization_accuracy",
    "kl",
    "top1",
    "top5",
    "top10",
];

pub fn eval(cfg: &RunConfig, pre: &Path, post: &Path, batch: &Path, method: &str, out: &Path, log: Log) -> Result<ExperimentManifest> {
    let pre_model = load_checkpoint(pre)?;
    let post_model = load_checkpoint(post)?;
    let batch: EditBatch = read_json(batch, "batch")?;
    let report = evaluate_run(&pre_model, &post_model, &batch.probes, method, cfg.edit.seed)?;
    log.say(format!(
        "{}: efficacy {:.3}/{:.3}  generalization {:.3}/{:.3}  KL {:.4}  top-1 {:.3}",
        method,
        report.efficacy.success,
        report.efficacy.accuracy,
        report.generalization.success,
        report.generalization.accuracy,
        report.specificity.kl,
        report.specificity.top1
    ));
    let mut st = Staging::new(out, &cfg.hash());
    st.json("eval_report", EVAL_REPORT, "eval_report", &report)?;
    st.csv("eval_row", EVAL_ROW, &EVAL_HEADER, &[eval_row(&report)])?;
    st.commit("eval", vec![display(pre), display(post)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianSummary {
    pub request: usize,
    pub source: usize,
    pub sink: usize,
    pub j_norm: f64,
    pub s_norm: f64,
    pub a_norm: f64,
    pub min_eig: f64,
    pub definiteness: DefinitenessReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub j: Option<Tensor>,
}

pub fn jacobian_summaries(cfg: &RunConfig, model: &TransformerModel, batch: &EditBatch) -> Result<Vec<JacobianSummary>> {
    let c = model.config();
    let last = c.last_decisive();
    let dirs = sample_directions(c.d_model, cfg.diagnose.directions, cfg.diagnose.seed);
    let mut out = Vec::new();
    for (i, req) in batch.requests.iter().take(cfg.diagnose.jacobian_requests).enumerate() {
        for &l in &c.decisive_layers {
            let block: JacobianBlock = assemble_jacobian(model, &req.prompt, req.decisive_index, l, last)?;
            let definiteness = definiteness_report(&block, &dirs)?;
            out.push(JacobianSummary {
                request: i,
                source: l,
                sink: last,
                j_norm: block.j.norm(),
                s_norm: block.s.norm(),
                a_norm: block.a.norm(),
                min_eig: block.min_eig,
                definiteness,
                j: cfg.diagnose.include_matrices.then(|| block.j.clone()),
            });
        }
    }
    Ok(out)
}

pub fn diagnose(cfg: &RunConfig, checkpoint: &Path, record: &Path, batch: &Path, out: &Path, log: Log) -> Result<ExperimentManifest> {
    let model = load_checkpoint(checkpoint)?;
    let record: EditRunRecord = read_json(record, "record")?;
    let batch_data: EditBatch = read_json(batch, "batch")?;
    if record.pre_checksum != model.checksum() {
        return Err(FwdError::Config(format!(
            "record was produced from model {}, checkpoint is {}",
            record.pre_checksum,
            model.checksum()
        )));
    }
    let mut st = Staging::new(out, &cfg.hash());

    let rows: Vec<Vec<String>> = record
        .residuals
        .layers
        .iter()
        .enumerate()
        .map(|(s, l)| {
            vec![
                record.method.to_string(),
                s.to_string(),
                l.map(|l| l.to_string()).unwrap_or_default(),
                record.residuals.mean(s).to_string(),
                record.residuals.ratios[s].len().to_string(),
            ]
        })
        .collect();
    st.csv("residual_ratios", "residual_ratios.csv", &["method", "step", "layer", "mean_ratio", "n"], &rows)?;

    if matches!(record.method, Method::MemitDividing | Method::MemitNoDividing) {
        let table = cosine_table(&model, &batch_data.requests, &record)?;
        log.say(format!("cosine by layer: {:?}", table.mean_cosine));
        let rows: Vec<Vec<String>> = table
            .layers
            .iter()
            .zip(&table.mean_cosine)
            .map(|(l, c)| vec![l.to_string(), c.to_string(), table.n.to_string()])
            .collect();
        st.csv("cosine_table", "cosine_table.csv", &["layer", "mean_cosine", "n"], &rows)?;
    } else {
        log.say(format!("no cosine table for {} (it needs a spreading run)", record.method));
    }

    let summaries = jacobian_summaries(cfg, &model, &batch_data)?;
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![
                s.request.to_string(),
                s.source.to_string(),
                s.sink.to_string(),
                s.definiteness.fraction_positive.to_string(),
                s.definiteness.fraction_aligned.to_string(),
                s.min_eig.to_string(),
                s.definiteness.violations.to_string(),
            ]
        })
        .collect();
    st.csv(
        "definiteness",
        "definiteness.csv",
        &["request", "l", "L", "fraction_positive", "fraction_aligned", "min_eig", "violations"],
        &rows,
    )?;
    st.json("jacobians", "jacobians.json", "jacobians", &summaries)?;
    st.commit("diagnose", vec![display(checkpoint)])
}

/// Comparison table over the eval runs listed in `manifests`.
pub fn report(manifests: &[PathBuf], out: &Path, log: Log) -> Result<ExperimentManifest> {
    if manifests.is_empty() {
        return Err(FwdError::Config("report needs at least one manifest".into()));
    }
    let mut reports = Vec::new();
    let mut hashes = Vec::new();
    for m in manifests {
        let manifest = ExperimentManifest::load(m)?;
        let art = manifest
            .artifact("eval_report")
            .ok_or_else(|| FwdError::Config(format!("{} is not an eval manifest", m.display())))?;
        let dir = m.parent().unwrap_or(Path::new("."));
        reports.push(read_json::<EvalReport>(&dir.join(&art.path), "eval_report")?);
        hashes.push(manifest.config_hash);
    }
    hashes.sort();
    hashes.dedup();
    let combined = crate::output::sha256_hex(hashes.join(",").as_bytes());
    let rows: Vec<Vec<String>> = reports.iter().map(eval_row).collect();
    let text = render_table(&reports);
    log.say(&text);
    let mut st = Staging::new(out, &combined);
    st.csv("report_csv", "report.csv", &EVAL_HEADER, &rows)?;
    st.bytes("report_txt", "report.txt", format!("config_hash={combined}\n{text}").into_bytes());
    st.commit("report", manifests.iter().map(|p| display(p)).collect())
}

pub fn render_table(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>5} | {:>8} {:>8} | {:>8} {:>8} | {:>8} {:>6} {:>6} {:>6}",
        "method", "seed", "Success", "Accuracy", "Success", "Accuracy", "D_KL", "Top-1", "Top-5", "Top-10"
    );
    let _ = writeln!(s, "{:<18} | {:^17} | {:^17} | {:^29}", "", "Efficacy", "Generalization", "Specificity");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<12} {:>5} | {:>8.2} {:>8.2} | {:>8.2} {:>8.2} | {:>8.4} {:>6.2} {:>6.2} {:>6.2}",
            r.method,
            r.seed,
            100.0 * r.efficacy.success,
            100.0 * r.efficacy.accuracy,
            100.0 * r.generalization.success,
            100.0 * r.generalization.accuracy,
            r.specificity.kl,
            100.0 * r.specificity.top1,
            100.0 * r.specificity.top5,
            100.0 * r.specificity.top10
        );
    }
    s
}

/// Loads the training report written next to a checkpoint, if any.
pub fn train_report(dir: &Path) -> Result<TrainReport> {
    read_json(&dir.join("train_report.json"), "train_report")
}
