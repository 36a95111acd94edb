use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fwdedit::output::ExperimentManifest;

const TINY: &str = r#"
[corpus]
n_subjects = 24
n_relations = 3
n_objects = 8
n_templates = 2
n_heldout_templates = 1
n_name_pieces = 6
subject_len = 2
n_neighbors = 3
seed = 11

[model]
d_model = 32
n_layers = 4
n_heads = 2
d_mlp = 64
max_seq_len = 8
decisive_layers = [1, 2, 3]
seed = 5

[train]
target_accuracy = 0.97
eval_every = 2

[edit]
method = "fe"
preservation_size = 30
n_edits = 8
min_neighbors = 2

[diagnose]
directions = 50
jacobian_requests = 2
"#;

fn fwdedit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fwdedit"))
        .args(args)
        .current_dir(cwd)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env("FWDEDIT_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) {
    let out = fwdedit(args, cwd);
    assert!(
        out.status.success(),
        "fwdedit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Runs the whole pipeline in `root` and returns the directories created.
fn pipeline(root: &Path) -> Vec<PathBuf> {
    fs::write(root.join("tiny.toml"), TINY).unwrap();
    let c = ["--quiet", "--config", "tiny.toml"];
    let run = |rest: &[&str]| {
        let mut args: Vec<&str> = c.to_vec();
        args.extend_from_slice(rest);
        ok(&args, root);
    };
    run(&["gen-data", "--out", "data"]);
    run(&["train", "--corpus", "data", "--out", "model"]);
    for m in ["fe", "memit-div"] {
        let (e, v) = (format!("edit-{m}"), format!("eval-{m}"));
        run(&["edit", "--checkpoint", "model/model.ckpt", "--corpus", "data", "--method", m, "--out", &e]);
        run(&[
            "eval", "--pre", "model/model.ckpt", "--post", &format!("{e}/post.ckpt"),
            "--batch", &format!("{e}/batch.json"), "--method", m, "--out", &v,
        ]);
    }
    run(&[
        "diagnose", "--checkpoint", "model/model.ckpt", "--record", "edit-memit-div/record.json",
        "--batch", "edit-memit-div/batch.json", "--out", "diag",
    ]);
    run(&["report", "eval-fe/manifest.json", "eval-memit-div/manifest.json", "--out", "report"]);
    ["data", "model", "edit-fe", "eval-fe", "edit-memit-div", "eval-memit-div", "diag", "report"]
        .iter()
        .map(|d| root.join(d))
        .collect()
}

#[test]
fn pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = pipeline(a.path());
    let db = pipeline(b.path());
    for (x, y) in da.iter().zip(&db) {
        let m = ExperimentManifest::load(&x.join("manifest.json")).unwrap();
        assert!(!m.artifacts.is_empty());
        assert_eq!(m.created_unix, 1_700_000_000);
        let mut names: Vec<_> = fs::read_dir(x).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), m.artifacts.len() + 1, "{}", x.display());
        for n in names {
            let (p, q) = (x.join(&n), y.join(&n));
            assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap(), "{} differs", p.display());
            assert!(!n.to_string_lossy().ends_with(".partial"));
        }
        for art in &m.artifacts {
            let bytes = fs::read(x.join(&art.path)).unwrap();
            assert_eq!(fwdedit::output::sha256_hex(&bytes), art.sha256);
        }
    }
    let csv = fs::read_to_string(a.path().join("diag/residual_ratios.csv")).unwrap();
    assert!(csv.starts_with("# config_hash="));
    assert!(!csv.contains('\r'));
    let report = fs::read_to_string(a.path().join("report/report.txt")).unwrap();
    assert!(report.contains("fe") && report.contains("memit-div"));
    assert!(a.path().join("diag/cosine_table.csv").exists());
}

#[test]
fn seed_flag_changes_the_config_hash() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.toml"), TINY).unwrap();
    ok(&["--quiet", "--config", "tiny.toml", "gen-data", "--out", "a"], d.path());
    ok(&["--quiet", "--config", "tiny.toml", "--seed", "4", "gen-data", "--out", "b"], d.path());
    let ha = ExperimentManifest::load(&d.path().join("a/manifest.json")).unwrap().config_hash;
    let hb = ExperimentManifest::load(&d.path().join("b/manifest.json")).unwrap().config_hash;
    assert_ne!(ha, hb);
    assert_ne!(
        fs::read(d.path().join("a/corpus.jsonl")).unwrap(),
        fs::read(d.path().join("b/corpus.jsonl")).unwrap()
    );
}

#[test]
fn exit_codes_follow_the_error_class() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("tiny.toml"), TINY).unwrap();

    assert_eq!(fwdedit(&["frobnicate"], p).status.code(), Some(1));
    assert_eq!(fwdedit(&["train", "--corpus", "missing", "--out", "m"], p).status.code(), Some(1));

    fs::write(p.join("bad.toml"), "[edit]\nlamda = 2.0\n").unwrap();
    assert_eq!(fwdedit(&["--config", "bad.toml", "gen-data", "--out", "x"], p).status.code(), Some(1));
    assert!(!p.join("x").exists());

    ok(&["--quiet", "--config", "tiny.toml", "gen-data", "--out", "data"], p);

    // Unreachable accuracy within one epoch.
    let hard = TINY.replace("target_accuracy = 0.97", "target_accuracy = 0.999\nmax_epochs = 1");
    fs::write(p.join("hard.toml"), hard).unwrap();
    let out = fwdedit(&["--quiet", "--config", "hard.toml", "train", "--corpus", "data", "--out", "m"], p);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!p.join("m/model.ckpt").exists());
    assert!(!p.join("m/manifest.json").exists());

    fs::write(p.join("data/bogus.ckpt"), b"HTED\x07\0\0\0").unwrap();
    let out = fwdedit(&["edit", "--checkpoint", "data/bogus.ckpt", "--corpus", "data", "--out", "e"], p);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));

    let out = Command::new(env!("CARGO_BIN_EXE_fwdedit"))
        .args(["gen-data", "--out", "y"])
        .current_dir(p)
        .env("FWDEDIT_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_out_dir_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.toml"), TINY).unwrap();
    let out = fwdedit(&["--config", "tiny.toml", "gen-data"], d.path());
    assert_eq!(out.status.code(), Some(1));
    fs::write(d.path().join("with.toml"), format!("out_dir = \"runs\"\n{TINY}")).unwrap();
    ok(&["--quiet", "--config", "with.toml", "gen-data"], d.path());
    assert!(d.path().join("runs/data/manifest.json").exists());
}
