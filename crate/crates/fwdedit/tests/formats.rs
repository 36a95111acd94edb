use std::fs;
use std::path::Path;

use fwdedit::checkpoint::{decode, encode, load_checkpoint, save_checkpoint, MAGIC};
use fwdedit::corpus_io::{load_corpus, stage_corpus};
use fwdedit::output::{csv_bytes, read_json, Staging};
use fwdedit::{FwdError, RunConfig};
use fwdedit_core::model::{generate_corpus, CorpusParams, ModelConfig, TransformerModel};

fn small_model() -> TransformerModel {
    let mut m = TransformerModel::init(ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_layers: 3,
        n_heads: 2,
        d_mlp: 16,
        max_seq_len: 6,
        decisive_layers: vec![1, 2],
        seed: 3,
    })
    .unwrap();
    m.round_to_f32();
    m
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = small_model();
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), model.config());
    for ((n1, t1), (n2, t2)) in model.named_tensors().into_iter().zip(back.named_tensors()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert_eq!(back.checksum(), model.checksum());
    assert_eq!(fs::read(&path).unwrap(), encode(&back).unwrap());
    assert!(!dir.path().join("m.ckpt.partial").exists());
}

#[test]
fn checkpoint_header_is_as_documented() {
    let bytes = encode(&small_model()).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cfg: serde_json::Value = serde_json::from_slice(&bytes[12..12 + n]).unwrap();
    assert_eq!(cfg["d_model"], 8);
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let p = Path::new("x.ckpt");
    let good = encode(&small_model()).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad, p), Err(FwdError::Format { .. })));

    let mut v2 = good.clone();
    v2[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(decode(&v2, p), Err(FwdError::UnsupportedVersion { found: 2, .. })));

    for cut in [3, 10, good.len() / 2, good.len() - 1] {
        assert!(matches!(decode(&good[..cut], p), Err(FwdError::Format { .. })), "cut {cut}");
    }
    let mut long = good.clone();
    long.push(0);
    assert!(matches!(decode(&long, p), Err(FwdError::Format { .. })));
}

#[test]
fn weights_that_need_f64_are_refused() {
    let mut model = small_model();
    model.w_down_mut(1).data_mut()[0] = 0.1;
    assert!(encode(&model).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    assert!(save_checkpoint(&model, &path).is_err());
    assert!(!path.exists());
}

#[test]
fn shipped_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let mut cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.out_dir.take().unwrap(), Path::new("runs/default"));
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn config_rejects_unknown_keys_and_hash_tracks_content() {
    assert!(matches!(RunConfig::parse("[edit]\nlamda = 3.0\n"), Err(FwdError::Config(_))));
    let base = RunConfig::default();
    let mut moved = base.clone();
    moved.out_dir = Some("elsewhere".into());
    assert_eq!(base.hash(), moved.hash());
    let mut other = base.clone();
    other.override_seed(9);
    assert_ne!(base.hash(), other.hash());
    assert_eq!(other.edit.seed, 9);
    assert_eq!(other.train.seed, 9);
}

#[test]
fn corpus_files_round_trip() {
    let params = CorpusParams {
        n_subjects: 8,
        n_relations: 2,
        n_objects: 4,
        ..CorpusParams::default()
    };
    let corpus = generate_corpus(&params).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut st = Staging::new(dir.path(), "abc");
    stage_corpus(&mut st, &corpus).unwrap();
    let manifest = st.commit("gen-data", vec![]).unwrap();
    assert_eq!(manifest.artifacts.len(), 3);
    assert_eq!(load_corpus(dir.path()).unwrap(), corpus);

    let line = fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["prompt", "decisive_index", "answer", "paraphrases", "neighborhood"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let vocab = fs::read_to_string(dir.path().join("vocab.txt")).unwrap();
    assert_eq!(vocab.lines().count(), corpus.vocab_size());

    fs::write(dir.path().join("corpus.jsonl"), "{\"prompt\": [1]}\n").unwrap();
    assert!(matches!(load_corpus(dir.path()), Err(FwdError::Format { .. })));
}

#[test]
fn csv_and_json_carry_the_config_hash() {
    let bytes = csv_bytes("h123", &["a", "b"], &[vec!["1".into(), "x,y".into()]]).unwrap();
    assert_eq!(String::from_utf8(bytes).unwrap(), "# config_hash=h123\na,b\n1,\"x,y\"\n");
    let dir = tempfile::tempdir().unwrap();
    let mut st = Staging::new(dir.path(), "h123");
    st.json("v", "v.json", "values", &vec![1.5, 2.0]).unwrap();
    let m = st.commit("test", vec![]).unwrap();
    let v: Vec<f64> = read_json(&dir.path().join("v.json"), "values").unwrap();
    assert_eq!(v, vec![1.5, 2.0]);
    assert_eq!(m.config_hash, "h123");
    assert!(fs::read_to_string(dir.path().join("v.json")).unwrap().contains("\"config_hash\": \"h123\""));
}
