mod common;

use fwdedit_core::editor::{apply_edit, run_edit, EditConfig, EditDelta};
use fwdedit_core::evaluation::{build_edit_batch, BatchParams, EditBatch};
use fwdedit_core::targets::{fe_targets, EditRequest, Method, TargetSolveConfig};
use fwdedit_core::{math, Error, Tensor};

fn batch(seed: u64, n: usize) -> EditBatch {
    let fx = common::tiny();
    build_edit_batch(&fx.model, &fx.corpus, &BatchParams { n_edits: n, min_neighbors: 2, seed }).unwrap()
}

fn config(method: Method) -> EditConfig {
    EditConfig {
        method,
        preservation_size: 20,
        ..EditConfig::default()
    }
}

#[test]
fn replayed_targets_reproduce_the_first_layer_intervention() {
    let fx = common::tiny();
    let b = batch(1, 10);
    let first = fx.model.config().first_decisive();
    for req in &b.requests {
        let plan = fe_targets(&fx.model, req, &TargetSolveConfig::default()).unwrap();
        let seq = req.full_sequence();
        let row = req.prompt.len() - 1;
        let anchor = fx.model.forward_with_replacement(&seq, first, req.decisive_index, plan.target_at(first).unwrap()).unwrap();
        let ce0 = req.answer_ce(&fx.model, Some((first, plan.target_at(first).unwrap()))).unwrap();
        for &layer in &plan.layers {
            let m = plan.target_at(layer).unwrap();
            let out = fx.model.forward_with_replacement(&seq, layer, req.decisive_index, m).unwrap();
            let a = anchor.logits.row(row);
            let err = math::norm(&math::sub(out.logits.row(row), a)) / math::norm(a);
            assert!(err < 1e-6, "layer {layer}: {err:e}");
            let ce = req.answer_ce(&fx.model, Some((layer, m))).unwrap();
            assert!((ce - ce0).abs() < 1e-6);
        }
    }
}

#[test]
fn every_method_edits_its_layers_and_records_residuals() {
    let fx = common::tiny();
    let b = batch(2, 8);
    let decisive = fx.model.config().decisive_layers.clone();
    for method in Method::ALL {
        let mut post = fx.model.clone();
        let rec = run_edit(&mut post, &b.requests, &b.preservation_pool, &config(method)).unwrap();
        let layers = method.edited_layers(&decisive);
        assert_eq!(rec.layers, layers, "{method}");
        assert_eq!(rec.deltas.len(), layers.len());
        assert_eq!(rec.residuals.ratios.len(), layers.len() + 1);
        assert_eq!(rec.plans.len(), b.requests.len());
        assert_eq!(rec.pre_checksum, fx.model.checksum());
        assert_eq!(rec.post_checksum, post.checksum());
        assert_ne!(rec.pre_checksum, rec.post_checksum);
        for d in &rec.deltas {
            assert_eq!(d.frobenius, d.delta.norm());
        }
    }
}

#[test]
fn spread_residuals_shrink_layer_by_layer() {
    let fx = common::tiny();
    let b = batch(3, 10);
    for method in [Method::MemitDividing, Method::ForwardReplay] {
        let mut post = fx.model.clone();
        let rec = run_edit(&mut post, &b.requests, &b.preservation_pool, &config(method)).unwrap();
        let means = rec.residuals.means();
        assert!(means.windows(2).all(|w| w[1] <= w[0]), "{method}: {means:?}");
    }
}

#[test]
fn runs_are_reproducible() {
    let fx = common::tiny();
    let b = batch(4, 6);
    let run = || {
        let mut post = fx.model.clone();
        let rec = run_edit(&mut post, &b.requests, &b.preservation_pool, &config(Method::ForwardReplay)).unwrap();
        (rec, post.checksum())
    };
    assert_eq!(run(), run());
}

#[test]
fn failed_run_leaves_the_model_untouched() {
    let fx = common::tiny();
    let b = batch(5, 4);
    let mut reqs = b.requests.clone();
    reqs.push(EditRequest {
        prompt: vec![0, 1],
        decisive_index: 1,
        target: vec![fx.model.config().vocab_size + 3],
        original: vec![1],
    });
    let mut model = fx.model.clone();
    let before = model.checksum();
    assert!(run_edit(&mut model, &reqs, &b.preservation_pool, &config(Method::MemitDividing)).is_err());
    assert_eq!(model.checksum(), before);

    let too_many = EditConfig {
        preservation_size: b.preservation_pool.len() + 1,
        ..config(Method::OneLayer)
    };
    assert!(matches!(run_edit(&mut model, &b.requests, &b.preservation_pool, &too_many), Err(Error::Input(_))));
    assert!(run_edit(&mut model, &[], &b.preservation_pool, &config(Method::OneLayer)).is_err());
    assert_eq!(model.checksum(), before);
}

#[test]
fn zero_delta_is_a_no_op_and_negation_undoes_an_edit() {
    let fx = common::tiny();
    let layer = fx.model.config().first_decisive();
    let shape = fx.model.w_down(layer).shape().to_vec();
    let mut model = fx.model.clone();
    apply_edit(&mut model, &EditDelta::new(layer, Tensor::zeros(&shape), 0.0)).unwrap();
    assert_eq!(model.checksum(), fx.model.checksum());

    let bump = EditDelta::new(layer, Tensor::filled(&shape, 0.25), 0.0);
    apply_edit(&mut model, &bump).unwrap();
    assert_ne!(model.checksum(), fx.model.checksum());
    apply_edit(&mut model, &bump.negated()).unwrap();
    assert_eq!(model.checksum(), fx.model.checksum());
    assert!(apply_edit(&mut model, &EditDelta::new(99, Tensor::zeros(&shape), 0.0)).is_err());
}

#[test]
fn edits_change_the_rewritten_answers() {
    let fx = common::tiny();
    let b = batch(6, 8);
    let mut post = fx.model.clone();
    run_edit(&mut post, &b.requests, &b.preservation_pool, &config(Method::ForwardReplay)).unwrap();
    let hits = b
        .requests
        .iter()
        .filter(|r| post.predict_next(&r.prompt).unwrap() == r.target[0])
        .count();
    assert!(hits * 2 > b.requests.len(), "{hits}/{}", b.requests.len());
}
