mod common;

use fwdedit_core::diagnostics::*;
use fwdedit_core::editor::{run_edit, EditConfig};
use fwdedit_core::evaluation::{build_edit_batch, BatchParams};
use fwdedit_core::targets::Method;
use fwdedit_core::{math, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn symmetric_part_carries_the_quadratic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..2000 {
        let n = 2 + i % 30;
        let j = random(&mut rng, n);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = quadratic_form_check(&j, &v).unwrap();
        let scale = math::dot(&v, &v) * j.norm();
        assert!(q.vav.abs() <= 1e-10 * scale, "vAv {:e}", q.vav);
        assert!((q.vjv - q.vsv).abs() <= 1e-10 * scale);
    }
}

#[test]
fn constructed_eigenvectors_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = 6;
        let p = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3));
        let betas: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
        let j = &p * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(betas.clone())) * p.clone().try_inverse().unwrap();
        let block = JacobianBlock::from_matrix(0, 1, Tensor::from_fn(n, n, |r, c| j[(r, c)])).unwrap();
        for (k, beta) in betas.iter().enumerate() {
            let e: Vec<f64> = p.column(k).iter().copied().collect();
            let probe = eigen_probe(&block, &e).unwrap();
            assert!((probe.alignment - 1.0).abs() < 1e-8, "{}", probe.alignment);
            assert!((probe.gain - beta).abs() < 1e-6, "{} vs {}", probe.gain, beta);
        }
    }
}

#[test]
fn positive_definite_symmetric_part_keeps_directions_aligned() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 8;
    let noise = random(&mut rng, n).scale(0.2);
    let skew = random(&mut rng, n);
    let j = Tensor::from_fn(n, n, |r, c| {
        (if r == c { 1.0 } else { 0.0 }) + 0.5 * (noise.get(r, c) + noise.get(c, r)) + 2.0 * (skew.get(r, c) - skew.get(c, r))
    });
    let block = JacobianBlock::from_matrix(0, 1, j).unwrap();
    assert!(block.min_eig > 0.0);
    let report = definiteness_report(&block, &sample_directions(n, 1000, 2)).unwrap();
    assert_eq!(report.fraction_positive, 1.0);
    assert_eq!(report.fraction_aligned, 1.0);
    assert_eq!(report.violations, 0);
}

#[test]
fn toy_jacobian_agrees_with_reverse_mode() {
    let fx = common::tiny();
    let rec = &fx.corpus.records[3];
    let cfg = fx.model.config();
    let block = assemble_jacobian(&fx.model, &rec.prompt, rec.decisive_index, cfg.first_decisive(), cfg.last_decisive()).unwrap();
    let rows = [0, 5, 17, cfg.d_model - 1];
    let reverse = jacobian_rows_reverse(&fx.model, &rec.prompt, rec.decisive_index, cfg.first_decisive(), &rows).unwrap();
    for (i, &r) in rows.iter().enumerate() {
        let fd = block.j.row(r);
        let rv = reverse.row(i);
        let err = math::norm(&math::sub(fd, rv)) / math::norm(rv).max(1e-12);
        assert!(err < 1e-6, "row {r}: {err:e}");
    }
}

#[test]
fn last_layer_probes_are_identity() {
    let fx = common::tiny();
    let rec = &fx.corpus.records[0];
    let last = fx.model.config().last_decisive();
    let delta: Vec<f64> = (0..fx.model.config().d_model).map(|i| (i as f64 * 0.37).sin()).collect();
    let probe = passive_shift(&fx.model, &rec.prompt, rec.decisive_index, last, &delta).unwrap();
    assert_eq!(probe.cosine, 1.0);
    assert_eq!(probe.shift, delta);
    let block = assemble_jacobian(&fx.model, &rec.prompt, rec.decisive_index, last, last).unwrap();
    assert_eq!(block.j, Tensor::identity(delta.len()));
    assert!(passive_shift(&fx.model, &rec.prompt, rec.decisive_index, last, &vec![0.0; delta.len()]).is_err());
}

#[test]
fn small_shift_matches_linearization() {
    let fx = common::tiny();
    let rec = &fx.corpus.records[1];
    let first = fx.model.config().first_decisive();
    let delta: Vec<f64> = (0..fx.model.config().d_model).map(|i| 1e-4 * ((i * 7 % 5) as f64 - 2.0)).collect();
    let probe = passive_shift(&fx.model, &rec.prompt, rec.decisive_index, first, &delta).unwrap();
    let err = math::norm(&math::sub(&probe.shift, &probe.jvp)) / math::norm(&probe.jvp);
    assert!(err < 1e-2, "{err:e}");
}

#[test]
fn cosine_table_ends_at_one() {
    let fx = common::tiny();
    let batch = build_edit_batch(&fx.model, &fx.corpus, &BatchParams { n_edits: 12, min_neighbors: 2, seed: 4 }).unwrap();
    let mut post = fx.model.clone();
    let cfg = EditConfig {
        method: Method::MemitDividing,
        preservation_size: 20,
        ..EditConfig::default()
    };
    let record = run_edit(&mut post, &batch.requests, &batch.preservation_pool, &cfg).unwrap();
    let table = cosine_table(&fx.model, &batch.requests, &record).unwrap();
    assert_eq!(table.layers, fx.model.config().decisive_layers);
    assert_eq!(*table.mean_cosine.last().unwrap(), 1.0);
    assert!(table.mean_cosine.iter().all(|c| (-1.0..=1.0).contains(c)));

    let fe = EditConfig { method: Method::ForwardReplay, ..cfg };
    let mut other = fx.model.clone();
    let record = run_edit(&mut other, &batch.requests, &batch.preservation_pool, &fe).unwrap();
    assert!(cosine_table(&fx.model, &batch.requests, &record).is_err());
}
