use fwdedit_core::editor::{solve_delta, EditMatrices};
use fwdedit_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Gaussian elimination with partial pivoting on the normal equations
/// `Δ (K_I K_Iᵀ + λ K_J K_Jᵀ + ρ I) = (M_I − W K_I) K_Iᵀ`, written out with
/// plain loops.
fn oracle(w: &Tensor, m: &EditMatrices, lambda: f64, ridge: f64) -> Vec<Vec<f64>> {
    let d = w.cols();
    let out = w.rows();
    let n = m.k_i.cols();
    let u = m.k_j.cols();
    let mut a = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for c in 0..n {
                s += m.k_i.get(i, c) * m.k_i.get(j, c);
            }
            for c in 0..u {
                s += lambda * m.k_j.get(i, c) * m.k_j.get(j, c);
            }
            a[i][j] = s + if i == j { ridge } else { 0.0 };
        }
    }
    let mut r = vec![vec![0.0; n]; out];
    for i in 0..out {
        for c in 0..n {
            let wk: f64 = (0..d).map(|k| w.get(i, k) * m.k_i.get(k, c)).sum();
            r[i][c] = m.m_i.get(i, c) - wk;
        }
    }
    // Rows of Δ solve A x = b with b = (R K_Iᵀ) row, because A is symmetric.
    (0..out)
        .map(|i| {
            let b: Vec<f64> = (0..d).map(|j| (0..n).map(|c| r[i][c] * m.k_i.get(j, c)).sum()).collect();
            eliminate(a.clone(), b)
        })
        .collect()
}

fn eliminate(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

fn instance(rng: &mut ChaCha8Rng, d: usize, n: usize, u: usize) -> (Tensor, EditMatrices) {
    let w = random(rng, d, d);
    let mats = EditMatrices {
        k_i: random(rng, d, n),
        m_i: random(rng, d, n),
        k_j: random(rng, d, u),
    };
    (w, mats)
}

fn rel_frobenius(delta: &Tensor, reference: &[Vec<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, row) in reference.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            num += (delta.get(i, j) - v).powi(2);
            den += v * v;
        }
    }
    (num / den).sqrt()
}

#[test]
fn agrees_with_elimination_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let d = [4, 8, 16, 64][trial % 4];
        let n = rng.random_range(1..=d);
        let u = rng.random_range(0..=2 * d);
        let lambda = [0.5, 1.0, 5.0][trial % 3];
        let (w, mats) = instance(&mut rng, d, n, u);
        let (delta, ridge) = solve_delta(&w, &mats, lambda, None).unwrap();
        let err = rel_frobenius(&delta, &oracle(&w, &mats, lambda, ridge));
        worst = worst.max(err);
    }
    assert!(worst < 1e-8, "worst relative Frobenius error {worst:e}");
}

#[test]
fn consistent_targets_give_exact_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for d in [4, 16] {
        let (w, mut mats) = instance(&mut rng, d, d / 2, d);
        mats.m_i = w.matmul(&mats.k_i).unwrap();
        let (delta, _) = solve_delta(&w, &mats, 1.0, None).unwrap();
        assert_eq!(delta.norm(), 0.0);
    }
}

#[test]
fn two_by_two_hand_case() {
    let w = Tensor::identity(2);
    let mats = EditMatrices {
        k_i: Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
        m_i: Tensor::matrix(2, 1, vec![2.0, 0.0]).unwrap(),
        k_j: Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap(),
    };
    let (delta, _) = solve_delta(&w, &mats, 1.0, Some(0.0)).unwrap();
    assert_eq!(delta.data(), &[1.0, 0.0, 0.0, 0.0]);
    let edited = w.add(&delta).unwrap();
    assert_eq!(edited.matvec(&[1.0, 0.0]).unwrap(), vec![2.0, 0.0]);
}

#[test]
fn heavier_preservation_moves_protected_keys_less() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (w, mats) = instance(&mut rng, 8, 4, 6);
    let mut last = f64::INFINITY;
    for lambda in [0.1, 1.0, 10.0, 100.0] {
        let (delta, _) = solve_delta(&w, &mats, lambda, None).unwrap();
        let moved = delta.matmul(&mats.k_j).unwrap().norm() / mats.k_j.norm();
        assert!(moved < last, "lambda {lambda}: {moved} vs {last}");
        last = moved;
    }
}

#[test]
fn empty_preservation_is_plain_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, mut mats) = instance(&mut rng, 6, 6, 0);
    mats.k_j = Tensor::zeros(&[6, 0]);
    let (delta, _) = solve_delta(&w, &mats, 1.0, Some(0.0)).unwrap();
    let fitted = w.add(&delta).unwrap().matmul(&mats.k_i).unwrap();
    let err = fitted.sub(&mats.m_i).unwrap().norm() / mats.m_i.norm();
    assert!(err < 1e-10, "{err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normal_equations_hold(seed in any::<u64>(), d in 2usize..12, lambda in 0.01f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=d);
        let u = rng.random_range(0..=2 * d);
        let (w, mats) = instance(&mut rng, d, n, u);
        let (delta, ridge) = solve_delta(&w, &mats, lambda, None).unwrap();
        let kk = mats.k_i.matmul(&mats.k_i.transpose()).unwrap();
        let jj = mats.k_j.matmul(&mats.k_j.transpose()).unwrap().scale(lambda);
        let a = kk.add(&jj).unwrap().add(&Tensor::identity(d).scale(ridge)).unwrap();
        let lhs = delta.matmul(&a).unwrap();
        let rhs = mats.m_i.sub(&w.matmul(&mats.k_i).unwrap()).unwrap().matmul(&mats.k_i.transpose()).unwrap();
        let rel = lhs.sub(&rhs).unwrap().norm() / rhs.norm().max(f64::MIN_POSITIVE);
        prop_assert!(rel < 1e-8, "relative residual {:e}", rel);
    }

    #[test]
    fn scaling_the_residual_scales_delta(seed in any::<u64>(), c in -4.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, mats) = instance(&mut rng, 5, 3, 4);
        let (base, ridge) = solve_delta(&w, &mats, 1.0, None).unwrap();
        let resid = mats.m_i.sub(&w.matmul(&mats.k_i).unwrap()).unwrap();
        let scaled = EditMatrices { m_i: w.matmul(&mats.k_i).unwrap().add(&resid.scale(c)).unwrap(), ..mats.clone() };
        let (delta, _) = solve_delta(&w, &scaled, 1.0, Some(ridge)).unwrap();
        let err = delta.sub(&base.scale(c)).unwrap().norm();
        prop_assert!(err <= 1e-9 * (1.0 + base.norm() * c.abs()), "{:e}", err);
    }
}
