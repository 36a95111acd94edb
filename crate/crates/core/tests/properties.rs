use fwdedit_core::diagnostics::sample_directions;
use fwdedit_core::evaluation::kl_from_logits;
use fwdedit_core::{math, Tensor};
use proptest::prelude::*;

fn row(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, len)
}

proptest! {
    #[test]
    fn cosine_is_bounded(a in row(9), b in row(9)) {
        let c = math::cosine(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn log_softmax_normalizes(a in row(12)) {
        let total: f64 = math::log_softmax(&a).iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(a in row(7), b in row(7)) {
        prop_assert!(kl_from_logits(&a, &b) >= 0.0);
        prop_assert_eq!(kl_from_logits(&a, &a), 0.0);
    }

    #[test]
    fn top_k_is_sorted_and_prefers_low_ids(a in prop::collection::vec(-3i32..3, 10), k in 1usize..10) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let top = math::top_k(&a, k);
        prop_assert_eq!(top.len(), k);
        prop_assert_eq!(top[0], math::argmax(&a));
        for w in top.windows(2) {
            prop_assert!(a[w[0]] > a[w[1]] || (a[w[0]] == a[w[1]] && w[0] < w[1]));
        }
    }

    #[test]
    fn transpose_is_an_involution(r in 1usize..6, c in 1usize..6, seed in any::<u32>()) {
        let t = Tensor::from_fn(r, c, |i, j| ((i * 7 + j * 3) as f64 + seed as f64).sin());
        prop_assert_eq!(t.transpose().transpose(), t.clone());
        let id = Tensor::identity(c);
        prop_assert_eq!(t.matmul(&id).unwrap(), t);
    }

    #[test]
    fn sampled_directions_are_unit(dim in 1usize..40, seed in any::<u64>()) {
        for v in sample_directions(dim, 5, seed) {
            prop_assert!((math::norm(&v) - 1.0).abs() < 1e-12);
        }
    }
}
