mod common;

use common::oracles::{gram_cka, nondegenerate, orthonormalize, right_multiply};
use l2tkt::cka::{cka_similarity, kt_loss};
use l2tkt::diffcore::Tensor;
use proptest::prelude::*;

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

fn batch(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n)
}

fn pair() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (2usize..=16, 1usize..=64, 1usize..=64)
        .prop_flat_map(|(n, dt, ds)| (batch(n, dt), batch(n, ds)))
}

fn square(d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn similarity_is_bounded_and_symmetric((t, s) in pair(), centered in any::<bool>()) {
        prop_assume!(nondegenerate(&t) && nondegenerate(&s));
        let a = cka_similarity(&tensor(&t), &tensor(&s), centered).unwrap();
        let b = cka_similarity(&tensor(&s), &tensor(&t), centered).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-12);
        let loss = kt_loss(&tensor(&t), &tensor(&s), centered).unwrap();
        prop_assert!((loss - (1.0 - a)).abs() < 1e-15);
    }

    #[test]
    fn similarity_matches_gram_formula((t, s) in pair(), centered in any::<bool>()) {
        prop_assume!(nondegenerate(&t) && nondegenerate(&s));
        let a = cka_similarity(&tensor(&t), &tensor(&s), centered).unwrap();
        prop_assert!((a - gram_cka(&t, &s, centered)).abs() < 1e-10);
    }

    #[test]
    fn similarity_ignores_scale_and_rotation(
        (t, s, q) in (2usize..=16, 1usize..=16, 1usize..=16)
            .prop_flat_map(|(n, dt, ds)| (batch(n, dt), batch(n, ds), square(ds))),
        c in 0.01f64..100.0,
    ) {
        prop_assume!(nondegenerate(&t) && nondegenerate(&s));
        let q = orthonormalize(q);
        prop_assume!(q.iter().flatten().all(|v| v.is_finite()));
        let base = cka_similarity(&tensor(&t), &tensor(&s), true).unwrap();
        let scaled: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        let rotated = right_multiply(&s, &q);
        prop_assert!((cka_similarity(&tensor(&t), &tensor(&scaled), true).unwrap() - base).abs() < 1e-10);
        prop_assert!((cka_similarity(&tensor(&t), &tensor(&rotated), true).unwrap() - base).abs() < 1e-10);
    }
}

#[test]
fn translation_only_matters_when_uncentered() {
    let t = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]];
    let s = vec![vec![0.5], vec![-1.0], vec![2.0]];
    let shifted: Vec<Vec<f64>> = s.iter().map(|r| vec![r[0] + 5.0]).collect();
    let c = |x: &[Vec<f64>], centered| cka_similarity(&tensor(&t), &tensor(x), centered).unwrap();
    assert!((c(&s, true) - c(&shifted, true)).abs() < 1e-12);
    assert!((c(&s, false) - c(&shifted, false)).abs() > 1e-3);
}
