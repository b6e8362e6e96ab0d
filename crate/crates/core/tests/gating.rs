//! Properties of top-K routing and the sparse softmax over selected experts.

use cmvqa::mmoe::{select_top_k, top_k_softmax};
use cmvqa::{Tape, Tensor};
use proptest::prelude::*;

fn weights(logits: &[f64], k: usize) -> (Vec<f64>, Vec<usize>) {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, logits.len()], logits.to_vec()).unwrap());
    let (w, sel) = top_k_softmax(x, k, None).unwrap();
    (w.value().data().to_vec(), sel.into_iter().next().unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn exactly_k_positive_weights_summing_to_one(
        logits in prop::collection::vec(-20.0f64..20.0, 6),
        k in 1usize..=6,
    ) {
        let (w, sel) = weights(&logits, k);
        prop_assert_eq!(w.iter().filter(|&&v| v > 0.0).count(), k);
        prop_assert_eq!(sel.len(), k);
        let sum: f64 = w.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12, "sum {}", sum);
        for (i, &v) in w.iter().enumerate() {
            prop_assert_eq!(v > 0.0, sel.contains(&i));
        }
    }

    #[test]
    fn selected_logits_dominate_the_rest(
        logits in prop::collection::vec(-5.0f64..5.0, 2..10),
        k_frac in 0.0f64..1.0,
    ) {
        let n = logits.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let sel = select_top_k(&logits, k);
        let min_in = sel.iter().map(|&i| logits[i]).fold(f64::INFINITY, f64::min);
        for i in (0..n).filter(|i| !sel.contains(i)) {
            prop_assert!(logits[i] <= min_in);
        }
        prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn k_equal_n_is_plain_softmax_bitwise(logits in prop::collection::vec(-30.0f64..30.0, 1..9)) {
        let n = logits.len();
        let (w, _) = weights(&logits, n);
        let tape = Tape::new();
        let plain = tape
            .constant(Tensor::new(vec![1, n], logits.clone()).unwrap())
            .softmax(1)
            .unwrap()
            .value();
        for (a, b) in w.iter().zip(plain.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        let oracle = cmvqa_oracles::softmax_oracle(&logits);
        for (a, b) in w.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn ties_pick_lowest_indices(value in -10.0f64..10.0, n in 1usize..10, k_frac in 0.0f64..1.0) {
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let logits = vec![value; n];
        prop_assert_eq!(select_top_k(&logits, k), (0..k).collect::<Vec<_>>());
        let (w, _) = weights(&logits, k);
        for (i, &v) in w.iter().enumerate() {
            if i < k {
                prop_assert!((v - 1.0 / k as f64).abs() < 1e-15);
            } else {
                prop_assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn weights_are_shift_invariant(logits in prop::collection::vec(-5.0f64..5.0, 6), shift in -50.0f64..50.0, k in 1usize..=6) {
        let (a, sa) = weights(&logits, k);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let (b, sb) = weights(&shifted, k);
        if sa == sb {
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn rows_route_independently() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 4], vec![4.0, 3.0, 2.0, 1.0, 1.0, 2.0, 3.0, 4.0]).unwrap());
    let (w, sel) = top_k_softmax(x, 2, None).unwrap();
    assert_eq!(sel, vec![vec![0, 1], vec![2, 3]]);
    let w = w.value();
    assert_eq!(&w.data()[2..4], &[0.0, 0.0]);
    assert_eq!(&w.data()[4..6], &[0.0, 0.0]);
}

#[test]
fn fixed_routing_overrides_the_choice() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 4], vec![4.0, 3.0, 2.0, 1.0]).unwrap());
    let (w, sel) = top_k_softmax(x, 2, Some(&[vec![2, 3]])).unwrap();
    assert_eq!(sel, vec![vec![2, 3]]);
    let w = w.value();
    assert_eq!(w.data()[0], 0.0);
    assert!((w.data()[2] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
}

#[test]
fn k_out_of_range_is_a_config_error() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(top_k_softmax(x, 0, None), Err(cmvqa::Error::Config(_))));
    assert!(matches!(top_k_softmax(x, 5, None), Err(cmvqa::Error::Config(_))));
}
