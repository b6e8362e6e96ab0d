//! Mask RMSE, answer cross-entropy, balance loss and the composite objective against
//! scalar-loop oracles.

use cmvqa::detector::{rmse_loss, MaskTriplet};
use cmvqa::mmoe::importance_stats;
use cmvqa::train::total_loss;
use cmvqa::{Tape, Tensor};
use cmvqa_oracles::{balance_case, ce_case, on, rmse_case, triplet};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn rmse_matches_oracle_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (got, want) = rmse_case(&mut rng);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn rmse_of_identical_masks_is_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = triplet(&mut rng, 5, 5);
    let tape = Tape::new();
    let (a, b) = (on(&tape, &m), on(&tape, &m));
    assert_eq!(rmse_loss(&a, &b).unwrap().item(), 0.0);
}

#[test]
fn rmse_of_opposite_binary_masks_is_one() {
    let ones = MaskTriplet {
        source: Tensor::full(&[3, 3], 1.0),
        tampered: Tensor::full(&[3, 3], 1.0),
        background: Tensor::full(&[3, 3], 1.0),
    };
    let zeros = MaskTriplet {
        background: Tensor::zeros(&[3, 3]),
        ..MaskTriplet::clean(3, 3)
    };
    let tape = Tape::new();
    let got = rmse_loss(&on(&tape, &ones), &on(&tape, &zeros)).unwrap().item();
    assert_eq!(got, 1.0);
}

#[test]
fn cross_entropy_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let (got, want) = ce_case(&mut rng);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn cross_entropy_examples() {
    let tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros(&[1, 50]));
    assert!((uniform.cross_entropy(&[17]).unwrap().item() - 50f64.ln()).abs() <= 1e-9);

    let mut confident = vec![0.0; 50];
    confident[3] = 50.0;
    let x = tape.constant(Tensor::new(vec![1, 50], confident).unwrap());
    assert!(x.cross_entropy(&[3]).unwrap().item() < 1e-10);

    let a = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let b = tape.constant(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap());
    let both = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.5, -1.0, 2.0]).unwrap());
    let mean = 0.5 * (a.cross_entropy(&[0]).unwrap().item() + b.cross_entropy(&[2]).unwrap().item());
    assert!((both.cross_entropy(&[0, 2]).unwrap().item() - mean).abs() < 1e-15);

    assert!(matches!(a.cross_entropy(&[3]), Err(cmvqa::Error::Contract(_))));
}

#[test]
fn balance_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let (got, want) = balance_case(&mut rng);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn balance_examples() {
    let tape = Tape::new();
    let stats = |v: Vec<f64>| {
        let n = v.len();
        importance_stats(tape.constant(Tensor::new(vec![n], v).unwrap())).unwrap()
    };
    assert!((stats(vec![2.0, 0.0, 0.0, 0.0]).loss.item() - 3.0).abs() <= 1e-9);
    assert_eq!(stats(vec![0.25; 4]).loss.item(), 0.0);
    assert!(stats(vec![0.0; 4]).loss.item().is_finite());
    let cv = stats(vec![1.0, 3.0]).cv.item();
    assert!((cv - 0.5).abs() < 1e-15);
}

#[test]
fn total_loss_examples() {
    let tape = Tape::new();
    let c = |v: f64| tape.constant(Tensor::scalar(v));
    let t = |a: f64| total_loss(c(1.0), c(2.0), c(0.1), a).unwrap().item();
    assert!((t(0.3) - 1.8).abs() < 1e-12);
    assert!((t(0.0) - 2.1).abs() < 1e-12);
    assert!((t(1.0) - 1.1).abs() < 1e-12);
    assert!(matches!(
        total_loss(c(1.0), c(2.0), c(0.1), 1.5),
        Err(cmvqa::Error::Config(_))
    ));
}

proptest! {
    #[test]
    fn rmse_is_symmetric_and_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (triplet(&mut rng, 4, 3), triplet(&mut rng, 4, 3));
        let tape = Tape::new();
        let (va, vb) = (on(&tape, &a), on(&tape, &b));
        let ab = rmse_loss(&va, &vb).unwrap().item();
        let ba = rmse_loss(&vb, &va).unwrap().item();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn balance_is_scale_invariant(v in prop::collection::vec(0.01f64..5.0, 2..8), scale in 0.1f64..10.0) {
        let tape = Tape::new();
        let n = v.len();
        let a = importance_stats(tape.constant(Tensor::new(vec![n], v.clone()).unwrap())).unwrap().loss.item();
        let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
        let b = importance_stats(tape.constant(Tensor::new(vec![n], scaled).unwrap())).unwrap().loss.item();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }

    #[test]
    fn total_loss_reconstructs(r in 0.0f64..2.0, v in 0.0f64..5.0, b in 0.0f64..3.0, alpha in 0.0f64..=1.0) {
        let tape = Tape::new();
        let c = |x: f64| tape.constant(Tensor::scalar(x));
        let got = total_loss(c(r), c(v), c(b), alpha).unwrap().item();
        prop_assert!((got - (alpha * r + (1.0 - alpha) * v + b)).abs() <= 1e-10);
    }
}
