mod common;

use common::msim_brute_force;
use hyda::autodiff::{Tape, Tensor};
use hyda::losses::{cross_entropy, multi_similarity_loss, MsimParams};
use proptest::prelude::*;

fn msim(emb: &Tensor, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let e = tape.constant(emb.clone());
    let l = multi_similarity_loss(&mut tape, e, labels, &MsimParams::default()).unwrap();
    tape.value(l).data()[0]
}

/// Batches of 2..=16 rows with non-zero embeddings and 2..=4 label values.
fn batch() -> impl Strategy<Value = (Tensor, Vec<usize>)> {
    (2usize..=16, 2usize..=5).prop_flat_map(|(b, f)| {
        (
            prop::collection::vec(
                prop::collection::vec(0.05f64..2.0, f).prop_flat_map(move |mag| {
                    prop::collection::vec(any::<bool>(), f).prop_map(move |s| {
                        mag.iter().zip(&s).map(|(m, neg)| if *neg { -m } else { *m }).collect::<Vec<f64>>()
                    })
                }),
                b,
            ),
            prop::collection::vec(0usize..4, b),
        )
            .prop_map(|(rows, labels)| (Tensor::from_rows(&rows), labels))
    })
}

#[test]
fn hand_placed_overlapping_batch_matches_brute_force() {
    let emb = Tensor::from_rows(&[vec![1.0, 0.1], vec![0.8, 0.6], vec![0.9, 0.4], vec![0.2, 1.0]]);
    let labels = [0, 0, 1, 1];
    let got = msim(&emb, &labels);
    let want = msim_brute_force(&emb, &labels, &MsimParams::default());
    assert!(got > 0.0);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matches_brute_force((emb, labels) in batch()) {
        let got = msim(&emb, &labels);
        let want = msim_brute_force(&emb, &labels, &MsimParams::default());
        prop_assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
    }

    #[test]
    fn permutation_invariant((emb, labels) in batch(), seed in any::<u64>()) {
        let b = labels.len();
        let mut perm: Vec<usize> = (0..b).collect();
        hyda::rng::shuffle(&mut perm, &mut hyda::rng::stream(seed, 0));
        let emb_p = emb.select_rows(&perm);
        let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        prop_assert!((msim(&emb, &labels) - msim(&emb_p, &labels_p)).abs() < 1e-12);
    }

    #[test]
    fn scale_invariant((emb, labels) in batch(), c in 0.01f64..100.0) {
        let scaled = emb.map(|v| v * c);
        prop_assert!((msim(&emb, &labels) - msim(&scaled, &labels)).abs() < 1e-12);
    }

    #[test]
    fn separated_classes_give_exact_zero(b0 in 1usize..6, b1 in 1usize..6, jitter in prop::collection::vec(-0.02f64..0.02, 12)) {
        // Class 0 near +x, class 1 near +y: within-class similarity ≈ 1,
        // between-class ≈ 0, a gap far above ε.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for &j in &jitter[..b0] {
            rows.push(vec![1.0, j]);
            labels.push(0);
        }
        for &j in &jitter[6..6 + b1] {
            rows.push(vec![j, 1.0]);
            labels.push(1);
        }
        prop_assert_eq!(msim(&Tensor::from_rows(&rows), &labels), 0.0);
    }

    #[test]
    fn cross_entropy_is_non_negative(logits in prop::collection::vec(-50.0f64..50.0, 12), labels in prop::collection::vec(0usize..3, 4)) {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(vec![4, 3], logits).unwrap());
        let ce = cross_entropy(&mut tape, l, &labels).unwrap();
        prop_assert!(tape.value(ce).data()[0] >= 0.0);
    }
}
