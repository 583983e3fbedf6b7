//! Vectorized kernels against direct enumeration: convolution, triplet
//! mining and AUC.

mod common;

use common::{brute_mining, conv_matches_oracle, pairwise_auc, rand_tensor, rng};
use lcnet::data::Label;
use lcnet::loss::{mine_batch_all, MarginConfig, TripletBatch};
use lcnet::metrics::roc_and_auc;
use lcnet::tensor::ConvPadding;
use lcnet::{par, Tape, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_temporal_matches_oracle_bitwise(seed in any::<u64>()) {
        prop_assert!(conv_matches_oracle(seed, false));
    }

    #[test]
    fn conv_color_matches_oracle_bitwise(seed in any::<u64>()) {
        prop_assert!(conv_matches_oracle(seed, true));
    }

    #[test]
    fn mining_matches_enumeration_exactly(seed in any::<u64>(), b in 2usize..=16, m in 1usize..=5) {
        use rand::Rng;
        let mut r = rng(seed);
        let labels: Vec<Label> = (0..b).map(|_| if r.random::<bool>() { Label::Ia } else { Label::NotIa }).collect();
        let e = rand_tensor(&mut r, &[b, m], -1.0, 1.0);
        let s = rand_tensor(&mut r, &[b, m], -1.0, 1.0);
        let margins = MarginConfig { margin: r.random_range(0.1..2.0), margin_prime: r.random_range(0.1..2.0) };
        let (t, tp, n, np) = brute_mining(&e, &s, &labels, &margins);
        let mut tape = Tape::new();
        let (ev, sv) = (tape.constant(e), tape.constant(s));
        let mined = mine_batch_all(&mut tape, &TripletBatch { embeddings: ev, subsampled: sv, labels: &labels }, &margins).unwrap();
        prop_assert_eq!((mined.n_useful, mined.n_useful_prime), (n, np));
        prop_assert_eq!(mined.triplet.to_bits(), t.to_bits());
        prop_assert_eq!(mined.triplet_prime.to_bits(), tp.to_bits());
        prop_assert_eq!(tape.value(mined.loss).item(), t + tp);
    }

    #[test]
    fn mining_is_permutation_invariant(seed in any::<u64>()) {
        use rand::{seq::SliceRandom, Rng};
        let mut r = rng(seed);
        let b = r.random_range(4..=10);
        let labels: Vec<Label> = (0..b).map(|i| if i % 2 == 0 { Label::Ia } else { Label::NotIa }).collect();
        let e = rand_tensor(&mut r, &[b, 3], -1.0, 1.0);
        let s = rand_tensor(&mut r, &[b, 3], -1.0, 1.0);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut r);
        let pick = |t: &Tensor| Tensor::new(&[b, 3], perm.iter().flat_map(|&i| t.data()[3 * i..3 * i + 3].to_vec()).collect()).unwrap();
        let pl: Vec<Label> = perm.iter().map(|&i| labels[i]).collect();
        let run = |e: Tensor, s: Tensor, l: &[Label]| {
            let mut tape = Tape::new();
            let (ev, sv) = (tape.constant(e), tape.constant(s));
            let m = mine_batch_all(&mut tape, &TripletBatch { embeddings: ev, subsampled: sv, labels: l }, &MarginConfig::default()).unwrap();
            (m.triplet, m.triplet_prime, m.n_useful, m.n_useful_prime)
        };
        let a = run(e.clone(), s.clone(), &labels);
        let p = run(pick(&e), pick(&s), &pl);
        prop_assert_eq!((a.2, a.3), (p.2, p.3));
        prop_assert!((a.0 - p.0).abs() < 1e-12 && (a.1 - p.1).abs() < 1e-12);
        prop_assert!(a.0 >= 0.0 && a.1 >= 0.0);
    }

    #[test]
    fn trapezoid_auc_equals_pairwise(seed in any::<u64>(), n in 2usize..=200, levels in 2u32..=50) {
        use rand::Rng;
        let mut r = rng(seed);
        let mut labels: Vec<Label> = (0..n).map(|_| if r.random::<bool>() { Label::Ia } else { Label::NotIa }).collect();
        labels[0] = Label::Ia;
        labels[1] = Label::NotIa;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..levels)) / f64::from(levels)).collect();
        let (roc, auc) = roc_and_auc(&scores, &labels).unwrap();
        prop_assert!((auc - pairwise_auc(&scores, &labels)).abs() < 1e-9);
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let (_, auc_neg) = roc_and_auc(&neg, &labels).unwrap();
        prop_assert!((auc + auc_neg - 1.0).abs() < 1e-12);
        let pts = &roc.points;
        prop_assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        prop_assert_eq!((pts[pts.len() - 1].fpr, pts[pts.len() - 1].tpr), (1.0, 1.0));
        prop_assert!(pts.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
    }
}

#[test]
fn worked_examples() {
    let (_, auc) = roc_and_auc(
        &[0.8, 0.7, 0.6, 0.2],
        &[Label::Ia, Label::NotIa, Label::Ia, Label::NotIa],
    )
    .unwrap();
    assert_eq!(auc, 0.75);
    let labels = [Label::Ia, Label::Ia, Label::NotIa];
    let e = Tensor::new(&[3, 2], vec![0.0, 0.0, 0.1, 0.0, 0.5, 0.0]).unwrap();
    let (t, _, n, _) = brute_mining(&e, &e, &labels, &MarginConfig::default());
    assert_eq!(n, 2);
    assert!((t - 0.65).abs() < 1e-12);
}

#[test]
fn parallel_and_sequential_kernels_agree_bitwise() {
    let run = || {
        let mut r = rng(4);
        let x = rand_tensor(&mut r, &[3, 6, 4, 40], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[7, 6, 1, 5], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[7], -1.0, 1.0);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x, true), tape.leaf(w, true), tape.leaf(b, true));
        let (y, _) = tape
            .conv2d(xv, wv, bv, 2, ConvPadding::Same, Some(&[40, 17, 3]))
            .unwrap();
        let sq = tape.mul(y, y).unwrap();
        let out = tape.sum(sq);
        tape.backward(out).unwrap();
        [
            tape.value(y).data().to_vec(),
            tape.grad(xv).unwrap().to_vec(),
            tape.grad(wv).unwrap().to_vec(),
            tape.grad(bv).unwrap().to_vec(),
        ]
    };
    par::set_parallel(true);
    let a = run();
    par::set_parallel(false);
    let b = run();
    par::set_parallel(true);
    assert_eq!(a, b);
}
