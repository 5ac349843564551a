mod common;

use common::*;
use tcri_core::autodiff::Tape;
use tcri_core::kernels::{
    conditional_cross_cov, conditional_hsic, conditional_penalty_on_tape, cross_cov, hsic_median, hsic_v,
    median_bandwidth, rbf_gram, CenteringMatrix, CiPenalty,
};
use tcri_core::rng::seeded;
use tcri_core::Tensor;

#[test]
fn gram_matches_double_loop() {
    for seed in 0..5 {
        assert!(gram_brute_force_error(seed) <= 1e-14);
    }
}

#[test]
fn gram_structure() {
    let x = normal(&mut seeded(2), 30, 4);
    let k = rbf_gram(&x, median_bandwidth(&x).unwrap()).unwrap();
    for i in 0..30 {
        assert_eq!(k.matrix.get(i, i), 1.0);
        for j in 0..30 {
            assert_eq!(k.matrix.get(i, j), k.matrix.get(j, i));
            assert!(k.matrix.get(i, j) > 0.0 && k.matrix.get(i, j) <= 1.0);
        }
    }
    let same = Tensor::filled(&[5, 2], 0.3);
    assert!(rbf_gram(&same, 1.0).unwrap().matrix.data().iter().all(|&v| v == 1.0));
}

#[test]
fn median_bandwidth_matches_exhaustive_pairs() {
    let x = normal(&mut seeded(3), 100, 5);
    let mut d: Vec<f64> = Vec::new();
    for i in 0..100 {
        for j in i + 1..100 {
            d.push((0..5).map(|c| (x.get(i, c) - x.get(j, c)).powi(2)).sum::<f64>().sqrt());
        }
    }
    assert_eq!(d.len(), 4950);
    d.sort_by(f64::total_cmp);
    let brute = 0.5 * (d[2474] + d[2475]);
    let h = median_bandwidth(&x).unwrap();
    assert!((h - brute).abs() / brute < 0.1, "{h} vs {brute}");
}

#[test]
fn centering_is_idempotent_and_kills_constants() {
    let h = CenteringMatrix { n: 7 }.to_tensor();
    let hh = h.matmul(&h).unwrap();
    for (a, b) in hh.data().iter().zip(h.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let ones = Tensor::filled(&[7, 1], 1.0);
    assert!(h.matmul(&ones).unwrap().data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn constant_input_gives_exact_zero() {
    let x = normal(&mut seeded(4), 40, 2);
    let c = Tensor::filled(&[40, 3], 2.5);
    assert_eq!(hsic_median(&x, &c).unwrap(), 0.0);
    assert_eq!(hsic_median(&c, &x).unwrap(), 0.0);
    let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
    assert_eq!(conditional_hsic(&x, &c, &labels, 3).unwrap().value, 0.0);
    assert!(conditional_cross_cov(&x, &c, &labels, 3).unwrap().value.abs() < 1e-30);
}

#[test]
fn independent_samples_pass_permutation_test() {
    let rate = independence_pass_rate(20, 200, 200);
    assert!(rate >= 0.8, "pass rate {rate}");
}

#[test]
fn conditioning_removes_label_confounding() {
    let (cond, uncond) = label_confounded(5);
    assert!(cond * 5.0 <= uncond, "conditional {cond}, unconditional {uncond}");
}

#[test]
fn self_dependence_is_positive() {
    let x = normal(&mut seeded(6), 50, 1);
    let k = rbf_gram(&x, median_bandwidth(&x).unwrap()).unwrap();
    assert!(hsic_v(&k, &k).unwrap() > 0.0);
}

#[test]
fn independent_cross_covariance_is_small() {
    let mut rng = seeded(7);
    let a = normal(&mut rng, 500, 1);
    let b = normal(&mut rng, 500, 1);
    assert!(cross_cov(&a, &b).unwrap() < 0.05);
}

#[test]
fn tape_penalty_equals_standalone_estimate() {
    let mut rng = seeded(8);
    let phi = normal(&mut rng, 60, 2);
    let psi = normal(&mut rng, 60, 3);
    let labels: Vec<usize> = (0..60).map(|i| (i * 7) % 4).collect();
    for (penalty, direct) in [
        (CiPenalty::Hsic, conditional_hsic(&phi, &psi, &labels, 4).unwrap().value),
        (
            CiPenalty::Cov,
            conditional_cross_cov(&phi, &psi, &labels, 4).unwrap().value,
        ),
    ] {
        let mut tape = Tape::new();
        let a = tape.constant(phi.clone());
        let b = tape.constant(psi.clone());
        let (v, skipped) = conditional_penalty_on_tape(&mut tape, penalty, a, b, &labels, 4).unwrap();
        assert_eq!(skipped, 0);
        assert!((tape.value(v).item().unwrap() - direct).abs() < 1e-12, "{penalty:?}");
    }
}

#[test]
fn shuffled_labels_match_unconditional_on_average() {
    use rand::seq::SliceRandom;
    let mut rng = seeded(9);
    let x = normal(&mut rng, 200, 1);
    let noise = normal(&mut rng, 200, 1);
    let y = x.zip_map(&noise, |a, b| a + 0.5 * b).unwrap();
    // with noise labels every class slice is a random subsample; its
    // expected estimate is the unconditional one plus the small-sample
    // bias of the V-statistic, which grows as 1/n_k
    let mut labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
    let mut total = 0.0;
    for _ in 0..20 {
        labels.shuffle(&mut rng);
        total += conditional_hsic(&x, &y, &labels, 2).unwrap().value;
    }
    let shuffled = total / 20.0;
    let plain = hsic_median(&x, &y).unwrap();
    assert!((shuffled - plain).abs() / plain < 0.15, "{shuffled} vs {plain}");
}

#[test]
fn size_mismatch_and_degenerate_labels_error() {
    let a = Tensor::zeros(&[4, 1]);
    let b = Tensor::zeros(&[5, 1]);
    assert!(hsic_median(&a, &b).is_err());
    assert!(conditional_hsic(&a, &a, &[0, 1, 2, 3], 4).is_err());
}
