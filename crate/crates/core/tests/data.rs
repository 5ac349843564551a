use tcri_core::harness::oracle_coefficient;
use tcri_core::scm::{
    lemma1_closed_form, make_worst_case_split, sample_continuous_scm, sample_lemma1_counterexample,
    sample_spurious_binary, split_train_val,
};
use tcri_core::{ContinuousScmSpec, DomainDataset, SpuriousBinarySpec, Tensor};

fn continuous(sigma: f64, n: usize, seed: u64) -> DomainDataset {
    sample_continuous_scm(&ContinuousScmSpec {
        sigma_c: sigma,
        sigma_eta: sigma,
        n_samples: n,
        seed,
    })
    .unwrap()
}

fn binary(flip: f64, noise: f64, n: usize, seed: u64) -> DomainDataset {
    sample_spurious_binary(&SpuriousBinarySpec {
        flip_prob: flip,
        label_noise: noise,
        n_samples: n,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn column(t: &Tensor, c: usize) -> Vec<f64> {
    (0..t.rows()).map(|i| t.get(i, c)).collect()
}

#[test]
fn same_spec_same_bits() {
    assert_eq!(continuous(0.5, 200, 9), continuous(0.5, 200, 9));
    assert_eq!(binary(0.2, 0.25, 200, 9), binary(0.2, 0.25, 200, 9));
    assert_ne!(continuous(0.5, 200, 9), continuous(0.5, 200, 10));
}

#[test]
fn causal_latent_mean_is_the_scale() {
    let ds = continuous(0.1, 1000, 3);
    let zc = column(ds.latent_causal.as_ref().unwrap(), 0);
    let mean = zc.iter().sum::<f64>() / zc.len() as f64;
    // Exp(scale) has standard deviation equal to its scale
    let se = 0.1 / (zc.len() as f64).sqrt();
    assert!((mean - 0.1).abs() < 3.0 * se, "mean {mean}");
}

#[test]
fn target_dominates_causal_latent() {
    for seed in 0..5 {
        let ds = continuous(1.0, 300, seed);
        let zc = column(ds.latent_causal.as_ref().unwrap(), 0);
        assert!(ds.targets.iter().zip(&zc).all(|(y, c)| y >= c));
        // X = [z_c, z_e]
        let ze = column(ds.latent_spurious.as_ref().unwrap(), 0);
        assert_eq!(column(&ds.features, 0), zc);
        assert_eq!(column(&ds.features, 1), ze);
    }
}

#[test]
fn oracle_coefficient_near_reported_value() {
    let ds = continuous(1.0, 1000, 0);
    let c = oracle_coefficient(&[ds]).unwrap();
    assert!((c - 1.13).abs() < 0.05, "oracle coefficient {c}");
}

fn agreement(ds: &DomainDataset) -> f64 {
    let ze = ds.latent_spurious.as_ref().unwrap();
    let hits = (0..ds.len())
        .filter(|&i| (ze.get(i, 0) > 0.0) == (ds.targets[i] > 0.5))
        .count();
    hits as f64 / ds.len() as f64
}

#[test]
fn flip_probability_controls_spurious_agreement() {
    let lo = agreement(&binary(0.1, 0.25, 10_000, 1));
    let hi = agreement(&binary(0.9, 0.25, 10_000, 2));
    assert!((lo - 0.9).abs() < 0.015, "{lo}");
    assert!((hi - 0.1).abs() < 0.015, "{hi}");
    let half = agreement(&binary(0.5, 0.25, 10_000, 3));
    assert!((half - 0.5).abs() < 0.02, "{half}");
    assert_eq!(agreement(&binary(0.0, 0.0, 500, 4)), 1.0);
}

#[test]
fn causal_block_alone_is_near_the_noise_ceiling() {
    let ds = binary(0.5, 0.25, 20_000, 5);
    let zc = ds.latent_causal.as_ref().unwrap();
    let hits = (0..ds.len())
        .filter(|&i| (zc.row(i).iter().sum::<f64>() > 0.0) == (ds.targets[i] > 0.5))
        .count();
    let acc = hits as f64 / ds.len() as f64;
    assert!((acc - 0.75).abs() < 0.02, "causal-only accuracy {acc}");
}

#[test]
fn worst_case_split_reverses_pool_association() {
    let a = binary(0.1, 0.25, 300, 11);
    let b = binary(0.1, 0.25, 200, 12);
    let (first, second) = make_worst_case_split(&a, &b).unwrap();
    assert_eq!(first.len() + second.len(), a.len() + b.len());
    // rows keep their feature values; use the first causal coordinate as a
    // fingerprint to show no row is dropped or duplicated
    let mut all: Vec<u64> = first
        .features
        .data()
        .chunks(10)
        .chain(second.features.data().chunks(10))
        .map(|r| r[0].to_bits())
        .collect();
    let mut orig: Vec<u64> = a
        .features
        .data()
        .chunks(10)
        .chain(b.features.data().chunks(10))
        .map(|r| r[0].to_bits())
        .collect();
    all.sort_unstable();
    orig.sort_unstable();
    assert_eq!(all, orig);

    // a pool tag: +1 for rows from pool a, -1 for pool b
    let tag = |ds: &DomainDataset, from_a_class: f64| -> Vec<(f64, f64)> {
        ds.targets
            .iter()
            .map(|&y| (if y == from_a_class { 1.0 } else { -1.0 }, y))
            .collect()
    };
    let corr = |pairs: &[(f64, f64)]| -> f64 {
        let n = pairs.len() as f64;
        let (mt, my) = pairs.iter().fold((0.0, 0.0), |(a, b), (t, y)| (a + t / n, b + y / n));
        let cov: f64 = pairs.iter().map(|(t, y)| (t - mt) * (y - my)).sum::<f64>() / n;
        let vt: f64 = pairs.iter().map(|(t, _)| (t - mt).powi(2)).sum::<f64>() / n;
        let vy: f64 = pairs.iter().map(|(_, y)| (y - my).powi(2)).sum::<f64>() / n;
        cov / (vt * vy).sqrt()
    };
    let c1 = corr(&tag(&first, 1.0));
    let c2 = corr(&tag(&second, 0.0));
    assert!((c1 + c2).abs() < 1e-12 && c1 > 0.99, "{c1} {c2}");
    // a tag classifier fit on the first output inverts on the second
    let acc2 = tag(&second, 0.0)
        .iter()
        .filter(|(t, y)| (*t > 0.0) == (*y > 0.5))
        .count() as f64
        / second.len() as f64;
    assert!(acc2 < 0.5);
}

#[test]
fn circle_area_fraction() {
    let ds = sample_lemma1_counterexample(0.0, 0.0, 1.0, 200_000, 4).unwrap();
    let inside = ds.targets.iter().filter(|&&y| y == 0.0).count() as f64 / ds.len() as f64;
    assert!((inside - std::f64::consts::FRAC_PI_4).abs() < 0.005, "{inside}");
    assert!((lemma1_closed_form(0.0, 0.0, 1.0) - 1.0).abs() < 1e-15);
}

#[test]
fn conditional_on_z1_differs_across_offsets() {
    let window = |d2: f64, seed: u64| -> (f64, f64) {
        let ds = sample_lemma1_counterexample(0.0, d2, 1.0, 100_000, seed).unwrap();
        let (mut c, mut ones) = (0.0, 0.0);
        for i in 0..ds.len() {
            if ds.features.get(i, 0).abs() < 0.05 {
                c += 1.0;
                ones += ds.targets[i];
            }
        }
        let p = ones / c;
        (p, (p * (1.0 - p) / c).sqrt())
    };
    let (p0, s0) = window(0.0, 1);
    let (p1, s1) = window(0.5, 2);
    assert!((p0 - p1).abs() > 3.0 * (s0 * s0 + s1 * s1).sqrt(), "{p0} vs {p1}");
}

#[test]
fn train_val_split_sizes_and_determinism() {
    let ds = continuous(1.0, 10, 0);
    let (tr, va) = split_train_val(&ds, 0.8, 5).unwrap();
    assert_eq!((tr.len(), va.len()), (8, 2));
    let (tr2, va2) = split_train_val(&ds, 0.8, 5).unwrap();
    assert_eq!((tr, va), (tr2, va2));
}

#[test]
fn dataset_csv_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = binary(0.2, 0.25, 50, 8);
    let path = dir.path().join("d.csv");
    ds.save_csv(&path).unwrap();
    assert_eq!(DomainDataset::load_csv(&path).unwrap(), ds);
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(sample_continuous_scm(&ContinuousScmSpec {
        sigma_c: 0.0,
        sigma_eta: 1.0,
        n_samples: 10,
        seed: 0
    })
    .is_err());
    assert!(sample_spurious_binary(&SpuriousBinarySpec {
        flip_prob: 1.5,
        ..Default::default()
    })
    .is_err());
    assert!(sample_lemma1_counterexample(0.0, 0.0, 0.0, 10, 0).is_err());
}
