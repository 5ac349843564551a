//! Fixtures shared by the benchmarks.

use tcri_core::rng::seeded;
use tcri_core::scm::sample_spurious_binary;
use tcri_core::{ArchConfig, DomainDataset, FeaturizerKind, SpuriousBinarySpec, Task, TcriModel, Tensor};

use rand_distr::{Distribution, StandardNormal};

/// An `n x d` matrix of standard normal draws.
pub fn normal_matrix(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(vec![n, d], data).expect("shape matches data")
}

pub fn colored_domains(n: usize) -> Vec<DomainDataset> {
    [0.1, 0.2]
        .iter()
        .enumerate()
        .map(|(i, &flip)| {
            sample_spurious_binary(&SpuriousBinarySpec {
                flip_prob: flip,
                n_samples: n,
                seed: i as u64,
                ..Default::default()
            })
            .expect("valid spec")
        })
        .collect()
}

pub fn mlp(input_dim: usize, num_domains: usize) -> TcriModel {
    let arch = ArchConfig {
        input_dim,
        featurizer: FeaturizerKind::Mlp,
        hidden_dim: 64,
        phi_dim: 32,
        psi_dim: 32,
        num_domains,
        task: Task::Binary,
        bias: true,
        theta_c_fixed: None,
    };
    TcriModel::init(&arch, 0).expect("valid architecture")
}
