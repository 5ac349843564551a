use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::NormKind;
use crate::error::{Error, Result};
use crate::kernels::CiPenalty;
use crate::model::{ArchConfig, FeaturizerKind, Task};
use crate::objectives::TcriHyperParams;
use crate::rng::derive_seed;
use crate::scm::{
    make_worst_case_split, sample_continuous_scm, sample_lemma1_counterexample, sample_spurious_binary,
    ContinuousScmSpec, DomainDataset, SpuriousBinarySpec,
};
use crate::selection::Strategy;
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Each listed domain is held out in turn; the rest are trained on.
    LeaveOneOut,
    /// The listed domains are held out together.
    FixedHoldout,
    /// Train on every domain and report the learned `phi` entries.
    Table1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryPool {
    pub flip_prob: f64,
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
    pub n_samples: usize,
    #[serde(default = "default_dim")]
    pub causal_dim: usize,
    #[serde(default = "default_dim")]
    pub spurious_dim: usize,
    #[serde(default = "default_separation")]
    pub class_separation: f64,
}

fn default_label_noise() -> f64 {
    0.25
}

fn default_dim() -> usize {
    5
}

fn default_separation() -> f64 {
    1.0
}

impl BinaryPool {
    fn spec(&self, seed: u64) -> SpuriousBinarySpec {
        SpuriousBinarySpec {
            flip_prob: self.flip_prob,
            label_noise: self.label_noise,
            n_samples: self.n_samples,
            causal_dim: self.causal_dim,
            spurious_dim: self.spurious_dim,
            class_separation: self.class_separation,
            seed,
        }
    }
}

/// One entry of a scenario's domain list. A worst-case pair expands to two
/// domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DomainSpec {
    Continuous {
        sigma_c: f64,
        sigma_eta: f64,
        n_samples: usize,
        #[serde(default)]
        id: Option<String>,
    },
    SpuriousBinary {
        flip_prob: f64,
        #[serde(default = "default_label_noise")]
        label_noise: f64,
        n_samples: usize,
        #[serde(default = "default_dim")]
        causal_dim: usize,
        #[serde(default = "default_dim")]
        spurious_dim: usize,
        #[serde(default = "default_separation")]
        class_separation: f64,
        #[serde(default)]
        id: Option<String>,
    },
    WorstCasePair {
        pool_a: BinaryPool,
        pool_b: BinaryPool,
    },
    Lemma1 {
        d1: f64,
        d2: f64,
        r: f64,
        n_samples: usize,
        #[serde(default)]
        id: Option<String>,
    },
}

impl DomainSpec {
    fn task(&self) -> Task {
        match self {
            DomainSpec::Continuous { .. } => Task::Regression,
            _ => Task::Binary,
        }
    }

    fn count(&self) -> usize {
        match self {
            DomainSpec::WorstCasePair { .. } => 2,
            _ => 1,
        }
    }

    fn generate(&self, seed: u64) -> Result<Vec<DomainDataset>> {
        let named = |ds: DomainDataset, id: &Option<String>| match id {
            Some(id) => ds.with_id(id.clone()),
            None => ds,
        };
        Ok(match self {
            DomainSpec::Continuous {
                sigma_c,
                sigma_eta,
                n_samples,
                id,
            } => vec![named(
                sample_continuous_scm(&ContinuousScmSpec {
                    sigma_c: *sigma_c,
                    sigma_eta: *sigma_eta,
                    n_samples: *n_samples,
                    seed,
                })?,
                id,
            )],
            DomainSpec::SpuriousBinary {
                flip_prob,
                label_noise,
                n_samples,
                causal_dim,
                spurious_dim,
                class_separation,
                id,
            } => {
                let pool = BinaryPool {
                    flip_prob: *flip_prob,
                    label_noise: *label_noise,
                    n_samples: *n_samples,
                    causal_dim: *causal_dim,
                    spurious_dim: *spurious_dim,
                    class_separation: *class_separation,
                };
                vec![named(sample_spurious_binary(&pool.spec(seed))?, id)]
            }
            DomainSpec::WorstCasePair { pool_a, pool_b } => {
                let a = sample_spurious_binary(&pool_a.spec(derive_seed(seed, &[0])))?;
                let b = sample_spurious_binary(&pool_b.spec(derive_seed(seed, &[1])))?;
                let (x, y) = make_worst_case_split(&a, &b)?;
                vec![x, y]
            }
            DomainSpec::Lemma1 {
                d1,
                d2,
                r,
                n_samples,
                id,
            } => vec![named(sample_lemma1_counterexample(*d1, *d2, *r, *n_samples, seed)?, id)],
        })
    }
}

/// Model shape options; input width, head count and task come from data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub featurizer: FeaturizerKind,
    #[serde(default)]
    pub hidden_dim: usize,
    pub phi_dim: usize,
    pub psi_dim: usize,
    #[serde(default = "default_true")]
    pub bias: bool,
    #[serde(default)]
    pub theta_c_fixed: Option<f64>,
}

fn default_true() -> bool {
    true
}

/// One grid point. Unset coefficients fall back to the named preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpPoint {
    /// Selection and reporting group.
    pub algorithm: String,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub penalty: Option<CiPenalty>,
    #[serde(default)]
    pub irm_norm: Option<NormKind>,
    #[serde(default)]
    pub y_bins: Option<usize>,
}

impl HpPoint {
    pub fn resolve(&self) -> Result<TcriHyperParams> {
        let base = match self.preset.as_deref() {
            None | Some("erm") => TcriHyperParams::erm(),
            Some("irm") => TcriHyperParams::irm(),
            Some("tcri") => TcriHyperParams::tcri(),
            Some(other) => return Err(Error::Parameter(format!("unknown preset {other:?}"))),
        };
        let hp = TcriHyperParams {
            alpha: self.alpha.unwrap_or(base.alpha),
            beta: self.beta.unwrap_or(base.beta),
            lambda: self.lambda.unwrap_or(base.lambda),
            penalty: self.penalty.unwrap_or(base.penalty),
            irm_norm: self.irm_norm.unwrap_or(base.irm_norm),
            y_bins: self.y_bins.unwrap_or(base.y_bins),
        };
        hp.validate()?;
        Ok(hp)
    }
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub protocol: Protocol,
    pub trials: usize,
    /// Domains to hold out. Leave-one-out defaults to all of them.
    #[serde(default)]
    pub held_out: Vec<usize>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_strategies")]
    pub selection_strategies: Vec<Strategy>,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub domains: Vec<DomainSpec>,
    pub hp_grid: Vec<HpPoint>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let sc: Scenario = toml::from_str(text).map_err(|e| Error::parse("scenario", e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("scenario", e.to_string()))
    }

    pub fn num_domains(&self) -> usize {
        self.domains.iter().map(DomainSpec::count).sum()
    }

    pub fn task(&self) -> Task {
        self.domains.first().map(DomainSpec::task).unwrap_or(Task::Binary)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.domains.is_empty() {
            return bad("scenario has no domains".into());
        }
        if self.hp_grid.is_empty() {
            return bad("hp_grid is empty".into());
        }
        let task = self.task();
        if self.domains.iter().any(|d| d.task() != task) {
            return bad("domains mix regression and classification".into());
        }
        for hp in &self.hp_grid {
            hp.resolve()?;
        }
        self.train.validate()?;
        let n = self.num_domains();
        if let Some(&i) = self.held_out.iter().find(|&&i| i >= n) {
            return bad(format!("held_out index {i} but only {n} domains"));
        }
        match self.protocol {
            Protocol::LeaveOneOut if n < 2 => return bad("leave-one-out needs at least 2 domains".into()),
            Protocol::FixedHoldout if self.held_out.is_empty() || self.held_out.len() >= n => {
                return bad("fixed-holdout needs a nonempty held_out list that leaves a training domain".into());
            }
            _ => {}
        }
        if self.protocol != Protocol::Table1 && !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if self.selection_strategies.is_empty() && self.protocol != Protocol::Table1 {
            return bad("no selection strategies".into());
        }
        Ok(())
    }

    /// Held-out domain indices in evaluation order.
    pub fn held_out_domains(&self) -> Vec<usize> {
        match self.protocol {
            Protocol::Table1 => Vec::new(),
            Protocol::LeaveOneOut if self.held_out.is_empty() => (0..self.num_domains()).collect(),
            _ => self.held_out.clone(),
        }
    }

    pub fn arch_config(&self, input_dim: usize, num_domains: usize) -> ArchConfig {
        ArchConfig {
            input_dim,
            featurizer: self.arch.featurizer,
            hidden_dim: self.arch.hidden_dim,
            phi_dim: self.arch.phi_dim,
            psi_dim: self.arch.psi_dim,
            num_domains,
            task: self.task(),
            bias: self.arch.bias,
            theta_c_fixed: self.arch.theta_c_fixed,
        }
    }

    /// Seed of one trial; data, splits and initial weights derive from it.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        derive_seed(self.seed, &[trial as u64])
    }

    /// Every domain of one trial. Depends only on the scenario seed and
    /// the trial, never on the hyperparameters or the held-out domain.
    pub fn generate_domains(&self, trial: usize) -> Result<Vec<DomainDataset>> {
        let ts = self.trial_seed(trial);
        let mut out = Vec::with_capacity(self.num_domains());
        for (i, spec) in self.domains.iter().enumerate() {
            out.extend(spec.generate(derive_seed(ts, &[SEED_DATA, i as u64]))?);
        }
        Ok(out)
    }
}

pub(crate) const SEED_DATA: u64 = 1;
pub(crate) const SEED_SPLIT: u64 = 2;
pub(crate) const SEED_INIT: u64 = 3;

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
name = "tiny"
protocol = "leave-one-out"
trials = 1

[arch]
featurizer = "identity"
phi_dim = 1
psi_dim = 1

[train]
learning_rate = 0.1
max_steps = 5

[[domains]]
kind = "spurious-binary"
flip_prob = 0.1
n_samples = 40

[[domains]]
kind = "spurious-binary"
flip_prob = 0.9
n_samples = 40

[[hp_grid]]
algorithm = "tcri"
preset = "tcri"
beta = 1.0
"#;

    #[test]
    fn parses_and_resolves_presets() {
        let sc = Scenario::from_toml(MINIMAL).unwrap();
        assert_eq!(sc.num_domains(), 2);
        assert_eq!(sc.held_out_domains(), vec![0, 1]);
        let hp = sc.hp_grid[0].resolve().unwrap();
        assert_eq!((hp.alpha, hp.beta, hp.lambda), (0.75, 1.0, 0.1));
        assert_eq!(sc.selection_strategies.len(), 3);
    }

    #[test]
    fn rejects_unknown_schema_and_fields() {
        let v2 = MINIMAL.replace("schema_version = 1", "schema_version = 2");
        assert!(Scenario::from_toml(&v2).is_err());
        let extra = MINIMAL.replace("trials = 1", "trials = 1\nepochs = 3");
        assert!(matches!(Scenario::from_toml(&extra), Err(Error::Parse { .. })));
    }

    #[test]
    fn toml_round_trip() {
        let sc = Scenario::from_toml(MINIMAL).unwrap();
        assert_eq!(Scenario::from_toml(&sc.to_toml().unwrap()).unwrap(), sc);
    }

    #[test]
    fn data_depends_only_on_seed_and_trial() {
        let sc = Scenario::from_toml(MINIMAL).unwrap();
        assert_eq!(sc.generate_domains(0).unwrap(), sc.generate_domains(0).unwrap());
        assert_ne!(sc.generate_domains(0).unwrap(), sc.generate_domains(1).unwrap());
    }
}
