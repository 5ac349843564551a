//! Two-representation domain generalization: data generators, a small
//! reverse-mode differentiation engine, kernel independence penalties, the
//! composite objective, training, model selection and experiment running.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod scm;
pub mod selection;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use kernels::{CiPenalty, Gram};
pub use model::{ArchConfig, FeaturizerKind, Task, TcriModel};
pub use objectives::{LossBreakdown, TcriHyperParams, TrainingLog};
pub use scm::{ContinuousScmSpec, DomainDataset, SpuriousBinarySpec};
pub use selection::{Candidate, Strategy};
pub use tensor::Tensor;
pub use trainer::{Evaluation, TrainConfig};
