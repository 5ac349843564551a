//! Full-batch gradient descent over training domains.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{Task, TcriModel, Trainable};
use crate::objectives::{risk, tcri_total, DomainBatch, LossBreakdown, TcriHyperParams, TrainingLog, ZeroTerms};
use crate::scm::DomainDataset;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Replace each domain head by its least-squares fit before every step
    /// (regression only).
    #[serde(default)]
    pub ols_inner: bool,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Adds a wall-clock column to the training log. Off by default so logs
    /// are reproducible byte for byte.
    #[serde(default)]
    pub wall_clock: bool,
}

fn default_log_every() -> usize {
    10
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            max_steps: 1000,
            ols_inner: false,
            grad_clip: None,
            seed: 0,
            log_every: 10,
            wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning_rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Parameter("max_steps must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Parameter("log_every must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Parameter(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TcriModel,
    pub log: TrainingLog,
    /// Objective at the final parameters.
    pub final_breakdown: LossBreakdown,
}

/// Minimum-norm least-squares solution of `design * w ≈ targets`.
pub fn ols_solve(design: &Tensor, targets: &[f64]) -> Result<Vec<f64>> {
    let (n, d) = design.require_matrix("ols design")?;
    if n == 0 {
        return Err(Error::Shape("ols needs at least one row".into()));
    }
    if targets.len() != n {
        return Err(Error::Shape(format!("{n} design rows, {} targets", targets.len())));
    }
    if !design.is_finite() || targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ols input".into()));
    }
    let a = DMatrix::from_row_slice(n, d, design.data());
    let b = DVector::from_column_slice(targets);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = smax * n.max(d) as f64 * f64::EPSILON;
    let w = svd.solve(&b, eps).map_err(|e| Error::Degenerate(format!("ols: {e}")))?;
    Ok(w.iter().copied().collect())
}

fn domain_batches(model: &TcriModel, domains: &[DomainDataset], hp: &TcriHyperParams) -> Result<Vec<DomainBatch>> {
    domains
        .iter()
        .enumerate()
        .map(|(i, d)| DomainBatch::new(d, i, model.task, hp.y_bins))
        .collect()
}

/// Sets every domain head to the least-squares fit on `phi ⊕ psi`.
fn solve_domain_heads(model: &mut TcriModel, batches: &[DomainBatch]) -> Result<()> {
    for b in batches {
        let (z, p) = model.representations(&b.x)?;
        let has_bias = model.theta_domains[b.domain_index].bias.is_some();
        let mut cols = vec![&z, &p];
        let ones = Tensor::filled(&[z.rows(), 1], 1.0);
        if has_bias {
            cols.push(&ones);
        }
        let design = Tensor::concat_cols(&cols)?;
        let w = ols_solve(&design, b.y.data())?;
        let head = &mut model.theta_domains[b.domain_index];
        let k = head.weight.rows();
        head.weight = Tensor::new(vec![k, 1], w[..k].to_vec())?;
        if let Some(bias) = head.bias.as_mut() {
            *bias = Tensor::new(vec![1], vec![w[k]])?;
        }
    }
    Ok(())
}

/// Objective value at the current parameters without taking a step.
pub fn objective(model: &TcriModel, domains: &[DomainDataset], hp: &TcriHyperParams) -> Result<LossBreakdown> {
    let batches = domain_batches(model, domains, hp)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::NONE);
    Ok(tcri_total(&mut tape, &bound, &batches, hp, model.task, ZeroTerms::Report)?.1)
}

/// Trains `model` on `domains`, one full batch per domain per step.
pub fn train(
    mut model: TcriModel,
    domains: &[DomainDataset],
    hp: &TcriHyperParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    hp.validate()?;
    if domains.is_empty() {
        return Err(Error::Parameter("no training domains".into()));
    }
    if domains.len() != model.num_domains() {
        return Err(Error::Parameter(format!(
            "model has {} domain heads for {} domains",
            model.num_domains(),
            domains.len()
        )));
    }
    let batches = domain_batches(&model, domains, hp)?;
    let ols = cfg.ols_inner && model.supports_ols_heads();
    let trainable = Trainable {
        theta_domains: !ols,
        ..Trainable::ALL
    };
    let mut log = TrainingLog {
        wall_clock: cfg.wall_clock,
        ..Default::default()
    };
    let started = Instant::now();
    let mut last_finite: Option<LossBreakdown> = None;
    let diverged = |step: usize, reason: String, last: &Option<LossBreakdown>| Error::Diverged {
        step,
        reason,
        last_finite: last.clone().map(Box::new),
    };

    for step in 0..=cfg.max_steps {
        if ols {
            solve_domain_heads(&mut model, &batches)?;
        }
        let logging = step % cfg.log_every == 0 || step == cfg.max_steps;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, trainable);
        let zero_terms = if logging { ZeroTerms::Report } else { ZeroTerms::Skip };
        let (total, breakdown) =
            tcri_total(&mut tape, &bound, &batches, hp, model.task, zero_terms).map_err(|e| match e {
                Error::NonFinite(m) | Error::Domain(m) => diverged(step, m, &last_finite),
                other => other,
            })?;
        if !breakdown.is_finite() {
            return Err(diverged(step, "non-finite objective".into(), &last_finite));
        }
        if logging {
            let ms = cfg.wall_clock.then(|| started.elapsed().as_secs_f64() * 1e3);
            log.record(step, &breakdown, ms);
        }
        if step == cfg.max_steps {
            return Ok(TrainOutcome {
                model,
                log,
                final_breakdown: breakdown,
            });
        }
        last_finite = Some(breakdown);

        let grads = tape.backward(total)?;
        let mut named = model.collect_gradients(&tape, &bound, &grads);
        let gnorm = named
            .iter()
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !gnorm.is_finite() {
            return Err(diverged(step, "non-finite gradient".into(), &last_finite));
        }
        let scale = match cfg.grad_clip {
            Some(c) if gnorm > c => c / gnorm,
            _ => 1.0,
        };
        for (name, g) in named.drain(..) {
            let p = model
                .param_mut(&name)
                .ok_or_else(|| Error::Parameter(format!("unknown parameter {name}")))?;
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= cfg.learning_rate * scale * d;
            }
            if !p.is_finite() {
                return Err(diverged(
                    step,
                    format!("parameter {name} became non-finite"),
                    &last_finite,
                ));
            }
        }
    }
    unreachable!("loop returns at the final step")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub risk: f64,
    pub accuracy: Option<f64>,
}

/// Risk and accuracy of the test-time predictor. A score above zero
/// predicts class 1.
pub fn evaluate(model: &TcriModel, ds: &DomainDataset) -> Result<Evaluation> {
    let scores = model.forward_general(&ds.features)?;
    let r = risk(&scores, &ds.targets, model.task)?;
    let accuracy = match model.task {
        Task::Regression => None,
        Task::Binary => {
            let labels = ds.binary_labels()?;
            let hits = scores
                .iter()
                .zip(&labels)
                .filter(|(&s, &l)| usize::from(s > 0.0) == l)
                .count();
            Some(hits as f64 / labels.len() as f64)
        }
    };
    Ok(Evaluation { risk: r, accuracy })
}
