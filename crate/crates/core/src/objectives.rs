//! The four-term training objective and its baselines.
//!
//! Per training domain the objective is
//! `alpha * L_phi + (1 - alpha) * L_phi_psi + lambda * L_irm + beta * L_ci`,
//! and the total is the mean of that bracket over domains. ERM and IRM are
//! the same objective with some coefficients set to zero.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{linear_head_grad_norm, sigmoid, softplus, HeadLoss, NormKind, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{conditional_penalty_on_tape, CiPenalty};
use crate::model::{BoundModel, Representations, Task};
use crate::scm::{fmt_f64, DomainDataset};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcriHyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    #[serde(default = "default_penalty")]
    pub penalty: CiPenalty,
    #[serde(default = "default_norm")]
    pub irm_norm: NormKind,
    /// Number of quantile bins used as classes when the target is real.
    #[serde(default = "default_bins")]
    pub y_bins: usize,
}

fn default_penalty() -> CiPenalty {
    CiPenalty::Hsic
}

fn default_norm() -> NormKind {
    NormKind::L2
}

fn default_bins() -> usize {
    4
}

impl TcriHyperParams {
    pub fn erm() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            lambda: 0.0,
            penalty: CiPenalty::Hsic,
            irm_norm: NormKind::L2,
            y_bins: 4,
        }
    }

    pub fn irm() -> Self {
        Self {
            lambda: 0.1,
            ..Self::erm()
        }
    }

    pub fn tcri() -> Self {
        Self {
            alpha: 0.75,
            beta: 10.0,
            lambda: 0.1,
            ..Self::erm()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.y_bins == 0 {
            return Err(Error::Parameter("y_bins must be positive".into()));
        }
        Ok(())
    }

    /// Total order used for deterministic tie-breaking.
    pub fn cmp_key(&self, other: &Self) -> std::cmp::Ordering {
        self.alpha
            .total_cmp(&other.alpha)
            .then(self.beta.total_cmp(&other.beta))
            .then(self.lambda.total_cmp(&other.lambda))
            .then(self.penalty.cmp(&other.penalty))
            .then(self.irm_norm.cmp(&other.irm_norm))
            .then(self.y_bins.cmp(&other.y_bins))
    }
}

/// Loss terms of one domain.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainTerms {
    pub domain_id: String,
    pub l_phi: f64,
    pub l_phi_psi: f64,
    pub l_irm: f64,
    pub l_ci: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_phi: f64,
    pub l_phi_psi: f64,
    pub l_irm: f64,
    pub l_ci: f64,
    pub total: f64,
    pub per_domain: Vec<DomainTerms>,
    /// Conditioning classes left out of the CI average for having < 2 rows.
    pub ci_classes_skipped: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_phi, self.l_phi_psi, self.l_irm, self.l_ci, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Equal-count bins of real targets by rank; ties broken by row order.
pub fn quantile_bins(y: &[f64], bins: usize) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(Error::Parameter("bins must be positive".into()));
    }
    let n = y.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * bins / n;
    }
    Ok(out)
}

/// One training domain prepared as a full batch.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub domain_index: usize,
    pub domain_id: String,
    pub x: Tensor,
    /// Targets as an `[n, 1]` column.
    pub y: Tensor,
    /// Conditioning labels for the CI term.
    pub classes: Vec<usize>,
    pub num_classes: usize,
}

impl DomainBatch {
    pub fn new(ds: &DomainDataset, domain_index: usize, task: Task, y_bins: usize) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Shape(format!("domain {} is empty", ds.domain_id)));
        }
        let (classes, num_classes) = match task {
            Task::Binary => (ds.binary_labels()?, 2),
            Task::Regression => (quantile_bins(&ds.targets, y_bins)?, y_bins),
        };
        Ok(Self {
            domain_index,
            domain_id: ds.domain_id.clone(),
            x: ds.features.clone(),
            y: ds.targets_column(),
            classes,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// A batch recorded on a tape together with its representations.
#[derive(Clone, Copy, Debug)]
pub struct BatchVars {
    pub x: Var,
    pub y: Var,
    pub reps: Representations,
}

pub fn bind_batch(tape: &mut Tape, bound: &BoundModel, batch: &DomainBatch) -> Result<BatchVars> {
    let x = tape.constant(batch.x.clone());
    let y = tape.constant(batch.y.clone());
    let reps = bound.representations(tape, x)?;
    Ok(BatchVars { x, y, reps })
}

/// Mean squared error, or mean logistic loss on raw scores.
pub fn risk(predictions: &[f64], targets: &[f64], task: Task) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let n = predictions.len() as f64;
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(&s, &y)| match task {
            Task::Regression => (s - y) * (s - y),
            Task::Binary => softplus(s) - y * s,
        })
        .sum();
    Ok(total / n)
}

/// Probability of class 1 for a raw score.
pub fn predict_proba(score: f64) -> f64 {
    sigmoid(score)
}

pub fn risk_on_tape(tape: &mut Tape, scores: Var, targets: Var, task: Task) -> Result<Var> {
    let per_row = match task {
        Task::Regression => {
            let r = tape.sub(scores, targets)?;
            tape.square(r)
        }
        Task::Binary => {
            let sp = tape.softplus(scores);
            let ys = tape.mul(targets, scores)?;
            tape.sub(sp, ys)?
        }
    };
    tape.mean(per_row)
}

/// Risk of the test-time predictor `theta_c . phi`.
pub fn loss_phi(tape: &mut Tape, bound: &BoundModel, batch: &BatchVars, task: Task) -> Result<Var> {
    let scores = bound.general_scores(tape, batch.reps)?;
    risk_on_tape(tape, scores, batch.y, task)
}

/// Risk of one domain's predictor on `phi ⊕ psi`.
pub fn loss_phi_psi(tape: &mut Tape, bound: &BoundModel, batch: &BatchVars, task: Task, domain: usize) -> Result<Var> {
    let scores = bound.domain_scores(tape, batch.reps, domain)?;
    risk_on_tape(tape, scores, batch.y, task)
}

/// Norm of the gradient of the domain risk with respect to `theta_c`,
/// differentiable into the featurizer and `phi`.
pub fn loss_irm(tape: &mut Tape, bound: &BoundModel, batch: &BatchVars, task: Task, norm: NormKind) -> Result<Var> {
    let head = match task {
        Task::Regression => HeadLoss::Squared,
        Task::Binary => HeadLoss::Logistic,
    };
    linear_head_grad_norm(
        tape,
        batch.reps.phi,
        bound.theta_c.weight,
        bound.theta_c.bias,
        batch.y,
        head,
        norm,
    )
}

/// Class-conditional dependence between `phi` and `psi`. Returns the
/// penalty and the number of skipped classes.
pub fn loss_ci(tape: &mut Tape, batch: &BatchVars, data: &DomainBatch, penalty: CiPenalty) -> Result<(Var, usize)> {
    conditional_penalty_on_tape(
        tape,
        penalty,
        batch.reps.phi,
        batch.reps.psi,
        &data.classes,
        data.num_classes,
    )
}

/// Which terms to evaluate when their coefficient is zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZeroTerms {
    /// Evaluate them for the breakdown, detached from the gradient.
    Report,
    /// Skip them and report 0.
    Skip,
}

/// Mean over domains of the weighted four-term bracket.
pub fn tcri_total(
    tape: &mut Tape,
    bound: &BoundModel,
    batches: &[DomainBatch],
    hp: &TcriHyperParams,
    task: Task,
    zero_terms: ZeroTerms,
) -> Result<(Var, LossBreakdown)> {
    hp.validate()?;
    if batches.is_empty() {
        return Err(Error::Parameter("no training domains".into()));
    }
    let mut domain_totals = Vec::with_capacity(batches.len());
    let mut per_domain = Vec::with_capacity(batches.len());
    let mut skipped = 0;
    for data in batches {
        let bv = bind_batch(tape, bound, data)?;
        let detached = BatchVars {
            reps: Representations {
                phi: tape.detach(bv.reps.phi),
                psi: tape.detach(bv.reps.psi),
            },
            ..bv
        };
        let mut weighted: Vec<Var> = Vec::with_capacity(4);
        let mut values = [0.0; 4];

        let coefs = [hp.alpha, 1.0 - hp.alpha, hp.lambda, hp.beta];
        for (k, &c) in coefs.iter().enumerate() {
            let active = c != 0.0;
            if !active && zero_terms == ZeroTerms::Skip {
                continue;
            }
            let vars = if active { &bv } else { &detached };
            let term = match k {
                0 => loss_phi(tape, bound, vars, task)?,
                1 => loss_phi_psi(tape, bound, vars, task, data.domain_index)?,
                2 => loss_irm(tape, bound, vars, task, hp.irm_norm)?,
                _ => {
                    let (v, s) = loss_ci(tape, vars, data, hp.penalty)?;
                    skipped += s;
                    v
                }
            };
            values[k] = tape.value(term).item()?;
            if active {
                weighted.push(tape.scale(term, c));
            }
        }
        let mut total = match weighted.first() {
            Some(&v) => v,
            None => tape.constant(Tensor::scalar(0.0)),
        };
        for &w in weighted.iter().skip(1) {
            total = tape.add(total, w)?;
        }
        let bracket = tape.value(total).item()?;
        per_domain.push(DomainTerms {
            domain_id: data.domain_id.clone(),
            l_phi: values[0],
            l_phi_psi: values[1],
            l_irm: values[2],
            l_ci: values[3],
            total: bracket,
        });
        domain_totals.push(total);
    }
    let mut sum = domain_totals[0];
    for &t in &domain_totals[1..] {
        sum = tape.add(sum, t)?;
    }
    let e = batches.len() as f64;
    let total = tape.scale(sum, 1.0 / e);
    let mean = |f: fn(&DomainTerms) -> f64| per_domain.iter().map(f).sum::<f64>() / e;
    let breakdown = LossBreakdown {
        l_phi: mean(|d| d.l_phi),
        l_phi_psi: mean(|d| d.l_phi_psi),
        l_irm: mean(|d| d.l_irm),
        l_ci: mean(|d| d.l_ci),
        total: tape.value(total).item()?,
        per_domain,
        ci_classes_skipped: skipped,
    };
    Ok((total, breakdown))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub domain_id: String,
    pub l_phi: f64,
    pub l_phi_psi: f64,
    pub l_irm: f64,
    pub l_ci: f64,
    pub total: f64,
    pub wall_clock_ms: Option<f64>,
}

/// Per-step loss records. Each logged step contributes one row per domain
/// and one row with domain id `mean`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    pub wall_clock: bool,
}

pub const LOG_MEAN_ROW: &str = "mean";

impl TrainingLog {
    pub fn record(&mut self, step: usize, breakdown: &LossBreakdown, wall_clock_ms: Option<f64>) {
        let wall = if self.wall_clock { wall_clock_ms } else { None };
        for d in &breakdown.per_domain {
            self.rows.push(LogRow {
                step,
                domain_id: d.domain_id.clone(),
                l_phi: d.l_phi,
                l_phi_psi: d.l_phi_psi,
                l_irm: d.l_irm,
                l_ci: d.l_ci,
                total: d.total,
                wall_clock_ms: wall,
            });
        }
        self.rows.push(LogRow {
            step,
            domain_id: LOG_MEAN_ROW.into(),
            l_phi: breakdown.l_phi,
            l_phi_psi: breakdown.l_phi_psi,
            l_irm: breakdown.l_irm,
            l_ci: breakdown.l_ci,
            total: breakdown.total,
            wall_clock_ms: wall,
        });
    }

    /// Totals of the `mean` rows, in step order.
    pub fn totals(&self) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.domain_id == LOG_MEAN_ROW)
            .map(|r| (r.step, r.total))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["step", "domain_id", "l_phi", "l_phi_psi", "l_irm", "l_ci", "total"];
        if self.wall_clock {
            header.push("wall_clock_ms");
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.step.to_string(),
                r.domain_id.clone(),
                fmt_f64(r.l_phi),
                fmt_f64(r.l_phi_psi),
                fmt_f64(r.l_irm),
                fmt_f64(r.l_ci),
                fmt_f64(r.total),
            ];
            if self.wall_clock {
                rec.push(r.wall_clock_ms.map(|v| format!("{v:.3}")).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<training log>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}
