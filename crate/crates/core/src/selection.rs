//! Choosing one model out of a sweep.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{TcriModel, Trainable};
use crate::objectives::{bind_batch, loss_ci, DomainBatch, TcriHyperParams};
use crate::scm::DomainDataset;
use crate::trainer::evaluate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Lowest conditional-independence score on validation data.
    Ci,
    /// Highest validation accuracy (lowest validation risk for regression).
    ValAcc,
    /// Highest accuracy on the held-out domain itself (lowest risk for
    /// regression).
    Oracle,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Ci, Strategy::ValAcc, Strategy::Oracle];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Ci => "ci",
            Strategy::ValAcc => "val-acc",
            Strategy::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown strategy {s:?} (expected ci, val-acc or oracle)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValMetrics {
    pub val_risk: f64,
    pub val_accuracy: Option<f64>,
    pub ci_score: f64,
}

#[derive(Clone, Debug)]
pub struct Candidate {
    pub model: TcriModel,
    pub hp: TcriHyperParams,
    pub trial_seed: u64,
    pub val_metrics: ValMetrics,
    pub checkpoint_path: String,
}

/// The fields selection looks at, detached from the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub hp: TcriHyperParams,
    pub trial_seed: u64,
    pub val_risk: f64,
    pub val_accuracy: Option<f64>,
    pub ci_score: f64,
    pub oracle_accuracy: Option<f64>,
}

/// Mean over validation domains of the class-conditional penalty between
/// the two representations.
pub fn ci_score(model: &TcriModel, val: &[DomainDataset], hp: &TcriHyperParams) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Parameter("ci_score needs at least one validation domain".into()));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::NONE);
    let mut total = 0.0;
    for (i, ds) in val.iter().enumerate() {
        let batch = DomainBatch::new(ds, i, model.task, hp.y_bins)?;
        let vars = bind_batch(&mut tape, &bound, &batch)?;
        let (v, _) = loss_ci(&mut tape, &vars, &batch, hp.penalty)?;
        total += tape.value(v).item()?;
    }
    Ok((total / val.len() as f64).max(0.0))
}

/// Validation risk, accuracy and CI score, each averaged over domains.
pub fn validation_metrics(model: &TcriModel, val: &[DomainDataset], hp: &TcriHyperParams) -> Result<ValMetrics> {
    if val.is_empty() {
        return Err(Error::Parameter("no validation domains".into()));
    }
    let mut risk = 0.0;
    let mut acc = 0.0;
    let mut has_acc = true;
    for ds in val {
        let e = evaluate(model, ds)?;
        risk += e.risk;
        match e.accuracy {
            Some(a) => acc += a,
            None => has_acc = false,
        }
    }
    let k = val.len() as f64;
    Ok(ValMetrics {
        val_risk: risk / k,
        val_accuracy: has_acc.then_some(acc / k),
        ci_score: ci_score(model, val, hp)?,
    })
}

fn tie_break(a: &Scored, b: &Scored) -> Ordering {
    a.trial_seed.cmp(&b.trial_seed).then_with(|| a.hp.cmp_key(&b.hp))
}

fn metric(s: &Scored, strategy: Strategy) -> Result<f64> {
    // larger is better
    Ok(match strategy {
        Strategy::Ci => -s.ci_score,
        Strategy::ValAcc => match s.val_accuracy {
            Some(a) => a,
            None => -s.val_risk,
        },
        Strategy::Oracle => s
            .oracle_accuracy
            .ok_or_else(|| Error::Parameter("oracle selection needs held-out accuracy".into()))?,
    })
}

/// Index of the winner under `strategy`. Ties go to the lowest trial seed,
/// then the smallest hyperparameters; the result does not depend on the
/// order of `scored`.
pub fn select_index(scored: &[Scored], strategy: Strategy) -> Result<usize> {
    if scored.is_empty() {
        return Err(Error::Parameter("no candidates to select from".into()));
    }
    let mut best = 0;
    let mut best_metric = metric(&scored[0], strategy)?;
    for (i, s) in scored.iter().enumerate().skip(1) {
        let m = metric(s, strategy)?;
        let better = match m.total_cmp(&best_metric) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => tie_break(s, &scored[best]) == Ordering::Less,
        };
        if better {
            best = i;
            best_metric = m;
        }
    }
    Ok(best)
}

/// Picks one candidate. `oracle_ds` is required by the oracle strategy and
/// ignored otherwise.
pub fn select<'a>(
    candidates: &'a [Candidate],
    strategy: Strategy,
    oracle_ds: Option<&DomainDataset>,
) -> Result<&'a Candidate> {
    if candidates.is_empty() {
        return Err(Error::Parameter("no candidates to select from".into()));
    }
    let oracle = match (strategy, oracle_ds) {
        (Strategy::Oracle, None) => {
            return Err(Error::Parameter("oracle selection requires held-out data".into()));
        }
        (Strategy::Oracle, Some(ds)) => Some(ds),
        _ => None,
    };
    let scored = candidates
        .iter()
        .map(|c| {
            let oracle_accuracy = match oracle {
                Some(ds) => {
                    let e = evaluate(&c.model, ds)?;
                    Some(e.accuracy.unwrap_or(-e.risk))
                }
                None => None,
            };
            Ok(Scored {
                hp: c.hp,
                trial_seed: c.trial_seed,
                val_risk: c.val_metrics.val_risk,
                val_accuracy: c.val_metrics.val_accuracy,
                ci_score: c.val_metrics.ci_score,
                oracle_accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(&candidates[select_index(&scored, strategy)?])
}
