use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::NormKind;
use crate::error::{Error, Result};
use crate::kernels::CiPenalty;
use crate::model::TcriModel;
use crate::objectives::TcriHyperParams;
use crate::rng::derive_seed;
use crate::scm::{split_train_val, DomainDataset};
use crate::selection::{select_index, validation_metrics, Scored, Strategy};
use crate::tensor::Tensor;
use crate::trainer::{evaluate, ols_solve, train, TrainOutcome};

use super::scenario::{Protocol, Scenario, SEED_INIT, SEED_SPLIT};
use super::stats::{report_stats, DomainStats};

/// One (held-out domain, grid point, trial) result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub held_out_index: usize,
    pub held_out: String,
    pub algorithm: String,
    pub hp_index: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub penalty: CiPenalty,
    pub irm_norm: NormKind,
    pub y_bins: usize,
    pub trial: usize,
    pub trial_seed: u64,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
    pub val_risk: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub ci_score: Option<f64>,
    pub test_risk: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub checkpoint_path: String,
    pub selected_ci: Option<u8>,
    pub selected_val_acc: Option<u8>,
    pub selected_oracle: Option<u8>,
}

pub const STATUS_OK: &str = "ok";

impl ManifestRow {
    pub fn hp(&self) -> TcriHyperParams {
        TcriHyperParams {
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
            penalty: self.penalty,
            irm_norm: self.irm_norm,
            y_bins: self.y_bins,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }

    /// Held-out accuracy, or negated risk for regression.
    fn test_score(&self) -> Option<f64> {
        self.test_accuracy.or(self.test_risk.map(|r| -r))
    }

    fn flag_mut(&mut self, strategy: Strategy) -> &mut Option<u8> {
        match strategy {
            Strategy::Ci => &mut self.selected_ci,
            Strategy::ValAcc => &mut self.selected_val_acc,
            Strategy::Oracle => &mut self.selected_oracle,
        }
    }

    pub fn flag(&self, strategy: Strategy) -> Option<u8> {
        match strategy {
            Strategy::Ci => self.selected_ci,
            Strategy::ValAcc => self.selected_val_acc,
            Strategy::Oracle => self.selected_oracle,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub algorithm: String,
    pub hp_index: usize,
    pub trial: usize,
    pub trial_seed: u64,
    pub status: String,
    pub phi_00: Option<f64>,
    pub phi_10: Option<f64>,
    pub oracle_coef: f64,
}

/// One line of a `stats_<strategy>.csv` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub algorithm: String,
    pub strategy: Strategy,
    /// `domain` or `aggregate`.
    pub row: String,
    pub domain_id: String,
    /// `accuracy`, or `risk` for regression scenarios.
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub min: Option<f64>,
    pub trials: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct ScenarioOutput {
    pub manifest: Vec<ManifestRow>,
    pub stats: BTreeMap<Strategy, Vec<StatsRow>>,
    pub table1: Vec<Table1Row>,
}

impl ScenarioOutput {
    /// Aggregate of one (algorithm, strategy) pair.
    pub fn aggregate(&self, algorithm: &str, strategy: Strategy) -> Option<&StatsRow> {
        self.stats
            .get(&strategy)?
            .iter()
            .find(|r| r.algorithm == algorithm && r.row == "aggregate")
    }

    /// Per-domain mean of one (algorithm, strategy) pair.
    pub fn domain_mean(&self, algorithm: &str, strategy: Strategy, domain_id: &str) -> Option<f64> {
        self.stats
            .get(&strategy)?
            .iter()
            .find(|r| r.algorithm == algorithm && r.row == "domain" && r.domain_id == domain_id)
            .map(|r| r.mean)
    }
}

/// Training domains and evaluation domains of one split.
#[derive(Clone, Debug)]
struct Split {
    name: String,
    train: Vec<usize>,
    eval: Vec<usize>,
}

fn splits(sc: &Scenario) -> Vec<Split> {
    let n = sc.num_domains();
    let held = sc.held_out_domains();
    match sc.protocol {
        Protocol::Table1 => vec![Split {
            name: "all".into(),
            train: (0..n).collect(),
            eval: Vec::new(),
        }],
        Protocol::LeaveOneOut => held
            .iter()
            .map(|&h| Split {
                name: format!("holdout-{h}"),
                train: (0..n).filter(|&i| i != h).collect(),
                eval: vec![h],
            })
            .collect(),
        Protocol::FixedHoldout => vec![Split {
            name: "fixed".into(),
            train: (0..n).filter(|i| !held.contains(i)).collect(),
            eval: held,
        }],
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(f);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    read_csv(path)
}

pub fn write_table1(path: &Path, rows: &[Table1Row]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_table1(path: &Path) -> Result<Vec<Table1Row>> {
    read_csv(path)
}

pub fn write_stats(path: &Path, rows: &[StatsRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_stats(path: &Path) -> Result<Vec<StatsRow>> {
    read_csv(path)
}

pub fn stats_file_name(strategy: Strategy) -> String {
    format!("stats_{}.csv", strategy.as_str())
}

/// Writes every trial's domains under `out_dir/datasets`.
pub fn write_datasets(sc: &Scenario, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for trial in 0..sc.trials {
        for (i, ds) in sc.generate_domains(trial)?.iter().enumerate() {
            let dir = out_dir.join("datasets").join(format!("trial-{trial}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("domain-{i}.csv"));
            ds.save_csv(&path)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Result of training one model.
#[derive(Clone, Debug)]
struct CellRun {
    outcome: Result<TrainOutcome, String>,
    val: Vec<DomainDataset>,
}

/// Trains one model on the given training domains of one trial, splitting
/// off validation rows first.
fn run_training(
    sc: &Scenario,
    data: &[DomainDataset],
    train_idx: &[usize],
    hp: &TcriHyperParams,
    trial: usize,
    hold_val: bool,
) -> Result<CellRun> {
    let ts = sc.trial_seed(trial);
    let mut train_sets = Vec::with_capacity(train_idx.len());
    let mut val_sets = Vec::new();
    for &i in train_idx {
        if hold_val {
            let seed = derive_seed(ts, &[SEED_SPLIT, i as u64]);
            let (tr, va) = split_train_val(&data[i], 1.0 - sc.val_fraction, seed)?;
            train_sets.push(tr);
            val_sets.push(va);
        } else {
            train_sets.push(data[i].clone());
        }
    }
    let arch = sc.arch_config(data[0].dim(), train_sets.len());
    let model = TcriModel::init(&arch, derive_seed(ts, &[SEED_INIT]))?;
    let outcome = train(model, &train_sets, hp, &sc.train).map_err(|e| e.to_string());
    Ok(CellRun { outcome, val: val_sets })
}

/// Trains a single cell and saves its checkpoint and log when `out_dir` is
/// set. `split_index` counts held-out domains in evaluation order.
pub fn train_single(
    sc: &Scenario,
    split_index: usize,
    hp_index: usize,
    trial: usize,
    out_dir: Option<&Path>,
) -> Result<(TcriModel, Vec<ManifestRow>)> {
    let all = splits(sc);
    let split = all
        .get(split_index)
        .ok_or_else(|| Error::Parameter(format!("split {split_index} out of range (have {})", all.len())))?;
    if hp_index >= sc.hp_grid.len() || trial >= sc.trials {
        return Err(Error::Parameter("hp index or trial out of range".into()));
    }
    let data = sc.generate_domains(trial)?;
    let (rows, model) = run_cell(sc, &data, split, hp_index, trial, out_dir)?;
    let model = model.ok_or_else(|| {
        Error::Parameter(format!(
            "training failed: {}",
            rows.first().map(|r| r.status.as_str()).unwrap_or("unknown")
        ))
    })?;
    Ok((model, rows))
}

fn artifact_paths(split: &Split, algorithm: &str, hp_index: usize, trial: usize) -> (String, String) {
    let stem = format!("{}/{algorithm}-hp{hp_index}-trial{trial}", split.name);
    (format!("checkpoints/{stem}.ckpt"), format!("logs/{stem}.csv"))
}

fn save_artifacts(out_dir: &Path, ckpt: &str, log: &str, outcome: &TrainOutcome) -> Result<()> {
    let ckpt = out_dir.join(ckpt);
    let log = out_dir.join(log);
    for p in [&ckpt, &log] {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    outcome.model.save(&ckpt)?;
    outcome.log.save_csv(&log)
}

fn run_cell(
    sc: &Scenario,
    data: &[DomainDataset],
    split: &Split,
    hp_index: usize,
    trial: usize,
    out_dir: Option<&Path>,
) -> Result<(Vec<ManifestRow>, Option<TcriModel>)> {
    let point = &sc.hp_grid[hp_index];
    let hp = point.resolve()?;
    let table1 = sc.protocol == Protocol::Table1;
    let run = run_training(sc, data, &split.train, &hp, trial, !table1)?;
    let (ckpt, log) = artifact_paths(split, &point.algorithm, hp_index, trial);
    let base = |eval: usize| ManifestRow {
        held_out_index: eval,
        held_out: data[eval].domain_id.clone(),
        algorithm: point.algorithm.clone(),
        hp_index,
        alpha: hp.alpha,
        beta: hp.beta,
        lambda: hp.lambda,
        penalty: hp.penalty,
        irm_norm: hp.irm_norm,
        y_bins: hp.y_bins,
        trial,
        trial_seed: sc.trial_seed(trial),
        status: STATUS_OK.into(),
        val_risk: None,
        val_accuracy: None,
        ci_score: None,
        test_risk: None,
        test_accuracy: None,
        checkpoint_path: String::new(),
        selected_ci: None,
        selected_val_acc: None,
        selected_oracle: None,
    };
    let outcome = match run.outcome {
        Ok(o) => o,
        Err(msg) => {
            let rows = split
                .eval
                .iter()
                .map(|&e| ManifestRow {
                    status: format!("failed: {msg}"),
                    ..base(e)
                })
                .collect();
            return Ok((rows, None));
        }
    };
    if table1 {
        if let Some(dir) = out_dir {
            save_artifacts(dir, &ckpt, &log, &outcome)?;
        }
        return Ok((Vec::new(), Some(outcome.model)));
    }
    let metrics = match validation_metrics(&outcome.model, &run.val, &hp) {
        Ok(m) => m,
        Err(e) => {
            let rows = split
                .eval
                .iter()
                .map(|&ev| ManifestRow {
                    status: format!("failed: validation: {e}"),
                    ..base(ev)
                })
                .collect();
            return Ok((rows, None));
        }
    };
    if let Some(dir) = out_dir {
        save_artifacts(dir, &ckpt, &log, &outcome)?;
    }
    let mut rows = Vec::with_capacity(split.eval.len());
    for &e in &split.eval {
        let test = evaluate(&outcome.model, &data[e])?;
        rows.push(ManifestRow {
            val_risk: Some(metrics.val_risk),
            val_accuracy: metrics.val_accuracy,
            ci_score: Some(metrics.ci_score),
            test_risk: Some(test.risk),
            test_accuracy: test.accuracy,
            checkpoint_path: ckpt.clone(),
            ..base(e)
        });
    }
    Ok((rows, Some(outcome.model)))
}

/// Pooled no-intercept least-squares coefficient of the target on the
/// causal latent.
pub fn oracle_coefficient(domains: &[DomainDataset]) -> Result<f64> {
    let mut zc = Vec::new();
    let mut y = Vec::new();
    for d in domains {
        let lat = d
            .latent_causal
            .as_ref()
            .ok_or_else(|| Error::Parameter(format!("domain {} has no causal latent", d.domain_id)))?;
        if lat.cols() != 1 {
            return Err(Error::Shape(
                "oracle coefficient needs a one-column causal latent".into(),
            ));
        }
        zc.extend_from_slice(lat.data());
        y.extend_from_slice(&d.targets);
    }
    let design = Tensor::column(&zc)?;
    Ok(ols_solve(&design, &y)?[0])
}

fn run_table1(sc: &Scenario, out_dir: Option<&Path>) -> Result<Vec<Table1Row>> {
    let split = &splits(sc)[0];
    let data: Vec<Vec<DomainDataset>> = (0..sc.trials).map(|t| sc.generate_domains(t)).collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..sc.hp_grid.len())
        .flat_map(|k| (0..sc.trials).map(move |t| (k, t)))
        .collect();
    let rows: Vec<Result<Table1Row>> = cells
        .par_iter()
        .map(|&(k, t)| {
            let point = &sc.hp_grid[k];
            let hp = point.resolve()?;
            let run = run_training(sc, &data[t], &split.train, &hp, t, false)?;
            let oracle_coef = oracle_coefficient(&data[t])?;
            let mut row = Table1Row {
                algorithm: point.algorithm.clone(),
                hp_index: k,
                trial: t,
                trial_seed: sc.trial_seed(t),
                status: STATUS_OK.into(),
                phi_00: None,
                phi_10: None,
                oracle_coef,
            };
            match run.outcome {
                Ok(o) => {
                    let w = o.model.phi.weight.data();
                    if w.len() < 2 {
                        return Err(Error::Shape("table1 needs a 2x1 phi head".into()));
                    }
                    row.phi_00 = Some(w[0]);
                    row.phi_10 = Some(w[1]);
                    if let Some(dir) = out_dir {
                        let (ckpt, log) = artifact_paths(split, &point.algorithm, k, t);
                        save_artifacts(dir, &ckpt, &log, &o)?;
                    }
                }
                Err(msg) => row.status = format!("failed: {msg}"),
            }
            Ok(row)
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    for k in 0..sc.hp_grid.len() {
        if rows.iter().filter(|r| r.hp_index == k).all(|r| r.status != STATUS_OK) {
            return Err(Error::Parameter(format!(
                "every trial of grid point {k} ({}) failed",
                sc.hp_grid[k].algorithm
            )));
        }
    }
    Ok(rows)
}

/// Applies `strategy` within every (held-out domain, algorithm) group,
/// sets the matching selected flags, and summarizes held-out performance.
///
/// A domain's value is the trial mean of the selected grid point.
pub fn apply_selection(rows: &mut [ManifestRow], strategy: Strategy) -> Result<Vec<StatsRow>> {
    let mut groups: Vec<(usize, String)> = Vec::new();
    for r in rows.iter() {
        let key = (r.held_out_index, r.algorithm.clone());
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    for r in rows.iter_mut() {
        *r.flag_mut(strategy) = Some(0);
    }
    let regression = rows.iter().any(|r| r.is_ok() && r.test_accuracy.is_none());
    let mut per_alg: BTreeMap<String, Vec<(String, Vec<f64>)>> = BTreeMap::new();
    let mut alg_order: Vec<String> = Vec::new();
    for (held, alg) in &groups {
        let members: Vec<usize> = (0..rows.len())
            .filter(|&i| rows[i].held_out_index == *held && &rows[i].algorithm == alg && rows[i].is_ok())
            .collect();
        if members.is_empty() {
            return Err(Error::Parameter(format!(
                "no successful runs for algorithm {alg} with domain {held} held out"
            )));
        }
        let scored: Vec<Scored> = members
            .iter()
            .map(|&i| {
                let r = &rows[i];
                Scored {
                    hp: r.hp(),
                    trial_seed: r.trial_seed,
                    val_risk: r.val_risk.unwrap_or(f64::INFINITY),
                    val_accuracy: r.val_accuracy,
                    ci_score: r.ci_score.unwrap_or(f64::INFINITY),
                    oracle_accuracy: r.test_score(),
                }
            })
            .collect();
        let winner = members[select_index(&scored, strategy)?];
        *rows[winner].flag_mut(strategy) = Some(1);
        let hp_index = rows[winner].hp_index;
        let values: Vec<f64> = members
            .iter()
            .filter(|&&i| rows[i].hp_index == hp_index)
            .filter_map(|&i| {
                if regression {
                    rows[i].test_risk
                } else {
                    rows[i].test_accuracy
                }
            })
            .collect();
        if !alg_order.contains(alg) {
            alg_order.push(alg.clone());
        }
        per_alg
            .entry(alg.clone())
            .or_default()
            .push((rows[winner].held_out.clone(), values));
    }
    let metric = if regression { "risk" } else { "accuracy" };
    let mut out = Vec::new();
    for alg in &alg_order {
        let entries = &per_alg[alg];
        let flat: Vec<(String, f64)> = entries
            .iter()
            .flat_map(|(d, vs)| vs.iter().map(move |v| (d.clone(), *v)))
            .collect();
        let stats: DomainStats = report_stats(&flat)?;
        for d in &stats.per_domain {
            out.push(StatsRow {
                algorithm: alg.clone(),
                strategy,
                row: "domain".into(),
                domain_id: d.domain_id.clone(),
                metric: metric.into(),
                mean: d.mean,
                std: d.std,
                min: None,
                trials: Some(d.trials),
            });
        }
        out.push(StatsRow {
            algorithm: alg.clone(),
            strategy,
            row: "aggregate".into(),
            domain_id: String::new(),
            metric: metric.into(),
            mean: stats.aggregate.mean,
            std: stats.aggregate.std,
            min: Some(stats.aggregate.min),
            trials: None,
        });
    }
    Ok(out)
}

/// Runs every cell of a scenario, applies each selection strategy and,
/// when `out_dir` is given, writes the full output tree there.
pub fn run_scenario(sc: &Scenario, out_dir: Option<&Path>) -> Result<ScenarioOutput> {
    sc.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_datasets(sc, dir)?;
    }
    if sc.protocol == Protocol::Table1 {
        let table1 = run_table1(sc, out_dir)?;
        if let Some(dir) = out_dir {
            write_table1(&dir.join("table1.csv"), &table1)?;
        }
        return Ok(ScenarioOutput {
            table1,
            ..Default::default()
        });
    }

    let data: Vec<Vec<DomainDataset>> = (0..sc.trials).map(|t| sc.generate_domains(t)).collect::<Result<_>>()?;
    let splits = splits(sc);
    let cells: Vec<(usize, usize, usize)> = (0..splits.len())
        .flat_map(|s| (0..sc.hp_grid.len()).flat_map(move |k| (0..sc.trials).map(move |t| (s, k, t))))
        .collect();
    let results: Vec<Result<Vec<ManifestRow>>> = cells
        .par_iter()
        .map(|&(s, k, t)| run_cell(sc, &data[t], &splits[s], k, t, out_dir).map(|(rows, _)| rows))
        .collect();
    let mut manifest = Vec::new();
    for r in results {
        manifest.extend(r?);
    }
    for (s, split) in splits.iter().enumerate() {
        for k in 0..sc.hp_grid.len() {
            let all_failed = manifest
                .iter()
                .filter(|r| r.hp_index == k && split.eval.contains(&r.held_out_index))
                .all(|r| !r.is_ok());
            if all_failed {
                return Err(Error::Parameter(format!(
                    "every trial failed for grid point {k} ({}) in split {s}",
                    sc.hp_grid[k].algorithm
                )));
            }
        }
    }
    let mut stats = BTreeMap::new();
    for &strategy in &sc.selection_strategies {
        stats.insert(strategy, apply_selection(&mut manifest, strategy)?);
    }
    if let Some(dir) = out_dir {
        write_manifest(&dir.join("manifest.csv"), &manifest)?;
        for (strategy, rows) in &stats {
            write_stats(&dir.join(stats_file_name(*strategy)), rows)?;
        }
    }
    Ok(ScenarioOutput {
        manifest,
        stats,
        table1: Vec::new(),
    })
}
