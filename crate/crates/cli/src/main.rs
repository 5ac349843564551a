use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use tcri_core::harness::{
    apply_selection, lemma1_curve, read_manifest, read_stats, read_table1, run_scenario, save_lemma1_csv,
    stats_file_name, stats_report, table1_report, train_single, write_datasets, write_manifest, write_stats, Scenario,
};
use tcri_core::Strategy;

#[derive(Parser, Debug)]
#[command(
    name = "tcri",
    version,
    about = "Domain generalization experiments on synthetic data"
)]
struct Cli {
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the scenario's datasets as CSV.
    Generate {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Train a single (split, grid point, trial) cell.
    Train {
        /// Index into the scenario's list of splits (held-out domains).
        #[arg(long, default_value_t = 0)]
        split: usize,
        #[arg(long, default_value_t = 0)]
        hp_index: usize,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Run the full grid and write manifest, stats, checkpoints and logs.
    Sweep {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Apply a selection strategy to an existing manifest.
    Select {
        #[arg(long, value_parser = parse_strategy)]
        strategy: Strategy,
        /// Defaults to <out-dir>/manifest.csv.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Print stats or table1 CSVs as aligned text.
    Report {
        /// A table1.csv or stats_<strategy>.csv file; defaults to whatever
        /// the output directory holds.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Sample the circle counterexample and write binned conditionals.
    DemoLemma1 {
        #[arg(long, default_value_t = 1.0)]
        r: f64,
        #[arg(long, default_value_t = 0.0)]
        d1: f64,
        #[arg(long, default_value_t = 0.0)]
        d2: f64,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        points: usize,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).map_err(|e| e.to_string())
}

fn load_scenario(cli: &Cli) -> Result<Scenario> {
    let path = cli.scenario.as_ref().ok_or_else(|| anyhow!("--scenario is required"))?;
    let mut sc = Scenario::load(path)?;
    if let Some(seed) = cli.seed {
        sc.seed = seed;
    }
    Ok(sc)
}

fn with_trials(mut sc: Scenario, trials: Option<usize>) -> Scenario {
    if let Some(t) = trials {
        sc.trials = t;
    }
    sc
}

fn is_table1(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with("table1"))
}

fn report_file(path: &Path) -> Result<String> {
    if is_table1(path) {
        Ok(table1_report(&read_table1(path)?)?)
    } else {
        Ok(stats_report(&read_stats(path)?)?)
    }
}

fn run(cli: &Cli) -> Result<()> {
    let out = &cli.out_dir;
    match &cli.command {
        Command::Generate { trials } => {
            let sc = with_trials(load_scenario(cli)?, *trials);
            sc.validate()?;
            for p in write_datasets(&sc, out)? {
                println!("{}", p.display());
            }
        }
        Command::Train { split, hp_index, trial } => {
            let sc = load_scenario(cli)?;
            sc.validate()?;
            let (_, rows) = train_single(&sc, *split, *hp_index, *trial, Some(out))?;
            for r in rows {
                let acc = r.test_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
                let risk = r.test_risk.map(|a| format!("{a:.6}")).unwrap_or_else(|| "-".into());
                println!(
                    "{} held_out={} accuracy={acc} risk={risk}",
                    r.checkpoint_path, r.held_out
                );
            }
        }
        Command::Sweep { trials } => {
            let sc = with_trials(load_scenario(cli)?, *trials);
            let result = run_scenario(&sc, Some(out))?;
            if !result.table1.is_empty() {
                print!("{}", table1_report(&result.table1)?);
            }
            for rows in result.stats.values() {
                print!("{}", stats_report(rows)?);
            }
        }
        Command::Select { strategy, manifest } => {
            let path = manifest.clone().unwrap_or_else(|| out.join("manifest.csv"));
            let mut rows = read_manifest(&path)?;
            let stats = apply_selection(&mut rows, *strategy)?;
            write_manifest(&path, &rows)?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            write_stats(&out.join(stats_file_name(*strategy)), &stats)?;
            print!("{}", stats_report(&stats)?);
        }
        Command::Report { input } => {
            let files: Vec<PathBuf> = match input {
                Some(p) => vec![p.clone()],
                None => {
                    let t1 = out.join("table1.csv");
                    if t1.exists() {
                        vec![t1]
                    } else {
                        Strategy::ALL
                            .iter()
                            .map(|s| out.join(stats_file_name(*s)))
                            .filter(|p| p.exists())
                            .collect()
                    }
                }
            };
            if files.is_empty() {
                bail!("no table1.csv or stats CSV found in {}", out.display());
            }
            for f in files {
                print!("{}", report_file(&f)?);
            }
        }
        Command::DemoLemma1 { r, d1, d2, n, points } => {
            let seed = cli.seed.unwrap_or(0);
            let curve = lemma1_curve(*r, *d1, *d2, *n, *points, seed)?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("lemma1.csv");
            save_lemma1_csv(&curve, &path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
