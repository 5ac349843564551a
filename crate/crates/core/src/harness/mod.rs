//! Scenario files, sweeps, selection bookkeeping and reporting.

mod lemma1;
mod report;
mod run;
mod scenario;
mod stats;

pub use lemma1::{lemma1_curve, save_lemma1_csv, write_lemma1_csv, Lemma1Point};
pub use report::{aligned_table, stats_report, table1_report};
pub use run::{
    apply_selection, oracle_coefficient, read_manifest, read_stats, read_table1, run_scenario, stats_file_name,
    train_single, write_datasets, write_manifest, write_stats, write_table1, ManifestRow, ScenarioOutput, StatsRow,
    Table1Row, STATUS_OK,
};
pub use scenario::{ArchSpec, BinaryPool, DomainSpec, HpPoint, Protocol, Scenario, SCHEMA_VERSION};
pub use stats::{mean_std, report_stats, Aggregate, DomainStats, DomainSummary};
