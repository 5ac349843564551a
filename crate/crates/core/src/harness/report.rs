use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::run::{StatsRow, Table1Row, STATUS_OK};
use super::stats::mean_std;

/// Renders rows as a text table: first column left-aligned, the others
/// right-aligned, columns separated by two spaces.
pub fn aligned_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width = header.iter().map(|h| h.chars().count()).collect::<Vec<_>>();
    for r in rows {
        for (c, cell) in r.iter().enumerate().take(cols) {
            width[c] = width[c].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate().take(cols) {
            if c > 0 {
                s.push_str("  ");
            }
            if c == 0 {
                let _ = write!(s, "{cell:<w$}", w = width[c]);
            } else {
                let _ = write!(s, "{cell:>w$}", w = width[c]);
            }
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(header);
    for r in rows {
        line(r);
    }
    out
}

/// Trial-averaged `phi` entries per algorithm, with the oracle coefficient
/// on its own line.
pub fn table1_report(rows: &[Table1Row]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Parameter("table1 has no rows".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.algorithm.as_str()) {
            order.push(&r.algorithm);
        }
    }
    let header: Vec<String> = ["algorithm", "phi_00", "phi_10", "std_00", "std_10", "trials"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut body = Vec::new();
    let oracle: Vec<f64> = rows
        .iter()
        .filter(|r| r.algorithm == order[0])
        .map(|r| r.oracle_coef)
        .collect();
    let (om, os) = mean_std(&oracle)?;
    body.push(vec![
        "oracle".into(),
        format!("{om:.4}"),
        "-".into(),
        format!("{os:.4}"),
        "-".into(),
        oracle.len().to_string(),
    ]);
    for alg in order {
        let ok: Vec<&Table1Row> = rows
            .iter()
            .filter(|r| r.algorithm == alg && r.status == STATUS_OK)
            .collect();
        let p0: Vec<f64> = ok.iter().filter_map(|r| r.phi_00).collect();
        let p1: Vec<f64> = ok.iter().filter_map(|r| r.phi_10).collect();
        if p0.is_empty() {
            body.push(vec![
                alg.into(),
                "-".into(),
                "-".into(),
                "-".into(),
                "-".into(),
                "0".into(),
            ]);
            continue;
        }
        let (m0, s0) = mean_std(&p0)?;
        let (m1, s1) = mean_std(&p1)?;
        body.push(vec![
            alg.into(),
            format!("{m0:.4}"),
            format!("{m1:.4}"),
            format!("{s0:.4}"),
            format!("{s1:.4}"),
            p0.len().to_string(),
        ]);
    }
    Ok(aligned_table(&header, &body))
}

/// One line per (algorithm, strategy): held-out domain means followed by
/// the aggregate mean, std and min. Accuracies are shown in percent.
pub fn stats_report(rows: &[StatsRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Parameter("no stats rows".into()));
    }
    let mut domains: Vec<&str> = Vec::new();
    let mut groups: Vec<(&str, &str)> = Vec::new();
    for r in rows {
        if r.row == "domain" && !domains.contains(&r.domain_id.as_str()) {
            domains.push(&r.domain_id);
        }
        let key = (r.algorithm.as_str(), r.strategy.as_str());
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    let percent = rows.iter().all(|r| r.metric == "accuracy");
    let fmt = |v: f64| {
        if percent {
            format!("{:.1}", 100.0 * v)
        } else {
            format!("{v:.4}")
        }
    };
    let mut header: Vec<String> = vec!["algorithm".into(), "selection".into()];
    header.extend(domains.iter().map(|d| d.to_string()));
    header.extend(["mean", "std", "min"].iter().map(|s| s.to_string()));
    let mut body = Vec::new();
    for (alg, strat) in groups {
        let mine: Vec<&StatsRow> = rows
            .iter()
            .filter(|r| r.algorithm == alg && r.strategy.as_str() == strat)
            .collect();
        let mut line = vec![alg.to_string(), strat.to_string()];
        for d in &domains {
            line.push(
                mine.iter()
                    .find(|r| r.row == "domain" && r.domain_id == *d)
                    .map(|r| fmt(r.mean))
                    .unwrap_or_else(|| "-".into()),
            );
        }
        match mine.iter().find(|r| r.row == "aggregate") {
            Some(a) => {
                line.push(fmt(a.mean));
                line.push(fmt(a.std));
                line.push(a.min.map(fmt).unwrap_or_else(|| "-".into()));
            }
            None => line.extend(["-", "-", "-"].iter().map(|s| s.to_string())),
        }
        body.push(line);
    }
    Ok(aligned_table(&header, &body))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_are_aligned() {
        let t = aligned_table(
            &["name".into(), "v".into()],
            &[vec!["a".into(), "1.5".into()], vec!["long".into(), "10.25".into()]],
        );
        assert_eq!(t, "name      v\na       1.5\nlong  10.25\n");
    }
}
