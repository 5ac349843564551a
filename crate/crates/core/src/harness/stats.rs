use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Parameter("mean of no values".into()));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok((values[0], 0.0));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub domain_id: String,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
}

/// Per-domain trial statistics and their aggregate over domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStats {
    pub per_domain: Vec<DomainSummary>,
    pub aggregate: Aggregate,
}

impl DomainStats {
    pub fn aggregate_of(per_domain: &[DomainSummary]) -> Result<Aggregate> {
        let means: Vec<f64> = per_domain.iter().map(|d| d.mean).collect();
        let (mean, std) = mean_std(&means)?;
        let min = means.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Aggregate { mean, std, min })
    }
}

/// Groups `(domain_id, value)` results by domain, in order of first
/// appearance, and summarizes them.
pub fn report_stats(results: &[(String, f64)]) -> Result<DomainStats> {
    if results.is_empty() {
        return Err(Error::Parameter("no results to summarize".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    for (id, _) in results {
        if !order.contains(&id.as_str()) {
            order.push(id);
        }
    }
    let per_domain = order
        .iter()
        .map(|&id| {
            let vals: Vec<f64> = results.iter().filter(|(d, _)| d == id).map(|(_, v)| *v).collect();
            let (mean, std) = mean_std(&vals)?;
            Ok(DomainSummary {
                domain_id: id.to_string(),
                mean,
                std,
                trials: vals.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = DomainStats::aggregate_of(&per_domain)?;
    Ok(DomainStats { per_domain, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(v: &[(&str, f64)]) -> Vec<(String, f64)> {
        v.iter().map(|(d, x)| (d.to_string(), *x)).collect()
    }

    #[test]
    fn constant_domains() {
        let s = report_stats(&r(&[("a", 0.7), ("b", 0.7), ("c", 0.7)])).unwrap();
        assert_eq!(s.aggregate.std, 0.0);
        assert_eq!(s.aggregate.mean, 0.7);
        assert_eq!(s.aggregate.min, 0.7);
    }

    #[test]
    fn trial_spread_within_domain() {
        let s = report_stats(&r(&[("a", 0.6), ("b", 0.2), ("a", 0.8)])).unwrap();
        assert_eq!(s.per_domain[0].trials, 2);
        assert!((s.per_domain[0].mean - 0.7).abs() < 1e-15);
        assert!((s.per_domain[0].std - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.per_domain[1].std, 0.0);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(report_stats(&[]).is_err());
    }
}
