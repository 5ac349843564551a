use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scm::{fmt_f64, lemma1_closed_form, lemma1_exact_conditional, sample_lemma1_counterexample};

/// Binned estimate of `P(y = 1 | z1)` at one grid point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lemma1Point {
    pub z1: f64,
    pub count: usize,
    pub empirical: f64,
    /// Binomial standard error of `empirical`.
    pub std_err: f64,
    /// The stated closed form.
    pub analytic: f64,
    /// Direct integration of the sampling distribution.
    pub exact: f64,
}

/// Estimates the conditional at `points` equally spaced centres across the
/// support of `z1`, each from the samples within a quarter of the grid
/// spacing.
pub fn lemma1_curve(r: f64, d1: f64, d2: f64, n: usize, points: usize, seed: u64) -> Result<Vec<Lemma1Point>> {
    if points == 0 {
        return Err(Error::Parameter("need at least one grid point".into()));
    }
    let ds = sample_lemma1_counterexample(d1, d2, r, n, seed)?;
    let (lo, hi) = (-r + d1, r + d1);
    let spacing = (hi - lo) / points as f64;
    let half = spacing / 4.0;
    let z1: Vec<f64> = (0..ds.len()).map(|i| ds.features.get(i, 0)).collect();
    (0..points)
        .map(|k| {
            let c = lo + (k as f64 + 0.5) * spacing;
            let mut count = 0usize;
            let mut ones = 0usize;
            for (z, y) in z1.iter().zip(&ds.targets) {
                if (z - c).abs() <= half {
                    count += 1;
                    ones += usize::from(*y > 0.5);
                }
            }
            if count == 0 {
                return Err(Error::Degenerate(format!("no samples near z1 = {c}")));
            }
            let p = ones as f64 / count as f64;
            Ok(Lemma1Point {
                z1: c,
                count,
                empirical: p,
                std_err: (p * (1.0 - p) / count as f64).sqrt(),
                analytic: lemma1_closed_form(c, d2, r),
                exact: lemma1_exact_conditional(c, d2, r),
            })
        })
        .collect()
}

pub fn write_lemma1_csv<W: Write>(points: &[Lemma1Point], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["z1", "count", "empirical", "std_err", "analytic", "exact"])?;
    for p in points {
        w.write_record([
            fmt_f64(p.z1),
            p.count.to_string(),
            fmt_f64(p.empirical),
            fmt_f64(p.std_err),
            fmt_f64(p.analytic),
            fmt_f64(p.exact),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<lemma1 csv>", e))?;
    Ok(())
}

pub fn save_lemma1_csv(points: &[Lemma1Point], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_lemma1_csv(points, std::io::BufWriter::new(f))
}
