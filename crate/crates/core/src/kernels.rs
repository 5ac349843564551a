//! Kernel dependence measures used as the conditional-independence penalty.
//!
//! Plain `f64` estimators live next to their differentiable counterparts
//! (the `*_on_tape` functions). Both compute the same quantities through
//! different arithmetic, which the tests use to cross-check each other.
//! Bandwidths are always taken from the current values and treated as
//! constants by the differentiable versions.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{pairwise_sq_dists, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiPenalty {
    Hsic,
    Cov,
}

impl CiPenalty {
    pub fn as_str(self) -> &'static str {
        match self {
            CiPenalty::Hsic => "hsic",
            CiPenalty::Cov => "cov",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    Rbf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gram {
    pub matrix: Tensor,
    pub bandwidth: f64,
    pub kind: KernelKind,
}

impl Gram {
    pub fn n(&self) -> usize {
        self.matrix.rows()
    }
}

/// `H = I - (1/n) 1 1^T`, kept implicit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CenteringMatrix {
    pub n: usize,
}

impl CenteringMatrix {
    pub fn to_tensor(self) -> Tensor {
        let n = self.n;
        let off = 1.0 / n as f64;
        let mut t = Tensor::filled(&[n, n], -off);
        for i in 0..n {
            t.data_mut()[i * n + i] += 1.0;
        }
        t
    }

    /// `K H`: subtracts each row's mean from that row.
    pub fn right_apply(self, k: &Tensor) -> Tensor {
        let n = self.n;
        let mut out = k.clone();
        for i in 0..n {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        out
    }
}

/// Median of pairwise Euclidean distances between distinct rows; 1.0 when
/// that median is zero.
pub fn median_bandwidth(x: &Tensor) -> Result<f64> {
    let (n, _) = x.require_matrix("median_bandwidth")?;
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "median bandwidth needs at least 2 rows, got {n}"
        )));
    }
    let d2 = pairwise_sq_dists(x)?;
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(d2.data()[i * n + j].sqrt());
        }
    }
    let m = dists.len();
    let upper = *dists.select_nth_unstable_by(m / 2, f64::total_cmp).1;
    let median = if m % 2 == 1 {
        upper
    } else {
        let lower = dists[..m / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if !median.is_finite() {
        return Err(Error::NonFinite("median pairwise distance".into()));
    }
    Ok(if median > 0.0 { median } else { 1.0 })
}

/// `K_ij = exp(-||x_i - x_j||^2 / (2 h^2))`.
pub fn rbf_gram(x: &Tensor, bandwidth: f64) -> Result<Gram> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Parameter(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("rbf_gram input".into()));
    }
    let denom = 2.0 * bandwidth * bandwidth;
    let matrix = pairwise_sq_dists(x)?.map(|d| (-d / denom).exp());
    Ok(Gram {
        matrix,
        bandwidth,
        kind: KernelKind::Rbf,
    })
}

/// Biased (V-statistic) HSIC: `trace(K_x H K_y H) / n^2`.
pub fn hsic_v(kx: &Gram, ky: &Gram) -> Result<f64> {
    let n = kx.n();
    if ky.n() != n {
        return Err(Error::Shape(format!("Gram sizes {n} and {} differ", ky.n())));
    }
    if n < 2 {
        return Err(Error::Degenerate("HSIC needs at least 2 samples".into()));
    }
    let h = CenteringMatrix { n };
    let a = h.right_apply(&kx.matrix);
    let b = h.right_apply(&ky.matrix);
    let (ad, bd) = (a.data(), b.data());
    let mut trace = 0.0;
    for i in 0..n {
        for j in 0..n {
            trace += ad[i * n + j] * bd[j * n + i];
        }
    }
    Ok(trace / (n * n) as f64)
}

/// HSIC of two samples with median-heuristic RBF kernels on each.
pub fn hsic_median(x: &Tensor, y: &Tensor) -> Result<f64> {
    let kx = rbf_gram(x, median_bandwidth(x)?)?;
    let ky = rbf_gram(y, median_bandwidth(y)?)?;
    hsic_v(&kx, &ky)
}

/// HSIC values of `kx` against row/column permutations of `ky`.
pub fn hsic_permutation_null(kx: &Gram, ky: &Gram, permutations: usize, seed: u64) -> Result<Vec<f64>> {
    let n = ky.n();
    let mut rng = seeded(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        order.shuffle(&mut rng);
        let mut permuted = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                permuted.data_mut()[i * n + j] = ky.matrix.get(order[i], order[j]);
            }
        }
        let kp = Gram {
            matrix: permuted,
            ..ky.clone()
        };
        out.push(hsic_v(kx, &kp)?);
    }
    Ok(out)
}

/// A class-averaged dependence estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionalEstimate {
    pub value: f64,
    pub classes_used: usize,
    /// Classes with fewer than two rows, left out of the average.
    pub classes_skipped: usize,
}

pub(crate) fn class_slices(labels: &[usize], num_classes: usize) -> Result<(Vec<Vec<usize>>, usize)> {
    let mut slices = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::Parameter(format!("label {l} outside 0..{num_classes}")));
        }
        slices[l].push(i);
    }
    let total = slices.len();
    let kept: Vec<Vec<usize>> = slices.into_iter().filter(|s| s.len() >= 2).collect();
    if kept.is_empty() {
        return Err(Error::Degenerate(
            "no class has at least two rows for conditional estimation".into(),
        ));
    }
    let skipped = total - kept.len();
    Ok((kept, skipped))
}

fn conditional<F>(phi: &Tensor, psi: &Tensor, labels: &[usize], num_classes: usize, f: F) -> Result<ConditionalEstimate>
where
    F: Fn(&Tensor, &Tensor) -> Result<f64>,
{
    if phi.rows() != labels.len() || psi.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} and {} rows for {} labels",
            phi.rows(),
            psi.rows(),
            labels.len()
        )));
    }
    let (slices, skipped) = class_slices(labels, num_classes)?;
    let mut total = 0.0;
    for rows in &slices {
        total += f(&phi.select_rows(rows)?, &psi.select_rows(rows)?)?;
    }
    Ok(ConditionalEstimate {
        value: total / slices.len() as f64,
        classes_used: slices.len(),
        classes_skipped: skipped,
    })
}

/// Mean over classes of the within-class HSIC between `phi` and `psi`.
pub fn conditional_hsic(
    phi: &Tensor,
    psi: &Tensor,
    labels: &[usize],
    num_classes: usize,
) -> Result<ConditionalEstimate> {
    conditional(phi, psi, labels, num_classes, hsic_median)
}

/// Squared Frobenius norm of the centred cross-covariance.
pub fn cross_cov(phi: &Tensor, psi: &Tensor) -> Result<f64> {
    let (n, p) = phi.require_matrix("cross_cov")?;
    let (n2, q) = psi.require_matrix("cross_cov")?;
    if n != n2 || n == 0 {
        return Err(Error::Shape(format!("cross_cov rows {n} and {n2}")));
    }
    let mean = |t: &Tensor, c: usize, w: usize| (0..n).map(|i| t.data()[i * w + c]).sum::<f64>() / n as f64;
    let mp: Vec<f64> = (0..p).map(|c| mean(phi, c, p)).collect();
    let mq: Vec<f64> = (0..q).map(|c| mean(psi, c, q)).collect();
    let mut total = 0.0;
    for (a, &ma) in mp.iter().enumerate() {
        for (b, &mb) in mq.iter().enumerate() {
            let c: f64 = (0..n).map(|i| (phi.get(i, a) - ma) * (psi.get(i, b) - mb)).sum::<f64>() / n as f64;
            total += c * c;
        }
    }
    Ok(total)
}

/// Mean over classes of the within-class [`cross_cov`].
pub fn conditional_cross_cov(
    phi: &Tensor,
    psi: &Tensor,
    labels: &[usize],
    num_classes: usize,
) -> Result<ConditionalEstimate> {
    conditional(phi, psi, labels, num_classes, cross_cov)
}

pub fn conditional_penalty(
    penalty: CiPenalty,
    phi: &Tensor,
    psi: &Tensor,
    labels: &[usize],
    num_classes: usize,
) -> Result<ConditionalEstimate> {
    match penalty {
        CiPenalty::Hsic => conditional_hsic(phi, psi, labels, num_classes),
        CiPenalty::Cov => conditional_cross_cov(phi, psi, labels, num_classes),
    }
}

fn rbf_on_tape(tape: &mut Tape, x: Var) -> Result<Var> {
    let h = median_bandwidth(tape.value(x))?;
    let d = tape.sq_dist(x)?;
    let scaled = tape.scale(d, -1.0 / (2.0 * h * h));
    Ok(tape.exp(scaled))
}

pub fn hsic_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.value(a).rows();
    let ka = rbf_on_tape(tape, a)?;
    let kb = rbf_on_tape(tape, b)?;
    // trace(H Ka H Kb) = <H Ka H, H Kb H> since H is idempotent; centring
    // both sides makes a constant representation contribute exactly zero.
    let kac = tape.center_gram(ka)?;
    let kbc = tape.center_gram(kb)?;
    let prod = tape.mul(kac, kbc)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, 1.0 / (n * n) as f64))
}

pub fn cross_cov_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.value(a).rows();
    let ac = tape.center_cols(a)?;
    let bc = tape.center_cols(b)?;
    let at = tape.transpose(ac)?;
    let c = tape.matmul(at, bc)?;
    let c = tape.scale(c, 1.0 / n as f64);
    let sq = tape.square(c);
    Ok(tape.sum(sq))
}

/// Differentiable class-averaged penalty. Returns the penalty and the
/// number of skipped classes.
pub fn conditional_penalty_on_tape(
    tape: &mut Tape,
    penalty: CiPenalty,
    phi: Var,
    psi: Var,
    labels: &[usize],
    num_classes: usize,
) -> Result<(Var, usize)> {
    let n = labels.len();
    if tape.value(phi).rows() != n || tape.value(psi).rows() != n {
        return Err(Error::Shape("representation rows differ from label count".into()));
    }
    let (slices, skipped) = class_slices(labels, num_classes)?;
    let mut terms = Vec::with_capacity(slices.len());
    for rows in &slices {
        let a = tape.select_rows(phi, rows)?;
        let b = tape.select_rows(psi, rows)?;
        terms.push(match penalty {
            CiPenalty::Hsic => hsic_on_tape(tape, a, b)?,
            CiPenalty::Cov => cross_cov_on_tape(tape, a, b)?,
        });
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok((tape.scale(total, 1.0 / terms.len() as f64), skipped))
}
