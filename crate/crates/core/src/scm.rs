//! Synthetic domains drawn from structural causal models.
//!
//! Every generator is a pure function of its spec and seed. Latent causal
//! and spurious blocks are kept next to the observed features so oracle
//! evaluations can look at them; models only ever see `features`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Scale of the exponential noise between the causal latent and the target.
pub const TARGET_NOISE_SCALE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub features: Tensor,
    pub targets: Vec<f64>,
    pub domain_id: String,
    pub latent_causal: Option<Tensor>,
    pub latent_spurious: Option<Tensor>,
}

impl DomainDataset {
    pub fn new(
        domain_id: impl Into<String>,
        features: Tensor,
        targets: Vec<f64>,
        latent_causal: Option<Tensor>,
        latent_spurious: Option<Tensor>,
    ) -> Result<Self> {
        let (n, _) = features.require_matrix("dataset features")?;
        if targets.len() != n {
            return Err(Error::Shape(format!("{n} feature rows but {} targets", targets.len())));
        }
        if let Some(v) = targets.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("target {v}")));
        }
        for latent in [&latent_causal, &latent_spurious].into_iter().flatten() {
            let (ln, _) = latent.require_matrix("latent block")?;
            if ln != n {
                return Err(Error::Shape(format!("latent block has {ln} rows, features have {n}")));
            }
        }
        Ok(Self {
            features,
            targets,
            domain_id: domain_id.into(),
            latent_causal,
            latent_spurious,
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.domain_id = id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn targets_column(&self) -> Tensor {
        Tensor::from_raw(vec![self.len(), 1], self.targets.clone())
    }

    /// Targets as class indices; fails unless every target is 0 or 1.
    pub fn binary_labels(&self) -> Result<Vec<usize>> {
        self.targets
            .iter()
            .map(|&y| {
                if y == 0.0 {
                    Ok(0)
                } else if y == 1.0 {
                    Ok(1)
                } else {
                    Err(Error::Parameter(format!(
                        "domain {}: target {y} is not a binary label",
                        self.domain_id
                    )))
                }
            })
            .collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let pick = |t: &Option<Tensor>| t.as_ref().map(|t| t.select_rows(rows)).transpose();
        Ok(Self {
            features: self.features.select_rows(rows)?,
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
            domain_id: self.domain_id.clone(),
            latent_causal: pick(&self.latent_causal)?,
            latent_spurious: pick(&self.latent_spurious)?,
        })
    }

    /// Writes the columnar CSV form: `domain_id, y, x_*, zc_*, ze_*`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.dim();
        let dc = self.latent_causal.as_ref().map_or(0, Tensor::cols);
        let de = self.latent_spurious.as_ref().map_or(0, Tensor::cols);
        let mut header = vec!["domain_id".to_string(), "y".to_string()];
        header.extend((0..d).map(|j| format!("x_{j}")));
        header.extend((0..dc).map(|j| format!("zc_{j}")));
        header.extend((0..de).map(|j| format!("ze_{j}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = Vec::with_capacity(header.len());
            rec.push(self.domain_id.clone());
            rec.push(fmt_f64(self.targets[i]));
            rec.extend(self.features.row(i).iter().map(|&v| fmt_f64(v)));
            for block in [&self.latent_causal, &self.latent_spurious].into_iter().flatten() {
                rec.extend(block.row(i).iter().map(|&v| fmt_f64(v)));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads a CSV written by [`write_csv`](Self::write_csv). All rows must
    /// share one domain id.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let col = |prefix: &str| -> Vec<usize> {
            header
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with(prefix) && h[prefix.len()..].parse::<usize>().is_ok())
                .map(|(i, _)| i)
                .collect()
        };
        let (xs, zcs, zes) = (col("x_"), col("zc_"), col("ze_"));
        let find = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::parse("dataset csv", format!("missing column {name}")))
        };
        let (id_col, y_col) = (find("domain_id")?, find("y")?);
        let mut domain_id: Option<String> = None;
        let (mut y, mut x, mut zc, mut ze) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let id = &rec[id_col];
            match &domain_id {
                None => domain_id = Some(id.to_string()),
                Some(d) if d != id => {
                    return Err(Error::parse(
                        "dataset csv",
                        format!("row {line}: domain id {id} differs from {d}"),
                    ))
                }
                Some(_) => {}
            }
            let num = |i: usize| {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::parse("dataset csv", format!("row {line}, column {i}: {e}")))
            };
            y.push(num(y_col)?);
            for &i in &xs {
                x.push(num(i)?);
            }
            for &i in &zcs {
                zc.push(num(i)?);
            }
            for &i in &zes {
                ze.push(num(i)?);
            }
        }
        let n = y.len();
        let block = |data: Vec<f64>, width: usize| -> Result<Option<Tensor>> {
            if width == 0 {
                Ok(None)
            } else {
                Tensor::matrix(n, width, data).map(Some)
            }
        };
        Self::new(
            domain_id.unwrap_or_default(),
            Tensor::matrix(n, xs.len(), x)?,
            y,
            block(zc, zcs.len())?,
            block(ze, zes.len())?,
        )
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Seventeen significant digits: enough for an exact `f64` round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousScmSpec {
    /// Scale (mean) of the exponential causal latent.
    pub sigma_c: f64,
    /// Scale (mean) of the exponential noise added to the target to form
    /// the spurious latent.
    pub sigma_eta: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl ContinuousScmSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_c > 0.0 && self.sigma_c.is_finite()) {
            return Err(Error::Parameter(format!(
                "sigma_c must be positive, got {}",
                self.sigma_c
            )));
        }
        if !(self.sigma_eta > 0.0 && self.sigma_eta.is_finite()) {
            return Err(Error::Parameter(format!(
                "sigma_eta must be positive, got {}",
                self.sigma_eta
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Parameter("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// `z_c ~ Exp(sigma_c)`, `y = z_c + Exp(0.25)`, `z_e = y + Exp(sigma_eta)`,
/// all exponentials parameterized by scale. Observed `X = [z_c, z_e]`.
pub fn sample_continuous_scm(spec: &ContinuousScmSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let exp = |scale: f64| Exp::new(1.0 / scale).map_err(|e| Error::Parameter(e.to_string()));
    let (causal, target_noise, spurious_noise) = (exp(spec.sigma_c)?, exp(TARGET_NOISE_SCALE)?, exp(spec.sigma_eta)?);
    let n = spec.n_samples;
    let (mut zc, mut ze, mut y, mut x) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(2 * n),
    );
    for _ in 0..n {
        let c: f64 = causal.sample(&mut rng);
        let t = c + target_noise.sample(&mut rng);
        let e = t + spurious_noise.sample(&mut rng);
        zc.push(c);
        ze.push(e);
        y.push(t);
        x.extend_from_slice(&[c, e]);
    }
    DomainDataset::new(
        format!("scm(sigma={},eta={})", spec.sigma_c, spec.sigma_eta),
        Tensor::matrix(n, 2, x)?,
        y,
        Some(Tensor::matrix(n, 1, zc)?),
        Some(Tensor::matrix(n, 1, ze)?),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpuriousBinarySpec {
    /// Probability that the spurious encoding disagrees with the label.
    pub flip_prob: f64,
    pub label_noise: f64,
    pub n_samples: usize,
    pub causal_dim: usize,
    pub spurious_dim: usize,
    /// Distance of each class-conditional causal mean from the origin, per
    /// coordinate.
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for SpuriousBinarySpec {
    fn default() -> Self {
        Self {
            flip_prob: 0.1,
            label_noise: 0.25,
            n_samples: 1000,
            causal_dim: 5,
            spurious_dim: 5,
            class_separation: 1.0,
            seed: 0,
        }
    }
}

impl SpuriousBinarySpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_prob", self.flip_prob), ("label_noise", self.label_noise)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.n_samples == 0 || self.causal_dim == 0 || self.spurious_dim == 0 {
            return Err(Error::Parameter(
                "n_samples, causal_dim and spurious_dim must be positive".into(),
            ));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::Parameter("class_separation must be non-negative".into()));
        }
        Ok(())
    }
}

/// Binary task with an anticausal spurious block.
///
/// Per example: a latent class picks the causal cluster mean
/// `±class_separation`, the causal block is that mean plus standard normal
/// noise, the clean label is `1[sum(z_c) > 0]`, the label is flipped with
/// probability `label_noise`, and the spurious block is the signed encoding
/// `±1` of the noisy label, itself flipped with probability `flip_prob`.
pub fn sample_spurious_binary(spec: &SpuriousBinarySpec) -> Result<DomainDataset> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let (n, dc, de) = (spec.n_samples, spec.causal_dim, spec.spurious_dim);
    let mut zc = Vec::with_capacity(n * dc);
    let mut ze = Vec::with_capacity(n * de);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let mut total = 0.0;
        for _ in 0..dc {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let v = sign * spec.class_separation + noise;
            total += v;
            zc.push(v);
        }
        let clean = total > 0.0;
        let label = clean ^ rng.random_bool(spec.label_noise);
        let colour = label ^ rng.random_bool(spec.flip_prob);
        let code = if colour { 1.0 } else { -1.0 };
        ze.extend(std::iter::repeat_n(code, de));
        y.push(if label { 1.0 } else { 0.0 });
    }
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones < 2 || n - ones < 2 {
        return Err(Error::Degenerate(format!(
            "generated domain has {ones} positives out of {n}; need at least 2 per class"
        )));
    }
    let zc = Tensor::matrix(n, dc, zc)?;
    let ze = Tensor::matrix(n, de, ze)?;
    DomainDataset::new(
        format!("flip={}", spec.flip_prob),
        Tensor::concat_cols(&[&zc, &ze])?,
        y,
        Some(zc),
        Some(ze),
    )
}

/// Builds two domains with opposite pool-label associations: the first
/// takes class-1 rows from `pool_a` and class-0 rows from `pool_b`, the
/// second the reverse.
pub fn make_worst_case_split(pool_a: &DomainDataset, pool_b: &DomainDataset) -> Result<(DomainDataset, DomainDataset)> {
    if pool_a.dim() != pool_b.dim() {
        return Err(Error::Shape(format!(
            "pools have {} and {} features",
            pool_a.dim(),
            pool_b.dim()
        )));
    }
    let by_class = |pool: &DomainDataset| -> Result<(Vec<usize>, Vec<usize>)> {
        let labels = pool.binary_labels()?;
        let (mut zero, mut one) = (Vec::new(), Vec::new());
        for (i, l) in labels.into_iter().enumerate() {
            if l == 1 {
                one.push(i)
            } else {
                zero.push(i)
            }
        }
        if zero.is_empty() || one.is_empty() {
            return Err(Error::Degenerate(format!(
                "pool {} lacks one of the classes",
                pool.domain_id
            )));
        }
        Ok((zero, one))
    };
    let (a0, a1) = by_class(pool_a)?;
    let (b0, b1) = by_class(pool_b)?;
    let first = stack(
        &format!("{}|{}", pool_a.domain_id, pool_b.domain_id),
        &pool_a.subset(&a1)?,
        &pool_b.subset(&b0)?,
    )?;
    let second = stack(
        &format!("{}|{}", pool_b.domain_id, pool_a.domain_id),
        &pool_b.subset(&b1)?,
        &pool_a.subset(&a0)?,
    )?;
    Ok((first, second))
}

fn stack(id: &str, top: &DomainDataset, bottom: &DomainDataset) -> Result<DomainDataset> {
    let vstack = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        Tensor::matrix(a.rows() + b.rows(), a.cols(), data)
    };
    let latent = |a: &Option<Tensor>, b: &Option<Tensor>| -> Result<Option<Tensor>> {
        match (a, b) {
            (Some(a), Some(b)) if a.cols() == b.cols() => vstack(a, b).map(Some),
            _ => Ok(None),
        }
    };
    let mut targets = top.targets.clone();
    targets.extend_from_slice(&bottom.targets);
    DomainDataset::new(
        id,
        vstack(&top.features, &bottom.features)?,
        targets,
        latent(&top.latent_causal, &bottom.latent_causal)?,
        latent(&top.latent_spurious, &bottom.latent_spurious)?,
    )
}

/// Two uniform causes with a circular decision boundary:
/// `z1 ~ U(-r + d1, r + d1)`, `z2 ~ U(-r + d2, r + d2)`,
/// `y = 1[z1^2 + z2^2 > r^2]`.
pub fn sample_lemma1_counterexample(d1: f64, d2: f64, r: f64, n: usize, seed: u64) -> Result<DomainDataset> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Parameter(format!("radius must be positive, got {r}")));
    }
    if !(d1 >= 0.0 && d2 >= 0.0 && d1.is_finite() && d2.is_finite()) {
        return Err(Error::Parameter("offsets must be non-negative".into()));
    }
    if n == 0 {
        return Err(Error::Parameter("n must be at least 1".into()));
    }
    let mut rng = seeded(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let z1 = rng.random_range(-r + d1..r + d1);
        let z2 = rng.random_range(-r + d2..r + d2);
        x.extend_from_slice(&[z1, z2]);
        y.push(if z1 * z1 + z2 * z2 > r * r { 1.0 } else { 0.0 });
    }
    let feats = Tensor::matrix(n, 2, x)?;
    DomainDataset::new(format!("circle(d1={d1},d2={d2})"), feats.clone(), y, Some(feats), None)
}

/// The closed form `(2 sqrt(r^2 - z1^2) - d2) / (2r)` stated for the
/// circle counterexample.
pub fn lemma1_closed_form(z1: f64, d2: f64, r: f64) -> f64 {
    (2.0 * (r * r - z1 * z1).max(0.0).sqrt() - d2) / (2.0 * r)
}

/// `P(y = 1 | z1)` under [`sample_lemma1_counterexample`], by direct
/// integration of the uniform `z2` over the chord.
pub fn lemma1_exact_conditional(z1: f64, d2: f64, r: f64) -> f64 {
    let half_chord = (r * r - z1 * z1).max(0.0).sqrt();
    let lo = (-half_chord).max(-r + d2);
    let hi = half_chord.min(r + d2);
    1.0 - (hi - lo).max(0.0) / (2.0 * r)
}

/// Deterministic row partition into a `frac` share and the remainder.
pub fn split_train_val(ds: &DomainDataset, frac: f64, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Parameter(format!(
            "split fraction must be in (0, 1), got {frac}"
        )));
    }
    let n = ds.len();
    let n_first = (frac * n as f64).round() as usize;
    if n_first == 0 || n_first >= n {
        return Err(Error::Degenerate(format!(
            "splitting {n} rows at {frac} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let (a, b) = order.split_at_mut(n_first);
    a.sort_unstable();
    b.sort_unstable();
    Ok((ds.subset(a)?, ds.subset(b)?))
}
