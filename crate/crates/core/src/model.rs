//! Two-headed representation model.
//!
//! A shared featurizer feeds a domain-general head `phi` and a
//! domain-specific head `psi`. A single linear predictor `theta_c` reads
//! `phi` and is the only predictor used at test time; each training domain
//! also owns a linear predictor over the concatenation `phi ⊕ psi`.
//!
//! Linear weights are stored `[in, out]`, so a 2-to-1 head is a 2x1 matrix
//! whose entries read as `(phi[0][0], phi[1][0])`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::scm::fmt_f64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Regression,
    #[serde(alias = "binary-classification")]
    Binary,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::Binary => "binary",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeaturizerKind {
    Identity,
    Linear,
    /// One hidden layer followed by a ReLU.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub featurizer: FeaturizerKind,
    /// Featurizer output width; ignored for the identity featurizer.
    #[serde(default)]
    pub hidden_dim: usize,
    pub phi_dim: usize,
    pub psi_dim: usize,
    pub num_domains: usize,
    pub task: Task,
    #[serde(default = "default_true")]
    pub bias: bool,
    /// Pins `theta_c` to a constant weight that is never trained.
    #[serde(default)]
    pub theta_c_fixed: Option<f64>,
}

fn default_true() -> bool {
    true
}

impl ArchConfig {
    /// Linear model for the continuous two-domain simulation: identity
    /// featurizer, 2-to-1 heads without bias, `theta_c` fixed at 1.
    pub fn linear_regression(num_domains: usize) -> Self {
        Self {
            input_dim: 2,
            featurizer: FeaturizerKind::Identity,
            hidden_dim: 0,
            phi_dim: 1,
            psi_dim: 1,
            num_domains,
            task: Task::Regression,
            bias: false,
            theta_c_fixed: Some(1.0),
        }
    }

    pub fn feature_width(&self) -> usize {
        match self.featurizer {
            FeaturizerKind::Identity => self.input_dim,
            _ => self.hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let zero = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Parameter(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        zero("input_dim", self.input_dim)?;
        zero("phi_dim", self.phi_dim)?;
        zero("psi_dim", self.psi_dim)?;
        zero("num_domains", self.num_domains)?;
        if self.featurizer != FeaturizerKind::Identity {
            zero("hidden_dim", self.hidden_dim)?;
        }
        if let Some(v) = self.theta_c_fixed {
            if !v.is_finite() {
                return Err(Error::Parameter("theta_c_fixed must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    fn init(rng: &mut crate::rng::Rng, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        let weight = Tensor::from_raw(vec![fan_in, fan_out], draw(fan_in * fan_out));
        let bias = bias.then(|| Tensor::from_raw(vec![fan_out], draw(fan_out)));
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLinear {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundLinear {
            weight: leaf(&self.weight),
            bias: self.bias.as_ref().map(leaf),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => tape.add_row(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Featurizer {
    Identity,
    Linear(Linear),
    Mlp(Linear),
}

impl Featurizer {
    fn layer(&self) -> Option<&Linear> {
        match self {
            Featurizer::Identity => None,
            Featurizer::Linear(l) | Featurizer::Mlp(l) => Some(l),
        }
    }

    fn layer_mut(&mut self) -> Option<&mut Linear> {
        match self {
            Featurizer::Identity => None,
            Featurizer::Linear(l) | Featurizer::Mlp(l) => Some(l),
        }
    }

    pub fn kind(&self) -> FeaturizerKind {
        match self {
            Featurizer::Identity => FeaturizerKind::Identity,
            Featurizer::Linear(_) => FeaturizerKind::Linear,
            Featurizer::Mlp(_) => FeaturizerKind::Mlp,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Featurizer::Identity => Ok(x.clone()),
            Featurizer::Linear(l) => l.forward(x),
            Featurizer::Mlp(l) => Ok(l.forward(x)?.map(|v| v.max(0.0))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TcriModel {
    pub featurizer: Featurizer,
    pub phi: Linear,
    pub psi: Linear,
    pub theta_c: Linear,
    pub theta_domains: Vec<Linear>,
    pub task: Task,
    pub theta_c_frozen: bool,
    input_dim: usize,
}

/// Which parameter groups receive gradient when a model is bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub featurizer: bool,
    pub phi: bool,
    pub psi: bool,
    pub theta_c: bool,
    pub theta_domains: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        featurizer: true,
        phi: true,
        psi: true,
        theta_c: true,
        theta_domains: true,
    };
    pub const NONE: Trainable = Trainable {
        featurizer: false,
        phi: false,
        psi: false,
        theta_c: false,
        theta_domains: false,
    };
}

/// A model's parameters recorded as leaves on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    featurizer: Option<BoundLinear>,
    relu: bool,
    pub phi: BoundLinear,
    pub psi: BoundLinear,
    pub theta_c: BoundLinear,
    pub theta_domains: Vec<BoundLinear>,
}

/// Intermediate values of one forward pass on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Representations {
    pub phi: Var,
    pub psi: Var,
}

impl BoundModel {
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &self.featurizer {
            None => Ok(x),
            Some(l) => {
                let h = l.forward(tape, x)?;
                Ok(if self.relu { tape.relu(h) } else { h })
            }
        }
    }

    pub fn representations(&self, tape: &mut Tape, x: Var) -> Result<Representations> {
        let h = self.features(tape, x)?;
        Ok(Representations {
            phi: self.phi.forward(tape, h)?,
            psi: self.psi.forward(tape, h)?,
        })
    }

    pub fn general_scores(&self, tape: &mut Tape, reps: Representations) -> Result<Var> {
        self.theta_c.forward(tape, reps.phi)
    }

    pub fn domain_scores(&self, tape: &mut Tape, reps: Representations, domain: usize) -> Result<Var> {
        let head = self.theta_domains.get(domain).ok_or_else(|| {
            Error::Parameter(format!(
                "domain index {domain} out of range for {} domain heads",
                self.theta_domains.len()
            ))
        })?;
        let joint = tape.concat(&[reps.phi, reps.psi])?;
        head.forward(tape, joint)
    }
}

/// Visits each (name, layer) pair in a fixed order.
macro_rules! for_each_layer {
    ($model:expr, $bound:expr, |$name:ident, $layer:ident, $b:ident| $body:block) => {{
        if let (Some($layer), Some($b)) = ($model.featurizer_layer(), $bound.featurizer.as_ref()) {
            let $name = "featurizer".to_string();
            $body
        }
        {
            let ($name, $layer, $b) = ("phi".to_string(), &$model.phi, &$bound.phi);
            $body
        }
        {
            let ($name, $layer, $b) = ("psi".to_string(), &$model.psi, &$bound.psi);
            $body
        }
        {
            let ($name, $layer, $b) = ("theta_c".to_string(), &$model.theta_c, &$bound.theta_c);
            $body
        }
        for (i, ($layer, $b)) in $model.theta_domains.iter().zip(&$bound.theta_domains).enumerate() {
            let $name = format!("theta_domain.{i}");
            $body
        }
    }};
}

impl TcriModel {
    /// Weights and biases i.i.d. uniform in `±1/sqrt(fan_in)`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seeded(seed);
        let width = arch.feature_width();
        let featurizer = match arch.featurizer {
            FeaturizerKind::Identity => Featurizer::Identity,
            FeaturizerKind::Linear => Featurizer::Linear(Linear::init(&mut rng, arch.input_dim, width, arch.bias)),
            FeaturizerKind::Mlp => Featurizer::Mlp(Linear::init(&mut rng, arch.input_dim, width, arch.bias)),
        };
        let phi = Linear::init(&mut rng, width, arch.phi_dim, arch.bias);
        let psi = Linear::init(&mut rng, width, arch.psi_dim, arch.bias);
        let theta_c = match arch.theta_c_fixed {
            Some(v) => Linear {
                weight: Tensor::filled(&[arch.phi_dim, 1], v),
                bias: None,
            },
            None => Linear::init(&mut rng, arch.phi_dim, 1, arch.bias),
        };
        let theta_domains = (0..arch.num_domains)
            .map(|_| Linear::init(&mut rng, arch.phi_dim + arch.psi_dim, 1, arch.bias))
            .collect();
        Ok(Self {
            featurizer,
            phi,
            psi,
            theta_c,
            theta_domains,
            task: arch.task,
            theta_c_frozen: arch.theta_c_fixed.is_some(),
            input_dim: arch.input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_domains(&self) -> usize {
        self.theta_domains.len()
    }

    pub fn featurizer_layer(&self) -> Option<&Linear> {
        self.featurizer.layer()
    }

    /// Whether the domain heads and loss admit an exact least-squares solve.
    pub fn supports_ols_heads(&self) -> bool {
        self.task == Task::Regression
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.require_matrix("model input")?;
        if d != self.input_dim {
            return Err(Error::Shape(format!(
                "model expects {} input columns, got {d}",
                self.input_dim
            )));
        }
        Ok(())
    }

    /// `theta_c(phi(F(x)))` as raw scores. Reads only the featurizer, `phi`
    /// and `theta_c`.
    pub fn forward_general(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let h = self.featurizer.forward(x)?;
        let z = self.phi.forward(&h)?;
        Ok(self.theta_c.forward(&z)?.into_data())
    }

    /// `theta_domain(phi(F(x)) ⊕ psi(F(x)))` for one training domain.
    pub fn forward_domain(&self, x: &Tensor, domain: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let head = self.theta_domains.get(domain).ok_or_else(|| {
            Error::Parameter(format!(
                "domain index {domain} out of range for {} domain heads",
                self.theta_domains.len()
            ))
        })?;
        let (z, p) = self.representations(x)?;
        Ok(head.forward(&Tensor::concat_cols(&[&z, &p])?)?.into_data())
    }

    /// `(phi(F(x)), psi(F(x)))`.
    pub fn representations(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let h = self.featurizer.forward(x)?;
        Ok((self.phi.forward(&h)?, self.psi.forward(&h)?))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> BoundModel {
        BoundModel {
            featurizer: self.featurizer.layer().map(|l| l.bind(tape, trainable.featurizer)),
            relu: matches!(self.featurizer, Featurizer::Mlp(_)),
            phi: self.phi.bind(tape, trainable.phi),
            psi: self.psi.bind(tape, trainable.psi),
            theta_c: self.theta_c.bind(tape, trainable.theta_c && !self.theta_c_frozen),
            theta_domains: self
                .theta_domains
                .iter()
                .map(|l| l.bind(tape, trainable.theta_domains))
                .collect(),
        }
    }

    /// Gradient of every trainable leaf of `bound`, keyed by parameter name.
    pub fn collect_gradients(&self, tape: &Tape, bound: &BoundModel, grads: &Gradients) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for_each_layer!(self, bound, |name, _layer, b| {
            if tape.requires_grad(b.weight) {
                out.push((format!("{name}.weight"), grads.wrt(b.weight)));
            }
            if let Some(bv) = b.bias {
                if tape.requires_grad(bv) {
                    out.push((format!("{name}.bias"), grads.wrt(bv)));
                }
            }
        });
        out
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        fn push<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, l: &'a Linear) {
            out.push((format!("{name}.weight"), &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("{name}.bias"), b));
            }
        }
        let mut out = Vec::new();
        if let Some(l) = self.featurizer.layer() {
            push(&mut out, "featurizer", l);
        }
        push(&mut out, "phi", &self.phi);
        push(&mut out, "psi", &self.psi);
        push(&mut out, "theta_c", &self.theta_c);
        for (i, l) in self.theta_domains.iter().enumerate() {
            push(&mut out, &format!("theta_domain.{i}"), l);
        }
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (layer, field) = name.rsplit_once('.')?;
        let lin = match layer {
            "featurizer" => self.featurizer.layer_mut()?,
            "phi" => &mut self.phi,
            "psi" => &mut self.psi,
            "theta_c" => &mut self.theta_c,
            other => {
                let idx: usize = other.strip_prefix("theta_domain.")?.parse().ok()?;
                self.theta_domains.get_mut(idx)?
            }
        };
        match field {
            "weight" => Some(&mut lin.weight),
            "bias" => lin.bias.as_mut(),
            _ => None,
        }
    }

    /// Serializes to the text checkpoint format: a header, model metadata,
    /// then one `param <name> <rank> <dims..>` record per tensor followed by
    /// its values on one line.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::from("tcri-checkpoint 1\n");
        let _ = writeln!(s, "task {}", self.task.as_str());
        let kind = match self.featurizer.kind() {
            FeaturizerKind::Identity => "identity",
            FeaturizerKind::Linear => "linear",
            FeaturizerKind::Mlp => "mlp",
        };
        let _ = writeln!(s, "featurizer {kind}");
        let _ = writeln!(s, "input_dim {}", self.input_dim);
        let _ = writeln!(s, "theta_c_frozen {}", self.theta_c_frozen);
        for (name, t) in self.params() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(s, "param {name} {} {}", t.shape().len(), dims.join(" "));
            let vals: Vec<String> = t.data().iter().map(|&v| fmt_f64(v)).collect();
            let _ = writeln!(s, "{}", vals.join(" "));
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let err = |m: String| Error::parse("checkpoint", m);
        let mut lines = text.lines();
        if lines.next() != Some("tcri-checkpoint 1") {
            return Err(err("missing or unsupported header".into()));
        }
        let mut meta = BTreeMap::new();
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        while let Some(line) = lines.next() {
            let mut parts = line.split_whitespace();
            let Some(key) = parts.next() else { continue };
            if key == "param" {
                let name = parts.next().ok_or_else(|| err("param without name".into()))?;
                let rank: usize = parts
                    .next()
                    .and_then(|r| r.parse().ok())
                    .ok_or_else(|| err(format!("{name}: bad rank")))?;
                let dims: Vec<usize> = parts
                    .map(|d| d.parse().map_err(|_| err(format!("{name}: bad dimension {d}"))))
                    .collect::<Result<_>>()?;
                if dims.len() != rank {
                    return Err(err(format!("{name}: rank {rank} with {} dims", dims.len())));
                }
                let values = lines.next().ok_or_else(|| err(format!("{name}: missing values")))?;
                let data: Vec<f64> = values
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| err(format!("{name}: bad value {v}"))))
                    .collect::<Result<_>>()?;
                params.insert(name.to_string(), Tensor::new(dims, data)?);
            } else {
                let value = parts.collect::<Vec<_>>().join(" ");
                meta.insert(key.to_string(), value);
            }
        }
        let get_meta = |k: &str| meta.get(k).ok_or_else(|| err(format!("missing {k}")));
        let task = match get_meta("task")?.as_str() {
            "regression" => Task::Regression,
            "binary" => Task::Binary,
            other => return Err(err(format!("unknown task {other}"))),
        };
        let input_dim: usize = get_meta("input_dim")?
            .parse()
            .map_err(|_| err("bad input_dim".into()))?;
        let theta_c_frozen = get_meta("theta_c_frozen")? == "true";
        fn take(params: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Linear> {
            let weight = params
                .remove(&format!("{name}.weight"))
                .ok_or_else(|| Error::parse("checkpoint", format!("missing {name}.weight")))?;
            Ok(Linear {
                weight,
                bias: params.remove(&format!("{name}.bias")),
            })
        }
        let mut take_layer = |name: &str| take(&mut params, name);
        let featurizer = match get_meta("featurizer")?.as_str() {
            "identity" => Featurizer::Identity,
            "linear" => Featurizer::Linear(take_layer("featurizer")?),
            "mlp" => Featurizer::Mlp(take_layer("featurizer")?),
            other => return Err(err(format!("unknown featurizer {other}"))),
        };
        let phi = take_layer("phi")?;
        let psi = take_layer("psi")?;
        let theta_c = take_layer("theta_c")?;
        let mut theta_domains = Vec::new();
        while params.contains_key(&format!("theta_domain.{}.weight", theta_domains.len())) {
            theta_domains.push(take(&mut params, &format!("theta_domain.{}", theta_domains.len()))?);
        }
        if let Some(extra) = params.keys().next() {
            return Err(err(format!("unexpected parameter {extra}")));
        }
        Ok(Self {
            featurizer,
            phi,
            psi,
            theta_c,
            theta_domains,
            task,
            theta_c_frozen,
            input_dim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}
