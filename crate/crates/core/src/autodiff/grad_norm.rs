//! Penalties on the norm of a gradient, differentiated once more.
//!
//! Two routes are provided. [`linear_head_grad_norm`] writes the inner
//! gradient of a linear head's risk in closed form as ordinary tape
//! operations, so its upstream gradient is exact. [`grad_of_grad_norm`]
//! handles an arbitrary risk: it takes the inner gradient by a backward
//! pass and obtains the mixed second derivative as a central difference of
//! upstream gradients along the normalized inner-gradient direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    L2,
    #[serde(rename = "squared-l2")]
    SquaredL2,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::L2 => "l2",
            NormKind::SquaredL2 => "squared-l2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadLoss {
    /// Mean squared error.
    Squared,
    /// Mean logistic loss on raw scores with {0, 1} targets.
    Logistic,
}

#[derive(Clone, Debug)]
pub struct GradNorm {
    /// `||grad_theta risk||` (or its square).
    pub value: f64,
    /// The inner gradient itself.
    pub theta_grad: Tensor,
    /// Gradient of `value` with respect to each upstream tensor.
    pub upstream: Vec<Tensor>,
}

/// Norm of `grad_theta risk` and its gradient with respect to `upstream`.
///
/// `risk` builds the scalar risk on a fresh tape from `theta` and the
/// upstream parameters. At a point where the inner gradient vanishes the
/// unsquared norm is not differentiable; the subgradient 0 is returned.
pub fn grad_of_grad_norm<F>(risk: F, theta: &Tensor, upstream: &[Tensor], norm: NormKind) -> Result<GradNorm>
where
    F: Fn(&mut Tape, Var, &[Var]) -> Result<Var>,
{
    let eval = |theta: &Tensor| -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let t = tape.param(theta.clone());
        let ups: Vec<Var> = upstream.iter().map(|u| tape.param(u.clone())).collect();
        let loss = risk(&mut tape, t, &ups)?;
        let grads = tape.backward(loss)?;
        Ok((grads.wrt(t), ups.iter().map(|&u| grads.wrt(u)).collect()))
    };

    let (g, _) = eval(theta)?;
    let gnorm = g.norm();
    let value = match norm {
        NormKind::L2 => gnorm,
        NormKind::SquaredL2 => gnorm * gnorm,
    };
    if !gnorm.is_finite() {
        return Err(Error::NonFinite("inner gradient norm".into()));
    }
    if gnorm == 0.0 {
        let upstream = upstream.iter().map(|u| Tensor::zeros(u.shape())).collect();
        return Ok(GradNorm {
            value,
            theta_grad: g,
            upstream,
        });
    }

    // d||g||/d(phi) = u^T d(grad_theta R)/d(phi) = d/de grad_phi R(theta + e u)
    let dir = g.map(|v| v / gnorm);
    let step = 1e-4 * theta.norm().max(1.0);
    let shifted = |sign: f64| theta.zip_map(&dir, |t, d| t + sign * step * d);
    let (_, plus) = eval(&shifted(1.0)?)?;
    let (_, minus) = eval(&shifted(-1.0)?)?;
    let chain = match norm {
        NormKind::L2 => 1.0,
        NormKind::SquaredL2 => 2.0 * gnorm,
    };
    let upstream = plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| p.zip_map(m, |a, b| chain * (a - b) / (2.0 * step)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradNorm {
        value,
        theta_grad: g,
        upstream,
    })
}

/// Norm of the gradient of a linear head's risk with respect to the head's
/// weight (and bias), recorded on `tape` so it can be differentiated into
/// the representation `z`.
///
/// Scores are `z w + b`. With `r = dloss/dscore` per example, the inner
/// gradient is `(z^T r, sum r)`; both pieces are affine in `r`, so building
/// them from tape primitives gives exact second-order transport.
pub fn linear_head_grad_norm(
    tape: &mut Tape,
    z: Var,
    weight: Var,
    bias: Option<Var>,
    targets: Var,
    loss: HeadLoss,
    norm: NormKind,
) -> Result<Var> {
    let n = tape.value(z).rows();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut scores = tape.matmul(z, weight)?;
    if let Some(b) = bias {
        scores = tape.add_row(scores, b)?;
    }
    let r = match loss {
        HeadLoss::Squared => {
            let resid = tape.sub(scores, targets)?;
            tape.scale(resid, 2.0 / n as f64)
        }
        HeadLoss::Logistic => {
            let p = tape.sigmoid(scores);
            let resid = tape.sub(p, targets)?;
            tape.scale(resid, 1.0 / n as f64)
        }
    };
    let zt = tape.transpose(z)?;
    let gw = tape.matmul(zt, r)?;
    let p = tape.value(gw).numel();
    let mut pieces = vec![tape.reshape(gw, &[1, p])?];
    if bias.is_some() {
        let gb = tape.sum(r);
        pieces.push(tape.reshape(gb, &[1, 1])?);
    }
    let g = tape.concat(&pieces)?;
    Ok(match norm {
        NormKind::L2 => tape.norm2(g),
        NormKind::SquaredL2 => {
            let sq = tape.square(g);
            tape.sum(sq)
        }
    })
}
