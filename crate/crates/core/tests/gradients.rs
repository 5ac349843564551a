mod common;

use common::*;
use tcri_core::autodiff::{grad_of_grad_norm, HeadLoss, NormKind};
use tcri_core::rng::seeded;

#[test]
fn primitives_match_central_differences() {
    for (name, err) in primitive_suite() {
        assert!(err < REL_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn loss_terms_match_central_differences() {
    for (name, err, tol) in term_suite() {
        assert!(err < tol, "{name}: relative error {err:e} (tolerance {tol:e})");
    }
}

#[test]
fn closed_form_head_penalty_upstream() {
    for rep in 0..REPS {
        for loss in [HeadLoss::Squared, HeadLoss::Logistic] {
            for norm in [NormKind::L2, NormKind::SquaredL2] {
                let err = irm_upstream_error(900 + rep, loss, norm);
                assert!(err < IRM_REL_TOL, "{loss:?} {norm:?}: {err:e}");
            }
        }
    }
}

#[test]
fn generic_penalty_agrees_with_closed_form() {
    // squared loss of a linear head: grad_w = (2/n) Z^T (Z w - y)
    let mut rng = seeded(31);
    for _ in 0..REPS {
        let z = uniform(&mut rng, &[8, 2], -1.0, 1.0);
        let w = uniform(&mut rng, &[2, 1], -1.0, 1.0);
        let y = uniform(&mut rng, &[8, 1], -1.0, 1.0);
        let yc = y.clone();
        let out = grad_of_grad_norm(
            |tape, theta, ups| {
                let yv = tape.constant(yc.clone());
                let s = tape.matmul(ups[0], theta)?;
                let d = tape.sub(s, yv)?;
                let sq = tape.square(d);
                tape.mean(sq)
            },
            &w,
            std::slice::from_ref(&z),
            NormKind::L2,
        )
        .unwrap();
        let resid = z.matmul(&w).unwrap().zip_map(&y, |a, b| a - b).unwrap();
        let g = z.transpose().unwrap().matmul(&resid).unwrap().map(|v| 2.0 * v / 8.0);
        assert!((out.value - g.norm()).abs() < 1e-12);
        let numeric = tcri_core::autodiff::finite_difference_gradient(
            |zz| {
                let r = zz.matmul(&w)?.zip_map(&y, |a, b| a - b)?;
                Ok(zz.transpose()?.matmul(&r)?.map(|v| 2.0 * v / 8.0).norm())
            },
            &z,
            FD_STEP,
        )
        .unwrap();
        let err = tcri_core::autodiff::max_relative_error(&out.upstream[0], &numeric, FD_FLOOR);
        assert!(err < IRM_REL_TOL, "generic upstream error {err:e}");
    }
}
