#![allow(dead_code)]

use rand::Rng;
use tcri_core::autodiff::{
    finite_difference_gradient, linear_head_grad_norm, max_relative_error, HeadLoss, NormKind, Tape, Var,
};
use tcri_core::kernels::{hsic_v, median_bandwidth, rbf_gram, CiPenalty};
use tcri_core::model::Trainable;
use tcri_core::objectives::{bind_batch, loss_ci, loss_irm, loss_phi, loss_phi_psi, BatchVars, DomainBatch};
use tcri_core::rng::seeded;
use tcri_core::{ArchConfig, DomainDataset, FeaturizerKind, Result, Task, TcriModel, Tensor};

pub const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-5;
pub const IRM_REL_TOL: f64 = 1e-4;
pub const REPS: u64 = 20;

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so kinks and poles stay out of the
/// finite-difference stencil.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let t = uniform(rng, shape, 0.1, 2.0);
    let signs = uniform(rng, shape, -1.0, 1.0);
    t.zip_map(&signs, |v, s| if s < 0.0 { -v } else { v }).unwrap()
}

/// Compares the tape gradient of `sum(f(x) * w)` with central differences,
/// for a fixed random weight `w` of the output's shape.
pub fn check_unary<F>(f: F, x: &Tensor, seed: u64) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let weighted = |tape: &mut Tape, out: Var| -> Var {
        let shape = tape.value(out).shape().to_vec();
        let w = uniform(&mut seeded(seed), &shape, -1.0, 1.0);
        let w = tape.constant(w);
        let p = tape.mul(out, w).unwrap();
        tape.sum(p)
    };
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v).unwrap();
    let loss = weighted(&mut tape, out);
    let analytic = tape.backward(loss).unwrap().wrt(v);
    let numeric = finite_difference_gradient(
        |p| {
            let mut t = Tape::new();
            let v = t.param(p.clone());
            let out = f(&mut t, v)?;
            let l = weighted(&mut t, out);
            t.value(l).item()
        },
        x,
        FD_STEP,
    )
    .unwrap();
    max_relative_error(&analytic, &numeric, FD_FLOOR)
}

/// Checks a two-input primitive with respect to each input in turn.
pub fn check_binary<F>(f: F, a: &Tensor, b: &Tensor, seed: u64) -> f64
where
    F: Fn(&mut Tape, Var, Var) -> Result<Var>,
{
    let wrt_a = check_unary(
        |t, v| {
            let c = t.constant(b.clone());
            f(t, v, c)
        },
        a,
        seed,
    );
    let wrt_b = check_unary(
        |t, v| {
            let c = t.constant(a.clone());
            f(t, c, v)
        },
        b,
        seed + 1,
    );
    wrt_a.max(wrt_b)
}

/// Worst relative error over `REPS` random draws for each primitive.
pub fn primitive_suite() -> Vec<(&'static str, f64)> {
    type Check = fn(&mut tcri_core::rng::Rng, u64) -> f64;
    let cases: Vec<(&'static str, Check)> = vec![
        ("add", |r, s| {
            check_binary(
                |t, a, b| t.add(a, b),
                &uniform(r, &[3, 4], -1.0, 1.0),
                &uniform(r, &[3, 4], -1.0, 1.0),
                s,
            )
        }),
        ("sub", |r, s| {
            check_binary(
                |t, a, b| t.sub(a, b),
                &uniform(r, &[3, 4], -1.0, 1.0),
                &uniform(r, &[3, 4], -1.0, 1.0),
                s,
            )
        }),
        ("mul", |r, s| {
            check_binary(
                |t, a, b| t.mul(a, b),
                &uniform(r, &[3, 4], -1.0, 1.0),
                &uniform(r, &[3, 4], -1.0, 1.0),
                s,
            )
        }),
        ("scale", |r, s| {
            check_unary(|t, a| Ok(t.scale(a, -1.7)), &uniform(r, &[3, 4], -1.0, 1.0), s)
        }),
        ("add_scalar", |r, s| {
            check_unary(|t, a| Ok(t.add_scalar(a, 0.3)), &uniform(r, &[3, 4], -1.0, 1.0), s)
        }),
        ("matmul", |r, s| {
            check_binary(
                |t, a, b| t.matmul(a, b),
                &uniform(r, &[3, 4], -1.0, 1.0),
                &uniform(r, &[4, 2], -1.0, 1.0),
                s,
            )
        }),
        ("transpose", |r, s| {
            check_unary(|t, a| t.transpose(a), &uniform(r, &[3, 4], -1.0, 1.0), s)
        }),
        ("add_row", |r, s| {
            check_binary(
                |t, a, b| t.add_row(a, b),
                &uniform(r, &[3, 4], -1.0, 1.0),
                &uniform(r, &[4], -1.0, 1.0),
                s,
            )
        }),
        ("relu", |r, s| {
            check_unary(|t, a| Ok(t.relu(a)), &away_from_zero(r, &[3, 4]), s)
        }),
        ("sigmoid", |r, s| {
            check_unary(|t, a| Ok(t.sigmoid(a)), &uniform(r, &[3, 4], -3.0, 3.0), s)
        }),
        ("exp", |r, s| {
            check_unary(|t, a| Ok(t.exp(a)), &uniform(r, &[3, 4], -2.0, 2.0), s)
        }),
        ("log", |r, s| {
            check_unary(|t, a| t.log(a), &uniform(r, &[3, 4], 0.2, 3.0), s)
        }),
        ("square", |r, s| {
            check_unary(|t, a| Ok(t.square(a)), &uniform(r, &[3, 4], -2.0, 2.0), s)
        }),
        ("softplus", |r, s| {
            check_unary(|t, a| Ok(t.softplus(a)), &uniform(r, &[3, 4], -4.0, 4.0), s)
        }),
        ("sum", |r, s| {
            check_unary(|t, a| Ok(t.sum(a)), &uniform(r, &[3, 4], -1.0, 1.0), s)
        }),
        ("mean", |r, s| {
            check_unary(|t, a| t.mean(a), &uniform(r, &[3, 4], -1.0, 1.0), s)
        }),
        ("concat", |r, s| {
            check_binary(
                |t, a, b| t.concat(&[a, b]),
                &uniform(r, &[3, 2], -1.0, 1.0),
                &uniform(r, &[3, 3], -1.0, 1.0),
                s,
            )
        }),
        ("slice_cols", |r, s| {
            check_unary(|t, a| t.slice_cols(a, 1, 3), &uniform(r, &[3, 4], -1.0, 1.0), s)
        }),
        ("select_rows", |r, s| {
            check_unary(|t, a| t.select_rows(a, &[2, 0, 2]), &uniform(r, &[3, 4], -1.0, 1.0), s)
        }),
        ("sq_dist", |r, s| {
            check_unary(|t, a| t.sq_dist(a), &uniform(r, &[5, 3], -1.0, 1.0), s)
        }),
        ("center_gram", |r, s| {
            check_unary(|t, a| t.center_gram(a), &uniform(r, &[4, 4], -1.0, 1.0), s)
        }),
        ("center_cols", |r, s| {
            check_unary(|t, a| t.center_cols(a), &uniform(r, &[5, 3], -1.0, 1.0), s)
        }),
        ("norm2", |r, s| {
            check_unary(|t, a| Ok(t.norm2(a)), &uniform(r, &[3, 4], -1.0, 1.0), s)
        }),
        ("reshape", |r, s| {
            check_unary(|t, a| t.reshape(a, &[2, 6]), &uniform(r, &[3, 4], -1.0, 1.0), s)
        }),
    ];
    cases
        .into_iter()
        .map(|(name, check)| {
            let worst = (0..REPS)
                .map(|rep| {
                    let mut rng = seeded(1000 + rep);
                    check(&mut rng, 7 * rep + 1)
                })
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// Small random problem for checking the loss terms.
pub struct TermProblem {
    pub model: TcriModel,
    pub data: DomainDataset,
    pub task: Task,
}

pub fn term_problem(seed: u64, task: Task) -> TermProblem {
    let mut rng = seeded(seed);
    let arch = ArchConfig {
        input_dim: 3,
        featurizer: FeaturizerKind::Linear,
        hidden_dim: 4,
        phi_dim: 2,
        psi_dim: 2,
        num_domains: 2,
        task,
        bias: true,
        theta_c_fixed: None,
    };
    let model = TcriModel::init(&arch, seed).unwrap();
    let n = 16;
    let x = uniform(&mut rng, &[n, 3], -1.5, 1.5);
    let targets: Vec<f64> = match task {
        // both classes present in equal numbers
        Task::Binary => (0..n).map(|i| (i % 2) as f64).collect(),
        Task::Regression => (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let data = DomainDataset::new("check", x, targets, None, None).unwrap();
    TermProblem { model, data, task }
}

pub const Y_BINS: usize = 2;

fn with_batch<T>(
    model: &TcriModel,
    p: &TermProblem,
    f: impl FnOnce(&mut Tape, &tcri_core::model::BoundModel, &BatchVars, &DomainBatch) -> T,
) -> T {
    let batch = DomainBatch::new(&p.data, 0, p.task, Y_BINS).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::ALL);
    let vars = bind_batch(&mut tape, &bound, &batch).unwrap();
    f(&mut tape, &bound, &vars, &batch)
}

/// Tape gradient of a term against central differences of `value`, over
/// every trainable parameter.
pub fn check_term<B, V>(p: &TermProblem, build: B, value: V) -> f64
where
    B: Fn(&mut Tape, &tcri_core::model::BoundModel, &BatchVars, &DomainBatch) -> Var,
    V: Fn(&TcriModel) -> f64,
{
    let grads = with_batch(&p.model, p, |tape, bound, vars, batch| {
        let loss = build(tape, bound, vars, batch);
        let g = tape.backward(loss).unwrap();
        p.model.collect_gradients(tape, bound, &g)
    });
    let mut worst: f64 = 0.0;
    for (name, analytic) in grads {
        let base = p
            .model
            .params()
            .into_iter()
            .find(|(n, _)| *n == name)
            .unwrap()
            .1
            .clone();
        let numeric = finite_difference_gradient(
            |t| {
                let mut m = p.model.clone();
                *m.param_mut(&name).unwrap() = t.clone();
                Ok(value(&m))
            },
            &base,
            FD_STEP,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&analytic, &numeric, FD_FLOOR));
    }
    worst
}

pub fn tape_value(
    p: &TermProblem,
    model: &TcriModel,
    build: impl Fn(&mut Tape, &tcri_core::model::BoundModel, &BatchVars, &DomainBatch) -> Var,
) -> f64 {
    with_batch(model, p, |tape, bound, vars, batch| {
        let v = build(tape, bound, vars, batch);
        tape.value(v).item().unwrap()
    })
}

/// Class-averaged HSIC computed from Gram matrices with the bandwidths
/// frozen at `bandwidths` (one pair per contributing class).
pub fn frozen_bandwidth_ci(model: &TcriModel, p: &TermProblem, bandwidths: &[(f64, f64)]) -> f64 {
    let batch = DomainBatch::new(&p.data, 0, p.task, Y_BINS).unwrap();
    let (phi, psi) = model.representations(&p.data.features).unwrap();
    let mut total = 0.0;
    let mut used = 0;
    for k in 0..batch.num_classes {
        let rows: Vec<usize> = (0..batch.classes.len()).filter(|&i| batch.classes[i] == k).collect();
        if rows.len() < 2 {
            continue;
        }
        let a = phi.select_rows(&rows).unwrap();
        let b = psi.select_rows(&rows).unwrap();
        let (ha, hb) = bandwidths[used];
        total += hsic_v(&rbf_gram(&a, ha).unwrap(), &rbf_gram(&b, hb).unwrap()).unwrap();
        used += 1;
    }
    total / used as f64
}

pub fn class_bandwidths(p: &TermProblem) -> Vec<(f64, f64)> {
    let batch = DomainBatch::new(&p.data, 0, p.task, Y_BINS).unwrap();
    let (phi, psi) = p.model.representations(&p.data.features).unwrap();
    (0..batch.num_classes)
        .filter_map(|k| {
            let rows: Vec<usize> = (0..batch.classes.len()).filter(|&i| batch.classes[i] == k).collect();
            (rows.len() >= 2).then(|| {
                (
                    median_bandwidth(&phi.select_rows(&rows).unwrap()).unwrap(),
                    median_bandwidth(&psi.select_rows(&rows).unwrap()).unwrap(),
                )
            })
        })
        .collect()
}

/// Worst relative error over `REPS` draws for each loss term, with the
/// tolerance that applies to it.
pub fn term_suite() -> Vec<(&'static str, f64, f64)> {
    let mut worst = [0.0f64; 5];
    for rep in 0..REPS {
        let task = if rep % 2 == 0 { Task::Binary } else { Task::Regression };
        let p = term_problem(500 + rep, task);
        let phi = |t: &mut Tape, b: &tcri_core::model::BoundModel, v: &BatchVars, _: &DomainBatch| {
            loss_phi(t, b, v, task).unwrap()
        };
        worst[0] = worst[0].max(check_term(&p, phi, |m| tape_value(&p, m, phi)));
        let dom = |t: &mut Tape, b: &tcri_core::model::BoundModel, v: &BatchVars, _: &DomainBatch| {
            loss_phi_psi(t, b, v, task, 1).unwrap()
        };
        worst[1] = worst[1].max(check_term(&p, dom, |m| tape_value(&p, m, dom)));
        let irm = |t: &mut Tape, b: &tcri_core::model::BoundModel, v: &BatchVars, _: &DomainBatch| {
            loss_irm(t, b, v, task, NormKind::L2).unwrap()
        };
        worst[2] = worst[2].max(check_term(&p, irm, |m| tape_value(&p, m, irm)));
        let irm2 = |t: &mut Tape, b: &tcri_core::model::BoundModel, v: &BatchVars, _: &DomainBatch| {
            loss_irm(t, b, v, task, NormKind::SquaredL2).unwrap()
        };
        worst[2] = worst[2].max(check_term(&p, irm2, |m| tape_value(&p, m, irm2)));
        let hs = class_bandwidths(&p);
        let ci = |t: &mut Tape, _: &tcri_core::model::BoundModel, v: &BatchVars, d: &DomainBatch| {
            loss_ci(t, v, d, CiPenalty::Hsic).unwrap().0
        };
        worst[3] = worst[3].max(check_term(&p, ci, |m| frozen_bandwidth_ci(m, &p, &hs)));
        let cov = |t: &mut Tape, _: &tcri_core::model::BoundModel, v: &BatchVars, d: &DomainBatch| {
            loss_ci(t, v, d, CiPenalty::Cov).unwrap().0
        };
        worst[4] = worst[4].max(check_term(&p, cov, |m| tape_value(&p, m, cov)));
    }
    vec![
        ("l_phi", worst[0], REL_TOL),
        ("l_phi_psi", worst[1], REL_TOL),
        ("l_irm", worst[2], IRM_REL_TOL),
        ("l_ci (hsic)", worst[3], REL_TOL),
        ("l_ci (cov)", worst[4], REL_TOL),
    ]
}

/// Upstream gradient of the closed-form head penalty against central
/// differences in the representation.
pub fn irm_upstream_error(seed: u64, loss: HeadLoss, norm: NormKind) -> f64 {
    let mut rng = seeded(seed);
    let z = uniform(&mut rng, &[10, 3], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 1], -1.0, 1.0);
    let y: Vec<f64> = match loss {
        HeadLoss::Squared => (0..10).map(|_| rng.random_range(-1.0..1.0)).collect(),
        HeadLoss::Logistic => (0..10).map(|i| (i % 2) as f64).collect(),
    };
    let build = |tape: &mut Tape, zv: Var| -> Result<Var> {
        let wv = tape.param(w.clone());
        let bv = tape.param(Tensor::vector(vec![0.1]).unwrap());
        let yv = tape.constant(Tensor::column(&y).unwrap());
        linear_head_grad_norm(tape, zv, wv, Some(bv), yv, loss, norm)
    };
    check_unary(build, &z, seed)
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let v: Vec<f64> = (0..rows * cols)
        .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng))
        .collect();
    Tensor::matrix(rows, cols, v).unwrap()
}

/// Largest elementwise gap between `rbf_gram` and a direct double loop.
pub fn gram_brute_force_error(seed: u64) -> f64 {
    let x = uniform(&mut seeded(seed), &[20, 3], -2.0, 2.0);
    let h = 0.8;
    let k = rbf_gram(&x, h).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        for j in 0..20 {
            let d2: f64 = (0..3).map(|c| (x.get(i, c) - x.get(j, c)).powi(2)).sum();
            worst = worst.max((k.matrix.get(i, j) - (-d2 / (2.0 * h * h)).exp()).abs());
        }
    }
    worst
}

/// Fraction of repetitions in which HSIC of independent samples falls
/// below the 95th percentile of its permutation null.
pub fn independence_pass_rate(reps: u64, n: usize, permutations: usize) -> f64 {
    use tcri_core::kernels::hsic_permutation_null;
    let mut passes = 0;
    for rep in 0..reps {
        let mut rng = seeded(7000 + rep);
        let x = normal(&mut rng, n, 1);
        let y = normal(&mut rng, n, 1);
        let kx = rbf_gram(&x, median_bandwidth(&x).unwrap()).unwrap();
        let ky = rbf_gram(&y, median_bandwidth(&y).unwrap()).unwrap();
        let stat = hsic_v(&kx, &ky).unwrap();
        let mut null = hsic_permutation_null(&kx, &ky, permutations, 9000 + rep).unwrap();
        null.sort_by(f64::total_cmp);
        let q95 = null[(0.95 * permutations as f64).ceil() as usize - 1];
        if stat < q95 {
            passes += 1;
        }
    }
    passes as f64 / reps as f64
}

/// Conditional and unconditional HSIC for two noisy copies of a label.
pub fn label_confounded(seed: u64) -> (f64, f64) {
    use tcri_core::kernels::{conditional_hsic, hsic_median};
    let mut rng = seeded(seed);
    let n = 400;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let e1 = normal(&mut rng, n, 1);
    let e2 = normal(&mut rng, n, 1);
    let phi = Tensor::matrix(n, 1, (0..n).map(|i| labels[i] as f64 + 0.1 * e1.data()[i]).collect()).unwrap();
    let psi = Tensor::matrix(n, 1, (0..n).map(|i| labels[i] as f64 + 0.1 * e2.data()[i]).collect()).unwrap();
    let cond = conditional_hsic(&phi, &psi, &labels, 2).unwrap().value;
    (cond, hsic_median(&phi, &psi).unwrap())
}
