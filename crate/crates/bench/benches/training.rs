use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use tcri_bench::{colored_domains, mlp};
use tcri_core::autodiff::Tape;
use tcri_core::kernels::CiPenalty;
use tcri_core::model::Trainable;
use tcri_core::objectives::{bind_batch, loss_ci, DomainBatch};
use tcri_core::trainer::{objective, train};
use tcri_core::{Task, TcriHyperParams, TrainConfig};

fn steps(c: &mut Criterion) {
    let domains = colored_domains(200);
    let model = mlp(domains[0].features.cols(), domains.len());
    let one_step = TrainConfig {
        learning_rate: 0.1,
        max_steps: 1,
        log_every: 1,
        ..TrainConfig::default()
    };
    for (name, hp) in [("erm", TcriHyperParams::erm()), ("tcri", TcriHyperParams::tcri())] {
        c.bench_function(&format!("objective/{name}"), |b| {
            b.iter(|| objective(black_box(&model), &domains, &hp).unwrap())
        });
        c.bench_function(&format!("train_step/{name}"), |b| {
            b.iter(|| train(model.clone(), black_box(&domains), &hp, &one_step).unwrap())
        });
    }

    let batch = DomainBatch::new(&domains[0], 0, Task::Binary, 4).unwrap();
    c.bench_function("backward/ci_term", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, Trainable::ALL);
            let vars = bind_batch(&mut tape, &bound, &batch).unwrap();
            let (v, _) = loss_ci(&mut tape, &vars, &batch, CiPenalty::Hsic).unwrap();
            black_box(tape.backward(v).unwrap())
        })
    });
}

criterion_group!(benches, steps);
criterion_main!(benches);
