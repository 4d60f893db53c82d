use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rlsd_bench::{fixture, short_config};
use rlsd_core::theory::{check_bayesian_identity, check_kl_decomposition, random_row};
use rlsd_core::trainer::StudentEval;
use rlsd_core::{
    sample_rollout, token_credits, ConditionalPolicy, CreditConfig, JointModel, PrefixExpansion, RlsdForm,
    SampleMode, TaskFamily, Trainer,
};

fn policy(c: &mut Criterion) {
    let (suite, params) = fixture(TaskFamily::ModularArithmeticChain, 72);
    let inst = &suite.instances[0];
    let r = inst.privileged[0].info.clone();
    c.bench_function("teacher_dist", |b| {
        let ctx = params.context(inst.id, Some(r.clone()), &inst.prompt, &[inst.gold]);
        b.iter(|| params.teacher_dist(black_box(&ctx)).unwrap())
    });
    c.bench_function("sample_rollout", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.iter(|| sample_rollout(&params, inst, &SampleMode::Student, &r, &mut rng, inst.max_len).unwrap())
    });
    c.bench_function("prefix_expansion", |b| b.iter(|| PrefixExpansion::run(&params, black_box(inst)).unwrap()));
    let refs: Vec<_> = suite.instances.iter().collect();
    c.bench_function("student_eval_suite", |b| b.iter(|| StudentEval::new(&params, black_box(&refs)).unwrap()));
}

fn credit(c: &mut Criterion) {
    let (suite, params) = fixture(TaskFamily::HiddenRuleSequence, 8);
    let inst = &suite.instances[0];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ro = sample_rollout(&params, inst, &SampleMode::Student, &inst.privileged[0].info, &mut rng, inst.max_len)
        .unwrap();
    let cfg = CreditConfig { eps_w: 0.2, lambda: 0.5, form: RlsdForm::Interpolated };
    c.bench_function("token_credits", |b| b.iter(|| token_credits(black_box(&ro), -0.7, &cfg).unwrap()));
}

fn theory(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..8).map(|_| random_row(&mut rng, 12, true)).collect();
    let prior = random_row(&mut rng, 8, false);
    let student = random_row(&mut rng, 12, false);
    c.bench_function("kl_decomposition", |b| {
        b.iter(|| check_kl_decomposition(black_box(&rows), &prior, &student).unwrap())
    });
    let joint = JointModel::random(&mut rng, 6, 5, 3).unwrap();
    c.bench_function("bayesian_identity_6x5", |b| b.iter(|| check_bayesian_identity(black_box(&joint)).unwrap()));
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for method in ["grpo", "opsd", "rlsd"] {
        let cfg = rlsd_core::TrainerConfig {
            method: serde_json::from_str(&format!("\"{method}\"")).unwrap(),
            ..short_config(1)
        };
        group.bench_function(method, |b| {
            b.iter_batched(
                || Trainer::new(cfg.clone()).unwrap(),
                |mut t| t.step(0).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, policy, credit, theory, training);
criterion_main!(benches);
