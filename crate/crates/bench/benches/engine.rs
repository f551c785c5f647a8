//! Benchmarks of the hot paths: graph replay and backward on the
//! collocation loss, path simulation, and one training step of the BSDE
//! reference configuration.

use criterion::{criterion_group, criterion_main, Criterion};
use nplab_core::autodiff::Graph;
use nplab_core::deep_bsde as bsde;
use nplab_core::feynman_kac as fk;
use nplab_core::nn::{self, Activation, MlpParams, MlpSpec};
use nplab_core::pinn::{self, SampleCounts};
use nplab_core::Var;
use std::hint::black_box;

fn eikonal_loss_graph() -> (Graph, Var) {
    let problem = pinn::eikonal();
    let spec = MlpSpec::plain(2, 20, 2, Activation::LeakyRelu(0.1), 1);
    let params = MlpParams::init(&spec, 0);
    let sets =
        pinn::sample_training_sets(&problem, SampleCounts::new(2000, 25, 50, 0), 0.0, 0).unwrap();
    let mut g = Graph::new();
    let leaves = nn::MlpLeaves::install(&mut g, &spec, &params);
    let loss =
        pinn::loss_vars(&mut g, &problem, &spec, &leaves, None, &sets, Default::default())
            .unwrap();
    (g, loss.total)
}

fn bench_replay(c: &mut Criterion) {
    let (mut g, _) = eikonal_loss_graph();
    c.bench_function("eikonal_loss_replay_2000pts", |b| {
        b.iter(|| {
            g.replay();
            black_box(g.len());
        })
    });
}

fn bench_backward(c: &mut Criterion) {
    let (mut g, loss) = eikonal_loss_graph();
    c.bench_function("eikonal_loss_replay_backward_2000pts", |b| {
        b.iter(|| {
            g.replay();
            g.backward(loss).unwrap();
            black_box(g.grad(loss));
        })
    });
}

fn bench_em_sampling(c: &mut Criterion) {
    let p = fk::heat_potential(10);
    c.bench_function("euler_maruyama_4096_paths_d10_n20", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            black_box(fk::sample_em(&p, 4096, seed).unwrap());
        })
    });
}

fn bench_bsde_step(c: &mut Criterion) {
    let p = bsde::lqg_hjb(100);
    let steps = 20;
    let params = bsde::BsdeParams::init(&p, steps, 2, 110, 0);
    let paths = bsde::simulate_forward(&p, steps, 64, 0).unwrap();
    let mut rg = bsde::build_rollout(&p, &params, &paths, nn::Mode::Train).unwrap();
    c.bench_function("bsde_reference_replay_backward", |b| {
        b.iter(|| {
            rg.g.replay();
            rg.g.backward(rg.loss).unwrap();
            black_box(rg.g.item(rg.loss));
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_replay, bench_backward, bench_em_sampling, bench_bsde_step
}
criterion_main!(benches);
