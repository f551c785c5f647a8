use nplab_core::feynman_kac as fk;
use nplab_core::nn::{self, Activation, MlpSpec};
use nplab_core::optimize::LrSchedule;
use nplab_core::tensor::Tensor;
use nplab_core::train::TrainConfig;

#[test]
fn fk_probe_linear() {
    for (sigma, bn, batch, lr0) in [
        (0.005f64, false, 256usize, 1e-3f64),
        (0.02, false, 2048, 1e-3),
        (0.02, false, 2048, 3e-3),
        (0.005, false, 2048, 1e-3),
        (0.05, false, 2048, 3e-3),
        (0.02, false, 256, 3e-3),
    ] {
    let mut p = fk::heat(2);
    p.diffusion = fk::Diffusion::ConstIso(sigma);
    p.terminal = Box::new(|x| x.iter().sum());
    p.exact = Some(Box::new(|x| x.iter().sum()));
    let spec = if bn { MlpSpec::batch_norm_stack(2, 32, 2, Activation::Tanh, 1) } else { MlpSpec::plain(2, 32, 2, Activation::Tanh, 1) };
    let schedule = LrSchedule::piecewise(vec![10_000, 16_000], vec![lr0, lr0 * 0.1, lr0 * 0.01]);
    let cfg = TrainConfig::new(20_000, 11, schedule).with_batch(batch);
    let run = fk::train_regression(&p, &spec, &cfg).unwrap();
    let mut grid = Tensor::zeros(41 * 41, 2);
    for i in 0..41 {
        for j in 0..41 {
            grid.set(i * 41 + j, 0, -1.0 + i as f64 / 20.0);
            grid.set(i * 41 + j, 1, -1.0 + j as f64 / 20.0);
        }
    }
    let pred = nn::infer(&spec, &run.params, &grid);
    let mut mean_off = 0.0;
    let mut worst = 0.0f64;
    for k in 0..41 * 41 {
        let exact = grid.get(k, 0) + grid.get(k, 1);
        let e = pred.get(k, 0) - exact;
        mean_off += e;
        worst = worst.max(e.abs());
    }
    mean_off /= (41 * 41) as f64;
    println!("sigma={sigma} bn={bn} batch={batch} lr0={lr0}: mean offset {mean_off:.4}, Linf {worst:.4}");
    }
}
