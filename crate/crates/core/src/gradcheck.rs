//! Finite-difference verification of tape gradients and jet second
//! derivatives. The checks replay the already-built graph with perturbed
//! leaf values, so the compared quantities go through exactly the same
//! arithmetic as training does.

use crate::autodiff::{AdError, Graph, Var};
use crate::nn::{self, MlpParams, MlpSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckResult {
    /// Total number of trainable scalars.
    pub n_params: usize,
    /// How many components were compared.
    pub checked: usize,
    /// Worst relative error over the checked components.
    pub max_rel: f64,
    /// Flat index of the worst component.
    pub worst_index: usize,
}

/// Compare the reverse-mode gradient of `loss` against central finite
/// differences of the replayed graph, checking at most `max_checks`
/// components (evenly strided). Relative errors are measured against
/// `max(|ad|, |fd|)` with a floor of `1e-6 * max |grad|` so negligible
/// components cannot dominate.
pub fn central_difference_check(
    g: &mut Graph,
    loss: Var,
    trainable: &[Var],
    h: f64,
    max_checks: usize,
) -> Result<GradCheckResult, AdError> {
    g.replay();
    g.backward(loss)?;

    let mut theta = Vec::new();
    let mut grads = Vec::new();
    for &v in trainable {
        theta.extend_from_slice(g.value(v));
        match g.grad(v) {
            Some(gr) => grads.extend_from_slice(gr),
            None => grads.extend(std::iter::repeat(0.0).take(g.value(v).len())),
        }
    }
    let n = theta.len();
    let gmax = grads.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-6 * gmax.max(1e-12);

    let write_theta = |g: &mut Graph, theta: &[f64]| {
        let mut off = 0;
        for &v in trainable {
            let len = g.value(v).len();
            g.set_leaf(v, &theta[off..off + len]).expect("shape fixed");
            off += len;
        }
    };

    let stride = n.div_ceil(max_checks.max(1)).max(1);
    let mut max_rel = 0.0f64;
    let mut worst_index = 0;
    let mut checked = 0;
    let mut work = theta.clone();
    for i in (0..n).step_by(stride) {
        work[i] = theta[i] + h;
        write_theta(g, &work);
        g.replay();
        let up = g.item(loss);
        work[i] = theta[i] - h;
        write_theta(g, &work);
        g.replay();
        let down = g.item(loss);
        work[i] = theta[i];
        let fd = (up - down) / (2.0 * h);
        let rel = (grads[i] - fd).abs() / grads[i].abs().max(fd.abs()).max(floor);
        if rel > max_rel {
            max_rel = rel;
            worst_index = i;
        }
        checked += 1;
    }
    write_theta(g, &theta);
    g.replay();

    Ok(GradCheckResult {
        n_params: n,
        checked,
        max_rel,
        worst_index,
    })
}

/// Worst relative error of the jet second derivatives of a scalar network
/// against central second differences of the plain forward pass, over all
/// input coordinates of the given points.
pub fn second_derivative_check(
    spec: &MlpSpec,
    params: &MlpParams,
    points: &Tensor,
    h: f64,
) -> f64 {
    use crate::jet::JetVal;
    let m = points.cols();
    let n = points.rows();

    let mut g = Graph::new();
    let leaves = nn::MlpLeaves::install(&mut g, spec, params);
    let pts = g.constant(points);
    let seeded = JetVal::seed_coordinates(&mut g, pts, &vec![true; m]);
    let out = nn::forward_jets(&mut g, spec, &leaves, &seeded).expect("plain network");

    let base = nn::infer(spec, params, points);
    let mut max_rel = 0.0f64;
    let mut all_second = Vec::new();
    for ch in &out.channels {
        let v = ch.t2.as_var(&mut g, n, 1).expect("second order requested");
        all_second.push(g.value(v).to_vec());
    }
    let floor = {
        let mag = all_second
            .iter()
            .flatten()
            .fold(0.0f64, |mx, v| mx.max(v.abs()));
        1e-6 * mag.max(1e-9)
    };
    for (j, second) in all_second.iter().enumerate() {
        let mut up = points.clone();
        let mut down = points.clone();
        for i in 0..n {
            up.set(i, j, points.get(i, j) + h);
            down.set(i, j, points.get(i, j) - h);
        }
        let f_up = nn::infer(spec, params, &up);
        let f_down = nn::infer(spec, params, &down);
        for i in 0..n {
            let fd = (f_up.get(i, 0) - 2.0 * base.get(i, 0) + f_down.get(i, 0)) / (h * h);
            let ad = second[i];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng::CounterRng;

    #[test]
    fn random_tanh_network_gradient_check() {
        // random 2-layer tanh net (17 parameters), gradient of a squared
        // output sum matches finite differences to < 1e-6
        let spec = MlpSpec::plain(2, 4, 1, Activation::Tanh, 1);
        let params = MlpParams::init(&spec, 8);
        assert_eq!(params.n_trainable(), 17);
        let mut rng = CounterRng::stream(5, 77);
        let mut batch = Tensor::zeros(6, 2);
        batch.data_mut().iter_mut().for_each(|v| *v = rng.normal());

        let mut g = Graph::new();
        let leaves = nn::MlpLeaves::install(&mut g, &spec, &params);
        let x = g.constant(&batch);
        let out = nn::forward(&mut g, &spec, &leaves, x, nn::Mode::Infer).unwrap();
        let sq = g.square(out.output);
        let loss = g.mean_all(sq);
        let r = central_difference_check(&mut g, loss, &leaves.trainable(), 1e-5, 17).unwrap();
        assert_eq!(r.n_params, 17);
        assert_eq!(r.checked, 17);
        assert!(r.max_rel < 1e-6, "max rel {:.2e}", r.max_rel);
    }

    #[test]
    fn second_derivatives_of_tanh_net_match_differences() {
        let spec = MlpSpec::plain(2, 6, 2, Activation::Tanh, 1);
        let params = MlpParams::init(&spec, 3);
        let mut rng = CounterRng::stream(9, 31);
        let mut pts = Tensor::zeros(8, 2);
        pts.data_mut().iter_mut().for_each(|v| *v = rng.uniform_in(-1.0, 1.0));
        let worst = second_derivative_check(&spec, &params, &pts, 1e-4);
        assert!(worst < 1e-5, "worst rel {worst:.2e}");
    }
}
