//! Regression solver for linear Kolmogorov/parabolic equations: sample
//! `(x, y)` pairs from the associated diffusion, fit a network to the
//! conditional expectation by mean-squared error, and estimate errors
//! against exact solutions by Monte Carlo.
//!
//! The target variable of a path is
//!
//! ```text
//! y = sum_n R_n f(t_n, x_n) dt + R_N g(x_N),
//! R_0 = 1,  R_{n+1} = R_n exp(-r(t_n, x_n) dt)
//! ```
//!
//! which collapses to `y = g(x_N)` without source and potential terms.

use crate::autodiff::{AdError, Graph};
use crate::nn::{self, MlpLeaves, MlpParams, MlpSpec, NnError};
use crate::optimize::{AdamState, OptError};
use crate::rng::{derive_seed, streams, CounterRng};
use crate::tensor::Tensor;
use crate::train::{BoxDomain, EpochRecord, RunResult, RunStatus, TrainConfig};
use rayon::prelude::*;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FkError {
    #[error("unknown problem {0:?}")]
    UnknownProblem(String),
    #[error("sampler/problem mode mismatch: {0}")]
    ModeMismatch(&'static str),
    #[error("path {path} became non-finite at step {step}")]
    BlowUp { path: usize, step: usize },
    #[error("operation requires an exact solution")]
    MissingExact,
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Opt(#[from] OptError),
}

pub type VectorField = Box<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
pub type ScalarField = Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type Terminal = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Diffusion coefficient. The exact Gaussian sampler requires a constant
/// matrix (or isotropic constant).
pub enum Diffusion {
    /// `sigma = c * I`.
    ConstIso(f64),
    /// Constant `d x d` matrix.
    ConstMatrix(Tensor),
    /// State-dependent `d x d` matrix written into the output tensor.
    General(Box<dyn Fn(f64, &[f64], &mut Tensor) + Send + Sync>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Direct draw of the terminal state (zero drift, constant diffusion).
    ExactGaussian,
    /// Euler-Maruyama stepping on a uniform grid.
    EulerMaruyama { steps: usize },
}

pub struct KolmogorovProblem {
    pub name: &'static str,
    pub dim: usize,
    /// Domain of interest on which the solution is learned.
    pub domain: BoxDomain,
    pub horizon: f64,
    pub drift: Option<VectorField>,
    pub diffusion: Diffusion,
    pub terminal: Terminal,
    /// Non-negative potential `r(t, x)`.
    pub potential: Option<ScalarField>,
    pub source: Option<ScalarField>,
    pub sampling: SamplingMode,
    /// Exact solution `u(0, x)` on the domain of interest, when known.
    pub exact: Option<Terminal>,
}

/// Registered problems: `heat` (exact Gaussian sampling) and
/// `heat-potential` (Euler-Maruyama with constant potential and source).
pub fn problem(key: &str, dim: usize) -> Result<KolmogorovProblem, FkError> {
    match key {
        "heat" => Ok(heat(dim)),
        "heat-potential" => Ok(heat_potential(dim)),
        other => Err(FkError::UnknownProblem(other.to_string())),
    }
}

pub fn problem_keys() -> &'static [&'static str] {
    &["heat", "heat-potential"]
}

/// Heat equation with `sigma = sqrt(2) I` and `g(x) = |x|^2`; the solution
/// learned at the horizon is `|x|^2 + 2 T d`.
pub fn heat(dim: usize) -> KolmogorovProblem {
    let horizon = 1.0;
    KolmogorovProblem {
        name: "heat",
        dim,
        domain: BoxDomain::symmetric_unit(dim),
        horizon,
        drift: None,
        diffusion: Diffusion::ConstIso(2f64.sqrt()),
        terminal: Box::new(|x| x.iter().map(|v| v * v).sum()),
        potential: None,
        source: None,
        sampling: SamplingMode::ExactGaussian,
        exact: Some(Box::new(move |x| {
            x.iter().map(|v| v * v).sum::<f64>() + 2.0 * horizon * dim as f64
        })),
    }
}

/// Heat dynamics with constant potential `r = 0.1` and constant source
/// `f = 1`, sampled by Euler-Maruyama; closed-form solution
/// `(1 - e^{-rT})/r + e^{-rT} (|x|^2 + 2 T d)`.
pub fn heat_potential(dim: usize) -> KolmogorovProblem {
    let horizon = 1.0;
    let r = 0.1;
    KolmogorovProblem {
        name: "heat-potential",
        dim,
        domain: BoxDomain::symmetric_unit(dim),
        horizon,
        drift: None,
        diffusion: Diffusion::ConstIso(2f64.sqrt()),
        terminal: Box::new(|x| x.iter().map(|v| v * v).sum()),
        potential: Some(Box::new(move |_, _| r)),
        source: Some(Box::new(|_, _| 1.0)),
        sampling: SamplingMode::EulerMaruyama { steps: 20 },
        exact: Some(Box::new(move |x| {
            let g_mean = x.iter().map(|v| v * v).sum::<f64>() + 2.0 * horizon * dim as f64;
            (1.0 - (-r * horizon).exp()) / r + (-r * horizon).exp() * g_mean
        })),
    }
}

/// One batch of simulated paths: starts, terminal states, regression
/// targets and the per-path discount accumulators.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub starts: Tensor,
    pub terminals: Tensor,
    pub targets: Tensor,
    pub discounts: Tensor,
}

// --- sampling kernels -------------------------------------------------------

/// Terminal state of the exactly sampled Gaussian case:
/// `x + sqrt(T) * sigma xi`.
pub fn gaussian_terminal(
    start: &[f64],
    diffusion: &Diffusion,
    horizon: f64,
    xi: &[f64],
    out: &mut [f64],
) {
    let st = horizon.sqrt();
    match diffusion {
        Diffusion::ConstIso(c) => {
            for j in 0..start.len() {
                out[j] = start[j] + c * st * xi[j];
            }
        }
        Diffusion::ConstMatrix(m) => {
            let d = start.len();
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += m.get(i, j) * xi[j];
                }
                out[i] = start[i] + st * acc;
            }
        }
        Diffusion::General(_) => unreachable!("exact sampling requires constant diffusion"),
    }
}

/// Step one Euler-Maruyama path in place, accumulating the discounted
/// target. `hook` observes `(step, t_n, state, discount)` before every step
/// and once more after the final step.
fn em_path(
    problem: &KolmogorovProblem,
    steps: usize,
    x: &mut [f64],
    rng: &mut CounterRng,
    mut hook: impl FnMut(usize, f64, &[f64], f64),
) -> Result<(f64, f64), usize> {
    let d = problem.dim;
    let dt = problem.horizon / steps as f64;
    let sqrt_dt = dt.sqrt();
    let mut discount = 1.0;
    let mut target = 0.0;
    let mut dw = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut sigma_buf = match &problem.diffusion {
        Diffusion::General(_) => Some(Tensor::zeros(d, d)),
        _ => None,
    };

    for n in 0..steps {
        let t_n = n as f64 * dt;
        hook(n, t_n, x, discount);
        if let Some(f) = &problem.source {
            target += discount * f(t_n, x) * dt;
        }
        let decay = problem
            .potential
            .as_ref()
            .map(|r| (-r(t_n, x) * dt).exp());

        for w in dw.iter_mut() {
            *w = rng.normal() * sqrt_dt;
        }
        if let Some(mu) = &problem.drift {
            mu(t_n, x, &mut scratch);
            for j in 0..d {
                x[j] += scratch[j] * dt;
            }
        }
        match &problem.diffusion {
            Diffusion::ConstIso(c) => {
                for j in 0..d {
                    x[j] += c * dw[j];
                }
            }
            Diffusion::ConstMatrix(m) => {
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += m.get(i, j) * dw[j];
                    }
                    scratch[i] = acc;
                }
                for j in 0..d {
                    x[j] += scratch[j];
                }
            }
            Diffusion::General(s) => {
                let buf = sigma_buf.as_mut().unwrap();
                s(t_n, x, buf);
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += buf.get(i, j) * dw[j];
                    }
                    scratch[i] = acc;
                }
                for j in 0..d {
                    x[j] += scratch[j];
                }
            }
        }
        if let Some(f) = decay {
            discount *= f;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(n);
        }
    }
    hook(steps, problem.horizon, x, discount);
    target += discount * (problem.terminal)(x);
    Ok((target, discount))
}

/// Euler-Maruyama trace of one path for diagnostics: the discount
/// accumulator at every grid time (length `steps + 1`).
pub fn em_discount_trace(
    problem: &KolmogorovProblem,
    start: &[f64],
    seed: u64,
) -> Result<Vec<f64>, FkError> {
    let steps = match problem.sampling {
        SamplingMode::EulerMaruyama { steps } => steps,
        _ => return Err(FkError::ModeMismatch("trace requires Euler-Maruyama mode")),
    };
    let mut x = start.to_vec();
    let mut rng = CounterRng::stream(seed, streams::PATH_BASE);
    let mut trace = Vec::with_capacity(steps + 1);
    em_path(problem, steps, &mut x, &mut rng, |_, _, _, r| trace.push(r))
        .map_err(|step| FkError::BlowUp { path: 0, step })?;
    Ok(trace)
}

enum StartRule<'a> {
    Uniform,
    Fixed(&'a [f64]),
}

fn simulate_batch(
    problem: &KolmogorovProblem,
    n: usize,
    seed: u64,
    stream_base: u64,
    start: StartRule,
) -> Result<PathBatch, FkError> {
    let d = problem.dim;
    let mut starts = Tensor::zeros(n, d);
    let mut terminals = Tensor::zeros(n, d);
    let mut targets = Tensor::zeros(n, 1);
    let mut discounts = Tensor::zeros(n, 1);

    match problem.sampling {
        SamplingMode::ExactGaussian => {
            if problem.drift.is_some() {
                return Err(FkError::ModeMismatch("exact sampling requires zero drift"));
            }
            if matches!(problem.diffusion, Diffusion::General(_)) {
                return Err(FkError::ModeMismatch(
                    "exact sampling requires constant diffusion",
                ));
            }
            let lo = &problem.domain.lo;
            let hi = &problem.domain.hi;
            starts
                .data_mut()
                .par_chunks_mut(d)
                .zip(terminals.data_mut().par_chunks_mut(d))
                .zip(targets.data_mut().par_chunks_mut(1))
                .zip(discounts.data_mut().par_chunks_mut(1))
                .enumerate()
                .for_each(|(i, (((s, term), y), r))| {
                    let mut rng = CounterRng::stream(seed, stream_base + i as u64);
                    match start {
                        StartRule::Uniform => rng.fill_uniform_in(lo, hi, s),
                        StartRule::Fixed(x0) => s.copy_from_slice(x0),
                    }
                    let mut xi = vec![0.0; d];
                    rng.fill_normal(&mut xi);
                    gaussian_terminal(s, &problem.diffusion, problem.horizon, &xi, term);
                    y[0] = (problem.terminal)(term);
                    r[0] = 1.0;
                });
        }
        SamplingMode::EulerMaruyama { steps } => {
            if steps == 0 {
                return Err(FkError::BadConfig("Euler-Maruyama needs at least 1 step".into()));
            }
            let lo = &problem.domain.lo;
            let hi = &problem.domain.hi;
            let failures: Vec<Option<usize>> = starts
                .data_mut()
                .par_chunks_mut(d)
                .zip(terminals.data_mut().par_chunks_mut(d))
                .zip(targets.data_mut().par_chunks_mut(1))
                .zip(discounts.data_mut().par_chunks_mut(1))
                .enumerate()
                .map(|(i, (((s, term), y), r))| {
                    let mut rng = CounterRng::stream(seed, stream_base + i as u64);
                    match start {
                        StartRule::Uniform => rng.fill_uniform_in(lo, hi, s),
                        StartRule::Fixed(x0) => s.copy_from_slice(x0),
                    }
                    term.copy_from_slice(s);
                    match em_path(problem, steps, term, &mut rng, |_, _, _, _| {}) {
                        Ok((target, discount)) => {
                            y[0] = target;
                            r[0] = discount;
                            None
                        }
                        Err(step) => Some(step),
                    }
                })
                .collect();
            if let Some((path, step)) = failures
                .iter()
                .enumerate()
                .find_map(|(p, f)| f.map(|s| (p, s)))
            {
                return Err(FkError::BlowUp { path, step });
            }
        }
    }
    Ok(PathBatch {
        starts,
        terminals,
        targets,
        discounts,
    })
}

/// Draw `n` training pairs by exact Gaussian sampling: uniform starts on
/// the domain of interest, terminal `x + sigma sqrt(T) xi`, target
/// `g(terminal)`.
pub fn sample_exact(problem: &KolmogorovProblem, n: usize, seed: u64) -> Result<PathBatch, FkError> {
    if !matches!(problem.sampling, SamplingMode::ExactGaussian) {
        return Err(FkError::ModeMismatch("problem is not in exact-sampling mode"));
    }
    simulate_batch(problem, n, seed, streams::PATH_BASE, StartRule::Uniform)
}

/// Draw `n` training pairs by Euler-Maruyama simulation with the
/// discounted-source target accumulation.
pub fn sample_em(problem: &KolmogorovProblem, n: usize, seed: u64) -> Result<PathBatch, FkError> {
    if !matches!(problem.sampling, SamplingMode::EulerMaruyama { .. }) {
        return Err(FkError::ModeMismatch("problem is not in Euler-Maruyama mode"));
    }
    simulate_batch(problem, n, seed, streams::PATH_BASE, StartRule::Uniform)
}

fn sample_any(
    problem: &KolmogorovProblem,
    n: usize,
    seed: u64,
    stream_base: u64,
    start: StartRule,
) -> Result<PathBatch, FkError> {
    simulate_batch(problem, n, seed, stream_base, start)
}

/// Monte Carlo estimate of `u(0, x)` for a fixed start: sample mean of the
/// target variable and its CLT standard error.
pub fn mc_reference(
    problem: &KolmogorovProblem,
    x: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64), FkError> {
    if n_samples < 2 {
        return Err(FkError::BadConfig("reference estimate needs n >= 2".into()));
    }
    if x.len() != problem.dim {
        return Err(FkError::BadConfig("start dimension mismatch".into()));
    }
    let batch = sample_any(
        problem,
        n_samples,
        seed,
        streams::REFERENCE_BASE,
        StartRule::Fixed(x),
    )?;
    let ys = batch.targets.data();
    let mean = ys.iter().sum::<f64>() / n_samples as f64;
    let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n_samples - 1) as f64;
    Ok((mean, (var / n_samples as f64).sqrt()))
}

/// Sampled error of the network against the exact solution over the domain
/// of interest: `(mean abs error, mean abs error / mean |exact|, max abs)`.
pub fn domain_error(
    problem: &KolmogorovProblem,
    spec: &MlpSpec,
    params: &MlpParams,
    n_eval: usize,
    seed: u64,
) -> Result<(f64, f64, f64), FkError> {
    domain_error_of(problem, |pts| nn::infer(spec, params, pts), n_eval, seed)
}

/// [`domain_error`] for any predictor, e.g. an oracle wrapper around the
/// exact solution itself.
pub fn domain_error_of(
    problem: &KolmogorovProblem,
    predict: impl Fn(&Tensor) -> Tensor,
    n_eval: usize,
    seed: u64,
) -> Result<(f64, f64, f64), FkError> {
    let exact = problem.exact.as_ref().ok_or(FkError::MissingExact)?;
    let d = problem.dim;
    let mut pts = Tensor::zeros(n_eval, d);
    let mut rng = CounterRng::stream(seed, streams::EVAL_BASE);
    for i in 0..n_eval {
        for j in 0..d {
            pts.data_mut()[i * d + j] = rng.uniform_in(problem.domain.lo[j], problem.domain.hi[j]);
        }
    }
    let pred = predict(&pts);
    let mut abs_sum = 0.0;
    let mut exact_sum = 0.0;
    let mut linf = 0.0f64;
    for i in 0..n_eval {
        let e = exact(pts.row_slice(i));
        let err = (pred.get(i, 0) - e).abs();
        abs_sum += err;
        exact_sum += e.abs();
        linf = linf.max(err);
    }
    let abs_l1 = abs_sum / n_eval as f64;
    let rel_l1 = abs_l1 / (exact_sum / n_eval as f64).max(1e-300);
    Ok((abs_l1, rel_l1, linf))
}

pub struct FkRun {
    pub result: RunResult,
    pub params: MlpParams,
}

/// Fit the network to the conditional expectation: every epoch draws a
/// fresh batch (there is no fixed dataset to overfit) and takes one Adam
/// step on the batch mean squared error.
pub fn train_regression(
    problem: &KolmogorovProblem,
    spec: &MlpSpec,
    cfg: &TrainConfig,
) -> Result<FkRun, FkError> {
    spec.validate()?;
    if spec.input_dim != problem.dim || spec.output_dim != 1 {
        return Err(FkError::BadConfig(format!(
            "network must map {} inputs to 1 output",
            problem.dim
        )));
    }
    if cfg.batch < 2 {
        return Err(FkError::BadConfig("batch size must be at least 2".into()));
    }
    let started = Instant::now();
    let mut params = MlpParams::init(spec, cfg.seed);

    // Graph built once on a placeholder batch; leaves are refreshed and the
    // graph replayed every epoch.
    let first = sample_any(
        problem,
        cfg.batch,
        cfg.seed,
        epoch_stream_base(0, cfg.batch),
        StartRule::Uniform,
    )?;
    let mut g = Graph::new();
    let leaves = MlpLeaves::install(&mut g, spec, &params);
    let x_leaf = g.input(&first.starts);
    let y_leaf = g.input(&first.targets);
    let fwd = nn::forward(&mut g, spec, &leaves, x_leaf, nn::Mode::Train)?;
    let diff = g.sub(y_leaf, fwd.output);
    let sq = g.square(diff);
    let loss = g.mean_all(sq);

    let mut theta = params.flatten();
    let mut adam = AdamState::new(theta.len());
    let mut grads = vec![0.0; theta.len()];
    let trainable = leaves.trainable();

    let mut records = Vec::new();
    let mut status = RunStatus::Completed;

    for epoch in 0..=cfg.epochs {
        if epoch > 0 {
            let batch = sample_any(
                problem,
                cfg.batch,
                cfg.seed,
                epoch_stream_base(epoch, cfg.batch),
                StartRule::Uniform,
            )?;
            g.set_leaf(x_leaf, batch.starts.data())?;
            g.set_leaf(y_leaf, batch.targets.data())?;
            g.replay();
        }
        let total = g.item(loss);
        let mut rec = EpochRecord {
            epoch,
            total_loss: total,
            lr: (epoch > 0).then(|| cfg.schedule.lr_at(epoch - 1)),
            wall_s: started.elapsed().as_secs_f64(),
            ..Default::default()
        };
        let eval_due = problem.exact.is_some()
            && cfg.eval_interval > 0
            && (epoch % cfg.eval_interval == 0 || epoch == cfg.epochs);
        if eval_due {
            params.assign_flat(&theta);
            let (abs_l1, rel_l1, linf) =
                domain_error(problem, spec, &params, cfg.eval_points, cfg.seed)?;
            rec.abs_l1 = Some(abs_l1);
            rec.rel_l1 = Some(rel_l1);
            rec.linf = Some(linf);
        }
        records.push(rec);
        if !total.is_finite() {
            status = RunStatus::Diverged { epoch };
            break;
        }
        if epoch == cfg.epochs {
            break;
        }
        if let Some(thr) = cfg.stop_below {
            if total < thr {
                status = RunStatus::ReachedThreshold { epoch };
                break;
            }
        }

        g.backward(loss)?;
        let mut off = 0;
        for &v in &trainable {
            let (r, c) = g.shape(v);
            let n = r * c;
            match g.grad(v) {
                Some(grad) => grads[off..off + n].copy_from_slice(grad),
                None => grads[off..off + n].fill(0.0),
            }
            off += n;
        }
        match adam.step(&mut theta, &grads, cfg.schedule.lr_at(epoch)) {
            Ok(()) => {}
            Err(OptError::NonFiniteGradient(_)) => {
                status = RunStatus::Diverged { epoch: epoch + 1 };
                break;
            }
            Err(e) => return Err(e.into()),
        }
        leaves.set_trainable_flat(&mut g, &theta);
        nn::update_running_stats(&mut params, &g, &fwd);
    }

    params.assign_flat(&theta);
    let final_params = params.to_named("");
    Ok(FkRun {
        result: RunResult {
            records,
            status,
            seed: cfg.seed,
            wall_clock_s: started.elapsed().as_secs_f64(),
            final_params,
        },
        params,
    })
}

fn epoch_stream_base(epoch: usize, batch: usize) -> u64 {
    streams::PATH_BASE + (epoch as u64) * (batch as u64)
}

/// Derive an independent seed for one run of a multi-run experiment.
pub fn run_seed(base: u64, run: u64) -> u64 {
    derive_seed(base, run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::optimize::LrSchedule;

    #[test]
    fn forced_zero_noise_keeps_start() {
        let start = [0.3, -0.7, 1.1];
        let xi = [0.0; 3];
        let mut out = [0.0; 3];
        gaussian_terminal(&start, &Diffusion::ConstIso(2f64.sqrt()), 1.0, &xi, &mut out);
        assert_eq!(out, start);
    }

    #[test]
    fn zero_diffusion_keeps_start_exactly() {
        let mut p = heat(4);
        p.diffusion = Diffusion::ConstIso(0.0);
        let b = sample_exact(&p, 32, 5).unwrap();
        assert_eq!(b.starts.data(), b.terminals.data());
        assert!(b.discounts.data().iter().all(|&r| r == 1.0));
    }

    #[test]
    fn exact_sampler_matches_gaussian_moment() {
        // E |terminal - start|^2 = 2 d T for sigma = sqrt(2) I
        let d = 100;
        let p = heat(d);
        let n = 200_000;
        let b = sample_exact(&p, n, 1).unwrap();
        let mut mean = 0.0;
        for i in 0..n {
            let s = b.starts.row_slice(i);
            let t = b.terminals.row_slice(i);
            mean += s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        mean /= n as f64;
        let expected = 2.0 * d as f64;
        assert!(
            (mean - expected).abs() < 0.01 * expected,
            "mean {mean} vs {expected}"
        );
    }

    #[test]
    fn deterministic_euler_hits_exact_endpoint() {
        // mu = 1, sigma = 0 from x = 0 over T = 1: terminal is exactly 1
        // when dt is a power of two, and y = g(terminal) = 1 for g = id.
        let mut p = heat(1);
        p.drift = Some(Box::new(|_, _, out| out[0] = 1.0));
        p.diffusion = Diffusion::ConstIso(0.0);
        p.terminal = Box::new(|x| x[0]);
        p.sampling = SamplingMode::EulerMaruyama { steps: 16 };
        p.domain = BoxDomain::new(vec![-1e-12], vec![1e-12]);
        let b = sample_any(&p, 4, 3, streams::PATH_BASE, StartRule::Fixed(&[0.0])).unwrap();
        for i in 0..4 {
            assert_eq!(b.terminals.get(i, 0), 1.0);
            assert_eq!(b.targets.get(i, 0), 1.0);
        }
    }

    #[test]
    fn constant_potential_discount_is_exponential() {
        let p = heat_potential(3);
        let trace = em_discount_trace(&p, &[0.1, 0.2, -0.3], 7).unwrap();
        assert_eq!(trace.len(), 21);
        for (n, r) in trace.iter().enumerate() {
            let t_n = n as f64 * p.horizon / 20.0;
            assert!(
                (r - (-0.1 * t_n).exp()).abs() < 1e-12,
                "step {n}: {r} vs {}",
                (-0.1f64 * t_n).exp()
            );
        }
    }

    #[test]
    fn constant_source_accumulates_t_times_c() {
        // f = c, r = 0, g = 0: y = c * T exactly on a power-of-two grid
        let mut p = heat(2);
        p.diffusion = Diffusion::ConstIso(1.0);
        p.terminal = Box::new(|_| 0.0);
        p.source = Some(Box::new(|_, _| 2.5));
        p.sampling = SamplingMode::EulerMaruyama { steps: 16 };
        p.exact = None;
        let b = sample_em(&p, 8, 11).unwrap();
        for i in 0..8 {
            assert_eq!(b.targets.get(i, 0), 2.5);
            assert_eq!(b.discounts.get(i, 0), 1.0);
        }
    }

    #[test]
    fn discount_nonincreasing_for_nonnegative_potential() {
        let mut p = heat(2);
        p.potential = Some(Box::new(|_, x| x[0].abs() + 0.5 * x[1].abs()));
        p.sampling = SamplingMode::EulerMaruyama { steps: 25 };
        p.exact = None;
        for seed in 0..20 {
            let trace = em_discount_trace(&p, &[0.4, -0.9], seed).unwrap();
            assert!(trace.windows(2).all(|w| w[1] <= w[0]));
            assert!(trace.iter().all(|&r| r > 0.0 && r <= 1.0));
        }
    }

    #[test]
    fn sampling_is_deterministic_in_the_seed() {
        let p = heat_potential(5);
        let a = sample_em(&p, 64, 17).unwrap();
        let b = sample_em(&p, 64, 17).unwrap();
        assert_eq!(a.targets.data(), b.targets.data());
        assert_eq!(a.terminals.data(), b.terminals.data());
        let c = sample_em(&p, 64, 18).unwrap();
        assert_ne!(a.targets.data(), c.targets.data());
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let p = heat(2);
        assert!(matches!(
            sample_em(&p, 4, 0),
            Err(FkError::ModeMismatch(_))
        ));
        let q = heat_potential(2);
        assert!(matches!(
            sample_exact(&q, 4, 0),
            Err(FkError::ModeMismatch(_))
        ));
    }

    #[test]
    fn blow_up_reports_the_step() {
        let mut p = heat(1);
        p.drift = Some(Box::new(|t, _, out| {
            out[0] = if t >= 0.5 { f64::INFINITY } else { 0.0 }
        }));
        p.sampling = SamplingMode::EulerMaruyama { steps: 10 };
        p.exact = None;
        match sample_em(&p, 3, 0) {
            Err(FkError::BlowUp { step, .. }) => assert_eq!(step, 5),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn constant_terminal_reference_has_zero_error() {
        let mut p = heat(3);
        p.terminal = Box::new(|_| 4.25);
        p.exact = None;
        let (est, se) = mc_reference(&p, &[0.0; 3], 500, 2).unwrap();
        assert_eq!(est, 4.25);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn heat_reference_matches_closed_form_within_standard_errors() {
        let d = 100;
        let p = heat(d);
        let x = vec![0.0; d];
        let (est, se) = mc_reference(&p, &x, 100_000, 4).unwrap();
        let expected = 2.0 * d as f64;
        assert!(
            (est - expected).abs() < 4.0 * se,
            "estimate {est} +- {se} vs {expected}"
        );
    }

    #[test]
    fn standard_error_scales_as_inverse_sqrt_n() {
        let p = heat(2);
        let x = [0.25, -0.5];
        let (_, se_small) = mc_reference(&p, &x, 10_000, 9).unwrap();
        let (_, se_large) = mc_reference(&p, &x, 1_000_000, 9).unwrap();
        let ratio = se_small / se_large;
        assert!(
            (ratio - 10.0).abs() < 2.0,
            "SE ratio {ratio} should be near 10"
        );
    }

    #[test]
    fn regression_minimiser_is_the_conditional_mean() {
        // Two-point input domain with a finite table of outcomes; brute
        // force the population MSE over a value-table grid and compare the
        // argmin against the conditional means.
        let outcomes = [
            (0usize, 1.0f64),
            (0, 3.0),
            (0, 2.0),
            (1, -1.0),
            (1, 0.5),
        ];
        let cond_mean = |k: usize| {
            let ys: Vec<f64> = outcomes.iter().filter(|(i, _)| *i == k).map(|(_, y)| *y).collect();
            ys.iter().sum::<f64>() / ys.len() as f64
        };
        let mse = |v0: f64, v1: f64| {
            outcomes
                .iter()
                .map(|&(i, y)| {
                    let v = if i == 0 { v0 } else { v1 };
                    (y - v) * (y - v)
                })
                .sum::<f64>()
                / outcomes.len() as f64
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let grid: Vec<f64> = (-80..=80).map(|k| k as f64 * 0.05).collect();
        for &v0 in &grid {
            for &v1 in &grid {
                let m = mse(v0, v1);
                if m < best.0 {
                    best = (m, v0, v1);
                }
            }
        }
        assert!((best.1 - cond_mean(0)).abs() <= 0.05);
        assert!((best.2 - cond_mean(1)).abs() <= 0.05);
    }

    #[test]
    fn domain_error_of_oracle_wrappers() {
        let d = 3;
        let p = heat(d);
        let exact_predict = |pts: &Tensor| {
            let mut out = Tensor::zeros(pts.rows(), 1);
            for i in 0..pts.rows() {
                let v = pts.row_slice(i).iter().map(|x| x * x).sum::<f64>() + 2.0 * d as f64;
                out.set(i, 0, v);
            }
            out
        };
        // predictor == exact: all errors 0
        let (abs, rel, linf) = domain_error_of(&p, exact_predict, 2000, 3).unwrap();
        assert_eq!((abs, rel, linf), (0.0, 0.0, 0.0));
        // predictor == exact + 1: abs L1 = 1, Linf = 1
        let (abs, _, linf) = domain_error_of(
            &p,
            |pts| {
                let mut out = exact_predict(pts);
                out.data_mut().iter_mut().for_each(|v| *v += 1.0);
                out
            },
            2000,
            3,
        )
        .unwrap();
        assert!((abs - 1.0).abs() < 1e-12);
        assert!((linf - 1.0).abs() < 1e-12);

        let spec = MlpSpec::plain(d, 4, 1, Activation::Tanh, 1);
        let params = MlpParams::init(&spec, 0);
        let mut no_exact = heat(d);
        no_exact.exact = None;
        assert!(matches!(
            domain_error(&no_exact, &spec, &params, 16, 0),
            Err(FkError::MissingExact)
        ));
    }

    #[test]
    fn zero_epoch_run_echoes_initialisation() {
        let p = heat(2);
        let spec = MlpSpec::batch_norm_stack(2, 8, 2, Activation::Tanh, 1);
        let cfg = TrainConfig::new(0, 21, LrSchedule::Constant(1e-3)).with_batch(16);
        let run = train_regression(&p, &spec, &cfg).unwrap();
        assert_eq!(run.result.records.len(), 1);
        let fresh = MlpParams::init(&spec, 21);
        assert_eq!(run.params.flatten(), fresh.flatten());
        run.result.check_invariants();
    }
}
