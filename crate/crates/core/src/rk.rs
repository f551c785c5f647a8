//! Discrete-time collocation: advance one (possibly large) implicit
//! Runge-Kutta step by training a network `x -> (u at the q stage times,
//! u at the next time)` so that the rearranged stage equations hold at the
//! data points,
//!
//! ```text
//! r_i = u_{n+c_i}(x) - u_n(x) + dt * sum_j a_ij N[u_{n+c_j}](x),  i = 1..q
//! r_{q+1} = u_{n+1}(x) - u_n(x) + dt * sum_j b_j N[u_{n+c_j}](x)
//! ```
//!
//! with homogeneous Dirichlet boundary penalties on the stage and final
//! values.

use crate::autodiff::{Graph, Var};
use crate::jet::JetVal;
use crate::nn::{self, MlpLeaves, MlpParams, MlpSpec};
use crate::optimize::{AdamState, OptError};
use crate::pinn::{OperatorArgs, PinnError, PinnProblem};
use crate::rng::{streams, CounterRng};
use crate::tensor::Tensor;
use crate::train::{EpochRecord, RunResult, RunStatus, TrainConfig};
use std::time::Instant;

/// Runge-Kutta coefficients. The supplied Gauss-Legendre tableaus satisfy
/// the row-sum consistency `c_i = sum_j a_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl ButcherTableau {
    pub fn stages(&self) -> usize {
        self.b.len()
    }

    /// Gauss-Legendre collocation with `q` stages (order `2q`), `q <= 3`.
    pub fn gauss(q: usize) -> Result<Self, PinnError> {
        let t = match q {
            1 => ButcherTableau {
                a: vec![vec![0.5]],
                b: vec![1.0],
                c: vec![0.5],
            },
            2 => {
                let s = 3f64.sqrt() / 6.0;
                ButcherTableau {
                    a: vec![vec![0.25, 0.25 - s], vec![0.25 + s, 0.25]],
                    b: vec![0.5, 0.5],
                    c: vec![0.5 - s, 0.5 + s],
                }
            }
            3 => {
                let s = 15f64.sqrt();
                ButcherTableau {
                    a: vec![
                        vec![5.0 / 36.0, 2.0 / 9.0 - s / 15.0, 5.0 / 36.0 - s / 30.0],
                        vec![5.0 / 36.0 + s / 24.0, 2.0 / 9.0, 5.0 / 36.0 - s / 24.0],
                        vec![5.0 / 36.0 + s / 30.0, 2.0 / 9.0 + s / 15.0, 5.0 / 36.0],
                    ],
                    b: vec![5.0 / 18.0, 4.0 / 9.0, 5.0 / 18.0],
                    c: vec![0.5 - s / 10.0, 0.5, 0.5 + s / 10.0],
                }
            }
            other => {
                return Err(PinnError::Tableau(format!(
                    "gauss tableau with {other} stages not shipped (1..=3)"
                )))
            }
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), PinnError> {
        let q = self.b.len();
        if self.a.len() != q || self.c.len() != q || self.a.iter().any(|r| r.len() != q) {
            return Err(PinnError::Tableau("inconsistent tableau dimensions".into()));
        }
        for i in 0..q {
            let row: f64 = self.a[i].iter().sum();
            if (row - self.c[i]).abs() > 1e-14 {
                return Err(PinnError::Tableau(format!(
                    "row {i} sums to {row}, expected c = {}",
                    self.c[i]
                )));
            }
        }
        Ok(())
    }
}

/// Stage residuals from plain values: `stage_values` holds the q stage
/// values followed by the next-time value at one point, `n_values` the
/// operator `N[u_{n+c_j}]` at the same point. Returns the q+1 residuals.
pub fn rk_stage_residuals(
    tableau: &ButcherTableau,
    dt: f64,
    u_data: f64,
    stage_values: &[f64],
    n_values: &[f64],
) -> Vec<f64> {
    let q = tableau.stages();
    assert_eq!(stage_values.len(), q + 1, "q stages plus the final value");
    assert_eq!(n_values.len(), q);
    let mut out = Vec::with_capacity(q + 1);
    for i in 0..q {
        let mut r = stage_values[i] - u_data;
        for j in 0..q {
            r += dt * tableau.a[i][j] * n_values[j];
        }
        out.push(r);
    }
    let mut r = stage_values[q] - u_data;
    for j in 0..q {
        r += dt * tableau.b[j] * n_values[j];
    }
    out.push(r);
    out
}

/// Sum of squared residuals over the data points plus the squared stage and
/// final values at the two boundary points.
pub fn rk_loss_terms(residuals_per_point: &[Vec<f64>], boundary_values: &[f64]) -> f64 {
    residuals_per_point
        .iter()
        .flat_map(|rs| rs.iter())
        .map(|r| r * r)
        .sum::<f64>()
        + boundary_values.iter().map(|v| v * v).sum::<f64>()
}

/// Data for one time step: points `x` with known values `u(t_n, x)`.
pub struct RkData {
    pub x: Tensor,
    pub u: Tensor,
    pub t_n: f64,
    pub dt: f64,
}

/// Sample `n` uniform points of the spatial domain with values from the
/// problem's data slice (the usual way to seed the first step).
pub fn data_from_initial(problem: &PinnProblem, n: usize, seed: u64) -> RkData {
    assert_eq!(problem.spatial_dim, 1, "discrete-time solver is 1-d");
    let mut rng = CounterRng::stream(seed, streams::PINN_INTERIOR);
    let mut x = Tensor::zeros(n, 1);
    let mut u = Tensor::zeros(n, 1);
    for i in 0..n {
        let xi = rng.uniform_in(problem.domain.lo[0], problem.domain.hi[0]);
        x.set(i, 0, xi);
        u.set(i, 0, (problem.initial)(&[xi]));
    }
    RkData {
        x,
        u,
        t_n: problem.data_time(),
        dt: 0.0,
    }
}

fn check_supported(problem: &PinnProblem, data: &RkData) -> Result<(), PinnError> {
    if problem.spatial_dim != 1 {
        return Err(PinnError::UnsupportedRk);
    }
    for frac in [0.0, 0.5, 1.0] {
        let t = data.t_n + frac * data.dt;
        for x in [problem.domain.lo[0], problem.domain.hi[0]] {
            if (problem.boundary)(t, &[x]).abs() > 1e-14 {
                return Err(PinnError::UnsupportedRk);
            }
        }
    }
    Ok(())
}

/// Record the full stage-residual loss of a stage network on the graph.
/// The network maps `x` (one column) to `q + 1` outputs.
pub fn rk_loss_vars(
    g: &mut Graph,
    problem: &PinnProblem,
    spec: &MlpSpec,
    leaves: &MlpLeaves,
    tableau: &ButcherTableau,
    data: &RkData,
) -> Result<Var, PinnError> {
    let q = tableau.stages();
    assert_eq!(spec.output_dim, q + 1, "stage net must emit q+1 values");
    let n = data.x.rows();

    let x_leaf = g.constant(&data.x);
    let u_leaf = g.constant(&data.u);
    let seeded = JetVal::seed_coordinates(g, x_leaf, &[problem.needs_second[0]]);
    let out = nn::forward_jets(g, spec, leaves, &seeded)?;

    // operator value per stage
    let mut n_vals = Vec::with_capacity(q);
    for j in 0..q {
        let u_j = g.slice_col(out.primal, j);
        let du_j = g.slice_col(out.channels[0].t1, j);
        let d2_full = out.channels[0].t2.as_var(g, n, q + 1);
        let d2_j = d2_full.map(|v| g.slice_col(v, j));
        let t_j = data.t_n + tableau.c[j] * data.dt;
        let mut pts = Tensor::zeros(n, 2);
        for i in 0..n {
            pts.set(i, 0, t_j);
            pts.set(i, 1, data.x.get(i, 0));
        }
        let pts_leaf = g.constant(&pts);
        let t_col = g.slice_col(pts_leaf, 0);
        let grad = [du_j];
        let second = [d2_j];
        let args = OperatorArgs {
            points: pts_leaf,
            t: t_col,
            u: u_j,
            u_t: None,
            grad: &grad,
            second: &second,
            lambda: None,
        };
        n_vals.push((problem.operator)(g, &args));
    }

    // residuals of the q stage equations and the final update
    let mut loss = None;
    let add_sq = |g: &mut Graph, v: Var, loss: &mut Option<Var>| {
        let sq = g.square(v);
        let s = g.sum_all(sq);
        *loss = Some(match *loss {
            None => s,
            Some(acc) => g.add(acc, s),
        });
    };
    for i in 0..q {
        let stage = g.slice_col(out.primal, i);
        let mut r = g.sub(stage, u_leaf);
        for j in 0..q {
            let term = g.scale(n_vals[j], data.dt * tableau.a[i][j]);
            r = g.add(r, term);
        }
        add_sq(g, r, &mut loss);
    }
    let final_col = g.slice_col(out.primal, q);
    let mut r = g.sub(final_col, u_leaf);
    for j in 0..q {
        let term = g.scale(n_vals[j], data.dt * tableau.b[j]);
        r = g.add(r, term);
    }
    add_sq(g, r, &mut loss);

    // homogeneous Dirichlet penalty on all q+1 outputs at both ends
    let boundary = Tensor::col(&[problem.domain.lo[0], problem.domain.hi[0]]);
    let b_leaf = g.constant(&boundary);
    let b_out = nn::forward(g, spec, leaves, b_leaf, nn::Mode::Infer)?;
    add_sq(g, b_out.output, &mut loss);

    Ok(loss.expect("at least one residual"))
}

/// Loss value for given parameters.
pub fn rk_loss_value(
    problem: &PinnProblem,
    spec: &MlpSpec,
    params: &MlpParams,
    tableau: &ButcherTableau,
    data: &RkData,
) -> Result<f64, PinnError> {
    check_supported(problem, data)?;
    let mut g = Graph::new();
    let leaves = MlpLeaves::install(&mut g, spec, params);
    let loss = rk_loss_vars(&mut g, problem, spec, &leaves, tableau, data)?;
    Ok(g.item(loss))
}

pub struct RkRun {
    pub result: RunResult,
    pub params: MlpParams,
}

/// Train the stage network on the fixed data set.
pub fn train(
    problem: &PinnProblem,
    spec: &MlpSpec,
    tableau: &ButcherTableau,
    data: &RkData,
    cfg: &TrainConfig,
) -> Result<RkRun, PinnError> {
    spec.validate()?;
    tableau.validate()?;
    check_supported(problem, data)?;
    let started = Instant::now();
    let mut params = MlpParams::init(spec, cfg.seed);

    let mut g = Graph::new();
    let leaves = MlpLeaves::install(&mut g, spec, &params);
    let loss = rk_loss_vars(&mut g, problem, spec, &leaves, tableau, data)?;

    let mut theta = params.flatten();
    let mut adam = AdamState::new(theta.len());
    let mut grads = vec![0.0; theta.len()];
    let trainable = leaves.trainable();

    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let mut status = RunStatus::Completed;
    records.push(EpochRecord {
        epoch: 0,
        total_loss: g.item(loss),
        wall_s: started.elapsed().as_secs_f64(),
        ..Default::default()
    });

    for epoch in 1..=cfg.epochs {
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
        let lr = cfg.schedule.lr_at(epoch - 1);
        match adam.step(&mut theta, &grads, lr) {
            Ok(()) => {}
            Err(OptError::NonFiniteGradient(_)) => {
                status = RunStatus::Diverged { epoch };
                break;
            }
            Err(e) => return Err(e.into()),
        }
        let mut off = 0;
        for &v in &trainable {
            let (r, c) = g.shape(v);
            let n = r * c;
            g.set_leaf(v, &theta[off..off + n])?;
            off += n;
        }
        g.replay();
        let total = g.item(loss);
        records.push(EpochRecord {
            epoch,
            total_loss: total,
            lr: Some(lr),
            wall_s: started.elapsed().as_secs_f64(),
            ..Default::default()
        });
        if !total.is_finite() {
            status = RunStatus::Diverged { epoch };
            break;
        }
        if let Some(thr) = cfg.stop_below {
            if total < thr {
                status = RunStatus::ReachedThreshold { epoch };
                break;
            }
        }
    }

    params.assign_flat(&theta);
    let final_params = params.to_named("");
    Ok(RkRun {
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
