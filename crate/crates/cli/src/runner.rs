//! Dispatch a parsed configuration to the solver modules and write the
//! result files: `<out>.csv` (per-epoch records), `<out>.json` (summary)
//! and `<out>.params` (parameter snapshot).

use crate::config::{ExperimentConfig, Method, NetSettings};
use crate::emit;
use nplab_core::deep_bsde as bsde;
use nplab_core::feynman_kac as fk;
use nplab_core::nn::MlpSpec;
use nplab_core::pinn::{self, PinnSetup};
use nplab_core::rk;
use nplab_core::snapshot;
use nplab_core::train::{RunResult, TrainConfig};
use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum RunError {
    Solver(String),
    Io(std::io::Error),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Solver(m) => write!(f, "{m}"),
            RunError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

fn solver_err(e: impl fmt::Display) -> RunError {
    RunError::Solver(e.to_string())
}

pub struct RunOutcome {
    pub result: RunResult,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub params_path: PathBuf,
}

/// The effective seed: `NPLAB_SEED` overrides the configured value.
pub fn effective_seed(cfg: &ExperimentConfig) -> u64 {
    match std::env::var("NPLAB_SEED") {
        Ok(v) => v.parse().unwrap_or(cfg.seed),
        Err(_) => cfg.seed,
    }
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    let mut tc = TrainConfig::new(cfg.epochs, seed, cfg.schedule.clone())
        .with_batch(cfg.batch)
        .with_eval(cfg.eval_interval, cfg.eval_points);
    tc.stop_below = cfg.stop_below;
    tc
}

pub fn mlp_spec_of(cfg: &ExperimentConfig, output_dim: usize) -> Result<MlpSpec, RunError> {
    match &cfg.net {
        NetSettings::Mlp {
            hidden,
            activation,
            batch_norm,
            bias,
            input_scaling,
        } => {
            let input_dim = match cfg.method {
                Method::Pinn | Method::PinnIdent => 1 + cfg.dim,
                Method::PinnRk => 1,
                Method::FeynmanKac => cfg.dim,
                Method::DeepBsde => unreachable!(),
            };
            let mut spec = MlpSpec {
                input_dim,
                hidden: hidden.iter().map(|&w| (w, *activation)).collect(),
                output_dim,
                use_batch_norm: *batch_norm,
                dense_bias: *bias,
                input_scaling: None,
            };
            if *input_scaling {
                match cfg.method {
                    Method::Pinn | Method::PinnIdent => {
                        let p = pinn::problem(&cfg.problem).map_err(solver_err)?;
                        let mut lo = vec![0.0];
                        let mut hi = vec![p.horizon];
                        lo.extend_from_slice(&p.domain.lo);
                        hi.extend_from_slice(&p.domain.hi);
                        spec = spec.with_input_scaling(&lo, &hi);
                    }
                    Method::PinnRk => {
                        let p = pinn::problem(&cfg.problem).map_err(solver_err)?;
                        spec = spec.with_input_scaling(&p.domain.lo, &p.domain.hi);
                    }
                    Method::FeynmanKac => {
                        let p = fk::problem(&cfg.problem, cfg.dim).map_err(solver_err)?;
                        spec = spec.with_input_scaling(&p.domain.lo, &p.domain.hi);
                    }
                    Method::DeepBsde => {}
                }
            }
            spec.validate().map_err(solver_err)?;
            Ok(spec)
        }
        NetSettings::Bsde { .. } => Err(RunError::Solver(
            "BSDE network settings used outside deep-bsde".into(),
        )),
    }
}

/// Execute the experiment described by the config.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunResult, RunError> {
    let seed = effective_seed(cfg);
    let tc = train_config(cfg, seed);
    match cfg.method {
        Method::Pinn => {
            let problem = pinn::problem(&cfg.problem).map_err(solver_err)?;
            let spec = mlp_spec_of(cfg, 1)?;
            let setup = PinnSetup {
                counts: cfg.counts,
                noise: cfg.noise,
                weights: Default::default(),
                lambda_init: cfg.lambda_init,
            };
            let run = pinn::train(&problem, &spec, &setup, &tc).map_err(solver_err)?;
            Ok(run.result)
        }
        Method::PinnIdent => {
            let problem = pinn::problem(&cfg.problem).map_err(solver_err)?;
            let spec = mlp_spec_of(cfg, 1)?;
            let setup = PinnSetup {
                counts: cfg.counts,
                noise: cfg.noise,
                weights: Default::default(),
                lambda_init: cfg.lambda_init,
            };
            let (_, run) = pinn::identify_parameter(&problem, &spec, &setup, &tc)
                .map_err(solver_err)?;
            Ok(run.result)
        }
        Method::PinnRk => {
            let problem = pinn::problem(&cfg.problem).map_err(solver_err)?;
            let tableau = rk::ButcherTableau::gauss(cfg.rk.stages).map_err(solver_err)?;
            let spec = mlp_spec_of(cfg, cfg.rk.stages + 1)?;
            let mut data = rk::data_from_initial(&problem, cfg.rk.points, seed);
            data.dt = cfg.rk.dt;
            let run = rk::train(&problem, &spec, &tableau, &data, &tc).map_err(solver_err)?;
            Ok(run.result)
        }
        Method::FeynmanKac => {
            let problem = fk::problem(&cfg.problem, cfg.dim).map_err(solver_err)?;
            let spec = mlp_spec_of(cfg, 1)?;
            let run = fk::train_regression(&problem, &spec, &tc).map_err(solver_err)?;
            Ok(run.result)
        }
        Method::DeepBsde => {
            let mut problem = bsde::problem(&cfg.problem, cfg.dim).map_err(solver_err)?;
            problem.theta0_range = cfg.theta0;
            let NetSettings::Bsde { stacks, width } = &cfg.net else {
                return Err(RunError::Solver("deep-bsde needs stacks/width".into()));
            };
            let run = bsde::train_custom(&problem, cfg.steps, *stacks, *width, &tc)
                .map_err(solver_err)?;
            Ok(run.result)
        }
    }
}

/// Execute and write the three result files next to `cfg.out_path`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let result = execute(cfg)?;
    let base = PathBuf::from(&cfg.out_path);
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let csv_path = base.with_extension("csv");
    let json_path = base.with_extension("json");
    let params_path = base.with_extension("params");

    std::fs::write(&csv_path, emit::emit_plot_data(&result))?;
    snapshot::write_named(&params_path, &result.final_params).map_err(solver_err)?;
    std::fs::write(
        &json_path,
        emit::emit_summary(cfg, &result, &params_path.to_string_lossy()),
    )?;

    Ok(RunOutcome {
        result,
        csv_path,
        json_path,
        params_path,
    })
}

/// All registered problem keys per method, for `list-problems`.
pub fn list_problems() -> String {
    let mut s = String::new();
    s.push_str("pinn:        burgers, eikonal\n");
    s.push_str("pinn-rk:     burgers\n");
    s.push_str("pinn-ident:  eikonal-param\n");
    s.push_str("feynman-kac: heat, heat-potential\n");
    s.push_str("deep-bsde:   lqg-hjb, allen-cahn\n");
    s
}
