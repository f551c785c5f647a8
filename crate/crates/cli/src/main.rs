//! Experiment runner for the neural-network PDE solvers.
//!
//! ```text
//! nplab run <config> [--threads N]      train per the config, write results
//! nplab list-problems                   registered problem keys per method
//! nplab oracle lqg --d D --t T --samples N --seed S
//!                                       Monte Carlo reference value of the
//!                                       LQG control problem at x = 0
//! nplab check-grad <config> [--threads N]
//!                                       finite-difference gradient check of
//!                                       the configured loss
//! ```
//!
//! Exit codes: 0 ok, 2 configuration/usage error, 3 diverged run.
//! `NPLAB_SEED` overrides the configured seed. `--threads 1` guarantees a
//! bit-reproducible run (sampling is counter-based, so results do not
//! depend on the thread count anyway).

mod config;
mod emit;
mod runner;

use config::{parse_config, Method};
use nplab_core::deep_bsde as bsde;
use nplab_core::feynman_kac as fk;
use nplab_core::gradcheck;
use nplab_core::nn;
use nplab_core::pinn;
use nplab_core::rk;
use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&args) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(args: &[String]) -> Result<ExitCode, String> {
    let (verb, rest) = args.split_first().ok_or_else(usage)?;
    let rest = apply_threads(rest)?;
    match verb.as_str() {
        "run" => cmd_run(&rest),
        "list-problems" => {
            print!("{}", runner::list_problems());
            Ok(ExitCode::SUCCESS)
        }
        "oracle" => cmd_oracle(&rest),
        "check-grad" => cmd_check_grad(&rest),
        "--help" | "-h" | "help" => {
            print!("{}", usage());
            Ok(ExitCode::SUCCESS)
        }
        other => Err(format!("unknown command {other:?}\n{}", usage())),
    }
}

fn usage() -> String {
    "usage: nplab <run <config> | list-problems | oracle lqg [--d D] [--t T] [--samples N] [--seed S] | check-grad <config>> [--threads N]\n".to_string()
}

/// Strip a `--threads N` pair anywhere in the arguments and size the
/// global worker pool accordingly.
fn apply_threads(args: &[String]) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut iter = args.iter();
    let mut threads: Option<usize> = None;
    while let Some(a) = iter.next() {
        if a == "--threads" {
            let v = iter.next().ok_or("--threads needs a value")?;
            threads = Some(v.parse().map_err(|_| format!("bad thread count {v:?}"))?);
        } else {
            out.push(a.clone());
        }
    }
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(out)
}

fn load_config(path: &str) -> Result<config::ExperimentConfig, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("cannot read {path:?}: {e}"))?;
    parse_config(&text).map_err(|e| format!("{path}:{e}"))
}

fn cmd_run(args: &[String]) -> Result<ExitCode, String> {
    let path = args.first().ok_or_else(usage)?;
    let cfg = load_config(path)?;
    let outcome = runner::run(&cfg).map_err(|e| e.to_string())?;
    let result = &outcome.result;
    eprintln!(
        "status: {:?}  epochs recorded: {}  final loss: {:.6e}  wall: {:.1}s",
        result.status,
        result.records.len(),
        result.final_loss(),
        result.wall_clock_s
    );
    eprintln!(
        "wrote {} {} {}",
        outcome.csv_path.display(),
        outcome.json_path.display(),
        outcome.params_path.display()
    );
    if result.status.is_diverged() {
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(args: &[String]) -> Result<ExitCode, String> {
    let (kind, rest) = args.split_first().ok_or("oracle needs a target, e.g. lqg")?;
    if kind != "lqg" {
        return Err(format!("unknown oracle {kind:?}"));
    }
    let mut d = 100usize;
    let mut t = 1.0f64;
    let mut samples = 10_000_000usize;
    let mut seed = 1u64;
    let mut iter = rest.iter();
    while let Some(a) = iter.next() {
        let v = iter.next().ok_or_else(|| format!("{a} needs a value"))?;
        match a.as_str() {
            "--d" => d = v.parse().map_err(|_| "bad --d")?,
            "--t" => t = v.parse().map_err(|_| "bad --t")?,
            "--samples" => samples = v.parse().map_err(|_| "bad --samples")?,
            "--seed" => seed = v.parse().map_err(|_| "bad --seed")?,
            other => return Err(format!("unknown flag {other:?}")),
        }
    }
    let x = vec![0.0; d];
    let (value, se) = bsde::lqg_reference(d, t, &x, samples, seed);
    println!("lqg reference value at x=0: {value:.10}");
    println!("standard error: {se:.3e}  (d={d}, horizon={t}, samples={samples}, seed={seed})");
    Ok(ExitCode::SUCCESS)
}

/// Finite-difference check of the configured training loss at
/// initialisation, on reduced set sizes.
fn cmd_check_grad(args: &[String]) -> Result<ExitCode, String> {
    let path = args.first().ok_or_else(usage)?;
    let cfg = load_config(path)?;
    let seed = runner::effective_seed(&cfg);
    let report = match cfg.method {
        Method::Pinn | Method::PinnIdent => {
            let problem = pinn::problem(&cfg.problem).map_err(|e| e.to_string())?;
            let spec = runner::mlp_spec_of(&cfg, 1).map_err(|e| e.to_string())?;
            let params = nn::MlpParams::init(&spec, seed);
            let counts = pinn::SampleCounts::new(
                cfg.counts.interior.min(64),
                cfg.counts.initial.min(16).max(1),
                cfg.counts.boundary.min(16).max(1),
                cfg.counts.data.min(32),
            );
            let sets = pinn::sample_training_sets(&problem, counts, cfg.noise, seed)
                .map_err(|e| e.to_string())?;
            let mut g = nplab_core::Graph::new();
            let leaves = nn::MlpLeaves::install(&mut g, &spec, &params);
            let lambda = problem
                .lambda
                .as_ref()
                .map(|_| g.param(&nplab_core::Tensor::scalar(cfg.lambda_init)));
            let loss =
                pinn::loss_vars(&mut g, &problem, &spec, &leaves, lambda, &sets, Default::default())
                    .map_err(|e| e.to_string())?;
            let mut trainable = leaves.trainable();
            if let Some(l) = lambda {
                trainable.push(l);
            }
            gradcheck::central_difference_check(&mut g, loss.total, &trainable, 1e-5, 80)
                .map_err(|e| e.to_string())?
        }
        Method::PinnRk => {
            let problem = pinn::problem(&cfg.problem).map_err(|e| e.to_string())?;
            let tableau = rk::ButcherTableau::gauss(cfg.rk.stages).map_err(|e| e.to_string())?;
            let spec = runner::mlp_spec_of(&cfg, cfg.rk.stages + 1).map_err(|e| e.to_string())?;
            let params = nn::MlpParams::init(&spec, seed);
            let mut data = rk::data_from_initial(&problem, cfg.rk.points.min(32), seed);
            data.dt = cfg.rk.dt;
            let mut g = nplab_core::Graph::new();
            let leaves = nn::MlpLeaves::install(&mut g, &spec, &params);
            let loss = rk::rk_loss_vars(&mut g, &problem, &spec, &leaves, &tableau, &data)
                .map_err(|e| e.to_string())?;
            gradcheck::central_difference_check(&mut g, loss, &leaves.trainable(), 1e-5, 80)
                .map_err(|e| e.to_string())?
        }
        Method::FeynmanKac => {
            let problem = fk::problem(&cfg.problem, cfg.dim).map_err(|e| e.to_string())?;
            let spec = runner::mlp_spec_of(&cfg, 1).map_err(|e| e.to_string())?;
            let params = nn::MlpParams::init(&spec, seed);
            let batch = match problem.sampling {
                fk::SamplingMode::ExactGaussian => fk::sample_exact(&problem, 16, seed),
                fk::SamplingMode::EulerMaruyama { .. } => fk::sample_em(&problem, 16, seed),
            }
            .map_err(|e| e.to_string())?;
            let mut g = nplab_core::Graph::new();
            let leaves = nn::MlpLeaves::install(&mut g, &spec, &params);
            let x = g.input(&batch.starts);
            let y = g.input(&batch.targets);
            let fwd = nn::forward(&mut g, &spec, &leaves, x, nn::Mode::Train)
                .map_err(|e| e.to_string())?;
            let diff = g.sub(y, fwd.output);
            let sq = g.square(diff);
            let loss = g.mean_all(sq);
            gradcheck::central_difference_check(&mut g, loss, &leaves.trainable(), 1e-5, 80)
                .map_err(|e| e.to_string())?
        }
        Method::DeepBsde => {
            let mut problem = bsde::problem(&cfg.problem, cfg.dim).map_err(|e| e.to_string())?;
            problem.theta0_range = cfg.theta0;
            let config::NetSettings::Bsde { stacks, width } = cfg.net else {
                return Err("deep-bsde needs stacks/width".into());
            };
            let steps = cfg.steps.min(3);
            let params = bsde::BsdeParams::init(&problem, steps, stacks, width, seed);
            let paths =
                bsde::simulate_forward(&problem, steps, 8, seed).map_err(|e| e.to_string())?;
            let mut rg = bsde::build_rollout(&problem, &params, &paths, nn::Mode::Train)
                .map_err(|e| e.to_string())?;
            let trainable = rg.trainable();
            gradcheck::central_difference_check(&mut rg.g, rg.loss, &trainable, 1e-5, 80)
                .map_err(|e| e.to_string())?
        }
    };
    println!(
        "checked {} of {} parameters: max relative error {:.3e} (worst index {})",
        report.checked, report.n_params, report.max_rel, report.worst_index
    );
    if report.max_rel < 1e-4 {
        println!("gradient check passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradient check FAILED");
        Ok(ExitCode::from(1))
    }
}
