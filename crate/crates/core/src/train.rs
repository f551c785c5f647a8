//! Shared training configuration and run bookkeeping.

use crate::optimize::LrSchedule;
use crate::tensor::Tensor;

/// Axis-aligned box domain.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(
            lo.iter().zip(&hi).all(|(l, h)| l < h),
            "domain box must be nondegenerate"
        );
        BoxDomain { lo, hi }
    }

    /// The symmetric cube `[-1, 1]^d`.
    pub fn symmetric_unit(dim: usize) -> Self {
        BoxDomain::new(vec![-1.0; dim], vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }
}

/// Optimiser-level settings shared by all three solvers. One epoch is one
/// optimizer step on one batch.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Batch size for the sampling-based solvers; ignored by the
    /// fixed-collocation-set solver.
    pub batch: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    /// Evaluate error metrics every this many epochs (0 disables periodic
    /// evaluation; the final state is always evaluated when possible).
    pub eval_interval: usize,
    /// Number of uniform evaluation points for sampled error estimates.
    pub eval_points: usize,
    /// Stop once the total loss falls strictly below this threshold.
    pub stop_below: Option<f64>,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64, schedule: LrSchedule) -> Self {
        TrainConfig {
            epochs,
            batch: 256,
            seed,
            schedule,
            eval_interval: 0,
            eval_points: 4096,
            stop_below: None,
        }
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn with_eval(mut self, interval: usize, points: usize) -> Self {
        self.eval_interval = interval;
        self.eval_points = points;
        self
    }

    pub fn with_stop_below(mut self, threshold: f64) -> Self {
        self.stop_below = Some(threshold);
        self
    }
}

/// Per-epoch log record. Epoch 0 is the state at initialisation.
#[derive(Debug, Clone, Default)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub phi_r: Option<f64>,
    pub phi_0: Option<f64>,
    pub phi_b: Option<f64>,
    pub phi_d: Option<f64>,
    /// Learning rate used by the step that produced this state (absent at
    /// epoch 0).
    pub lr: Option<f64>,
    /// Seconds since the start of the run. Kept out of emitted files so
    /// outputs stay byte-reproducible.
    pub wall_s: f64,
    pub abs_l1: Option<f64>,
    pub rel_l1: Option<f64>,
    pub linf: Option<f64>,
    pub lambda_hat: Option<f64>,
    pub theta_u0: Option<f64>,
}

impl EpochRecord {
    /// Deterministic metrics of this record as `(name, value)` pairs, in
    /// emission order. Names match the field names.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("total_loss", self.total_loss)];
        let mut push = |name, v: Option<f64>| {
            if let Some(v) = v {
                out.push((name, v));
            }
        };
        push("phi_r", self.phi_r);
        push("phi_0", self.phi_0);
        push("phi_b", self.phi_b);
        push("phi_d", self.phi_d);
        push("lr", self.lr);
        push("abs_l1", self.abs_l1);
        push("rel_l1", self.rel_l1);
        push("linf", self.linf);
        push("lambda_hat", self.lambda_hat);
        push("theta_u0", self.theta_u0);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunStatus {
    /// Ran the configured number of epochs.
    Completed,
    /// Stopped early because the loss fell below the configured threshold.
    ReachedThreshold { epoch: usize },
    /// Aborted on a non-finite loss or gradient; the history up to the
    /// failing epoch is retained.
    Diverged { epoch: usize },
}

impl RunStatus {
    pub fn is_diverged(&self) -> bool {
        matches!(self, RunStatus::Diverged { .. })
    }
}

/// Full result of a training run: per-epoch records, status and the final
/// parameters as named tensors ready for snapshotting.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<EpochRecord>,
    pub status: RunStatus,
    pub seed: u64,
    pub wall_clock_s: f64,
    pub final_params: Vec<(String, Tensor)>,
}

impl RunResult {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map(|r| r.total_loss).unwrap_or(f64::NAN)
    }

    pub fn best_loss(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.total_loss)
            .fold(f64::INFINITY, f64::min)
    }

    /// Invariants maintained by every training loop; exposed so tests can
    /// assert them on arbitrary results.
    pub fn check_invariants(&self) {
        for w in self.records.windows(2) {
            assert!(w[0].epoch < w[1].epoch, "epochs must strictly increase");
            assert!(w[0].wall_s <= w[1].wall_s, "wall clock must not decrease");
        }
    }
}
