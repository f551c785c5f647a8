//! Multilayer perceptrons in the three flavours the solvers use: plain
//! bias+activation stacks, and batch-normalised stacks of the form
//! `Input -> BN -> (Dense -> BN -> act) x L -> Dense -> BN -> Output`
//! where the dense layers carry no bias (the following shift would cancel
//! it).

use crate::autodiff::{Graph, LeafKind, Var};
use crate::jet::{self, JetVal};
use crate::rng::{streams, CounterRng};
use crate::tensor::{gemm_nn, Tensor};
use thiserror::Error;

/// Batch-normalisation epsilon inside the variance square root.
pub const BN_EPS: f64 = 1e-6;
/// Exponential-moving-average momentum for BN running statistics.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Tanh,
    Relu,
    /// Leaky rectifier with the given negative-side slope.
    LeakyRelu(f64),
}

impl Activation {
    fn slope(self) -> Option<f64> {
        match self {
            Activation::Tanh => None,
            Activation::Relu => Some(0.0),
            Activation::LeakyRelu(s) => Some(s),
        }
    }
}

/// Per-coordinate affine map applied to the input before the first layer,
/// typically scaling a domain box onto `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct InputScaling {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl InputScaling {
    /// Affine map taking `[lo_j, hi_j]` onto `[-1, 1]` per coordinate.
    pub fn to_unit_box(lo: &[f64], hi: &[f64]) -> Self {
        let scale = lo
            .iter()
            .zip(hi)
            .map(|(&l, &h)| 2.0 / (h - l))
            .collect::<Vec<_>>();
        let shift = lo
            .iter()
            .zip(hi)
            .map(|(&l, &h)| -(h + l) / (h - l))
            .collect();
        InputScaling { scale, shift }
    }
}

#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<(usize, Activation)>,
    pub output_dim: usize,
    pub use_batch_norm: bool,
    pub dense_bias: bool,
    pub input_scaling: Option<InputScaling>,
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("train-mode batch normalization needs a batch of at least 2, got {0}")]
    DegenerateBatch(usize),
    #[error("input tangents are not supported through batch-normalized networks")]
    TangentsThroughBatchNorm,
    #[error("input has {got} columns, spec expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("snapshot: {0}")]
    Snapshot(String),
}

impl MlpSpec {
    /// Plain stack with biases: `depth` hidden layers of `width` units.
    pub fn plain(input_dim: usize, width: usize, depth: usize, act: Activation, output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden: vec![(width, act); depth],
            output_dim,
            use_batch_norm: false,
            dense_bias: true,
            input_scaling: None,
        }
    }

    /// Batch-normalised stack without biases.
    pub fn batch_norm_stack(
        input_dim: usize,
        width: usize,
        depth: usize,
        act: Activation,
        output_dim: usize,
    ) -> Self {
        MlpSpec {
            input_dim,
            hidden: vec![(width, act); depth],
            output_dim,
            use_batch_norm: true,
            dense_bias: false,
            input_scaling: None,
        }
    }

    pub fn with_input_scaling(mut self, lo: &[f64], hi: &[f64]) -> Self {
        self.input_scaling = Some(InputScaling::to_unit_box(lo, hi));
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(NnError::InvalidSpec("zero input or output width".into()));
        }
        for &(w, act) in &self.hidden {
            if w == 0 {
                return Err(NnError::InvalidSpec("zero hidden width".into()));
            }
            if let Activation::LeakyRelu(s) = act {
                if !(0.0 < s && s < 1.0) {
                    return Err(NnError::InvalidSpec(format!(
                        "leaky slope {s} outside (0, 1)"
                    )));
                }
            }
        }
        if self.use_batch_norm && self.dense_bias {
            return Err(NnError::InvalidSpec(
                "batch-normalized layers use dense layers without bias".into(),
            ));
        }
        if let Some(sc) = &self.input_scaling {
            if sc.scale.len() != self.input_dim || sc.shift.len() != self.input_dim {
                return Err(NnError::InvalidSpec("input scaling width mismatch".into()));
            }
        }
        Ok(())
    }

    /// Widths of the dense layers as `(in, out)` pairs.
    fn dense_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &(w, _) in &self.hidden {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    /// Feature counts of the BN layers (input BN, one per hidden layer, one
    /// after the output dense layer). Empty when BN is off.
    fn bn_dims(&self) -> Vec<usize> {
        if !self.use_batch_norm {
            return Vec::new();
        }
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        for &(w, _) in &self.hidden {
            dims.push(w);
        }
        dims.push(self.output_dim);
        dims
    }
}

/// Exact number of trainable scalars: dense weights and biases plus BN
/// scale/shift pairs. Running statistics are buffers, not parameters.
pub fn param_count(spec: &MlpSpec) -> usize {
    let mut n = 0;
    for (fi, fo) in spec.dense_dims() {
        n += fi * fo;
        if spec.dense_bias {
            n += fo;
        }
    }
    for f in spec.bn_dims() {
        n += 2 * f;
    }
    n
}

#[derive(Debug, Clone)]
pub struct DenseParams {
    /// `in x out` weight matrix.
    pub w: Tensor,
    /// `1 x out` bias row, when the spec uses biases.
    pub b: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// Concrete parameter values for an [`MlpSpec`].
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub dense: Vec<DenseParams>,
    pub bn: Vec<BnParams>,
}

impl MlpParams {
    /// Glorot-uniform weights (`+-sqrt(6/(fan_in+fan_out))`), zero biases,
    /// BN scale 1 / shift 0, running mean 0 / variance 1. Deterministic in
    /// the seed; each dense layer draws from its own stream.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let dense = spec
            .dense_dims()
            .iter()
            .enumerate()
            .map(|(l, &(fi, fo))| {
                let mut rng = CounterRng::stream(seed, streams::INIT_BASE + l as u64);
                let limit = (6.0 / (fi + fo) as f64).sqrt();
                let mut w = Tensor::zeros(fi, fo);
                for v in w.data_mut() {
                    *v = rng.uniform_in(-limit, limit);
                }
                let b = spec.dense_bias.then(|| Tensor::zeros(1, fo));
                DenseParams { w, b }
            })
            .collect();
        let bn = spec
            .bn_dims()
            .iter()
            .map(|&f| BnParams {
                gamma: Tensor::full(1, f, 1.0),
                beta: Tensor::zeros(1, f),
                running_mean: Tensor::zeros(1, f),
                running_var: Tensor::full(1, f, 1.0),
            })
            .collect();
        MlpParams { dense, bn }
    }

    pub fn n_trainable(&self) -> usize {
        let mut n = 0;
        self.visit_trainable(|t| n += t.numel());
        n
    }

    /// Canonical flattening order: input BN scale/shift (if any), then per
    /// dense layer its weights, bias and following BN scale/shift.
    fn visit_trainable(&self, mut f: impl FnMut(&Tensor)) {
        if !self.bn.is_empty() {
            f(&self.bn[0].gamma);
            f(&self.bn[0].beta);
        }
        for (l, d) in self.dense.iter().enumerate() {
            f(&d.w);
            if let Some(b) = &d.b {
                f(b);
            }
            if !self.bn.is_empty() {
                f(&self.bn[l + 1].gamma);
                f(&self.bn[l + 1].beta);
            }
        }
    }

    fn visit_trainable_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        if !self.bn.is_empty() {
            let bn0 = &mut self.bn[0];
            f(&mut bn0.gamma);
            f(&mut bn0.beta);
        }
        let has_bn = !self.bn.is_empty();
        for l in 0..self.dense.len() {
            f(&mut self.dense[l].w);
            if let Some(b) = &mut self.dense[l].b {
                f(b);
            }
            if has_bn {
                let bnl = &mut self.bn[l + 1];
                f(&mut bnl.gamma);
                f(&mut bnl.beta);
            }
        }
    }

    /// Trainable parameters as one flat vector in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_trainable());
        self.visit_trainable(|t| out.extend_from_slice(t.data()));
        out
    }

    /// Overwrite the trainable parameters from a flat vector.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_trainable_mut(|t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
    }

    /// All tensors (including running statistics) as named entries for
    /// snapshot files. Names are stable: `dense{l}.w`, `dense{l}.b`,
    /// `bn{k}.gamma` / `.beta` / `.running_mean` / `.running_var`.
    pub fn to_named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, d) in self.dense.iter().enumerate() {
            out.push((format!("{prefix}dense{l}.w"), d.w.clone()));
            if let Some(b) = &d.b {
                out.push((format!("{prefix}dense{l}.b"), b.clone()));
            }
        }
        for (k, bn) in self.bn.iter().enumerate() {
            out.push((format!("{prefix}bn{k}.gamma"), bn.gamma.clone()));
            out.push((format!("{prefix}bn{k}.beta"), bn.beta.clone()));
            out.push((format!("{prefix}bn{k}.running_mean"), bn.running_mean.clone()));
            out.push((format!("{prefix}bn{k}.running_var"), bn.running_var.clone()));
        }
        out
    }

    /// Rebuild parameters from named entries (inverse of [`Self::to_named`]).
    pub fn from_named(
        spec: &MlpSpec,
        prefix: &str,
        entries: &[(String, Tensor)],
    ) -> Result<Self, NnError> {
        let lookup = |name: String| -> Result<Tensor, NnError> {
            entries
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| NnError::Snapshot(format!("missing tensor {name}")))
        };
        let mut dense = Vec::new();
        for (l, (fi, fo)) in spec.dense_dims().into_iter().enumerate() {
            let w = lookup(format!("{prefix}dense{l}.w"))?;
            if w.shape() != [fi, fo] {
                return Err(NnError::Snapshot(format!(
                    "dense{l}.w has shape {:?}, expected [{fi}, {fo}]",
                    w.shape()
                )));
            }
            let b = if spec.dense_bias {
                Some(lookup(format!("{prefix}dense{l}.b"))?)
            } else {
                None
            };
            dense.push(DenseParams { w, b });
        }
        let mut bn = Vec::new();
        for (k, f) in spec.bn_dims().into_iter().enumerate() {
            let gamma = lookup(format!("{prefix}bn{k}.gamma"))?;
            if gamma.numel() != f {
                return Err(NnError::Snapshot(format!("bn{k} width mismatch")));
            }
            bn.push(BnParams {
                gamma,
                beta: lookup(format!("{prefix}bn{k}.beta"))?,
                running_mean: lookup(format!("{prefix}bn{k}.running_mean"))?,
                running_var: lookup(format!("{prefix}bn{k}.running_var"))?,
            });
        }
        Ok(MlpParams { dense, bn })
    }
}

/// Graph leaves for one installed network.
pub struct MlpLeaves {
    pub dense_w: Vec<Var>,
    pub dense_b: Vec<Option<Var>>,
    pub bn_gamma: Vec<Var>,
    pub bn_beta: Vec<Var>,
    pub bn_running_mean: Vec<Var>,
    pub bn_running_var: Vec<Var>,
    scaling: Option<(Var, Var)>,
}

impl MlpLeaves {
    /// Install the parameters as graph leaves. Trainable tensors become
    /// `Param` leaves in the canonical flattening order; running statistics
    /// become settable `Input` leaves.
    pub fn install(g: &mut Graph, spec: &MlpSpec, params: &MlpParams) -> Self {
        let mut leaves = MlpLeaves {
            dense_w: Vec::new(),
            dense_b: Vec::new(),
            bn_gamma: vec![Var(usize::MAX); params.bn.len()],
            bn_beta: vec![Var(usize::MAX); params.bn.len()],
            bn_running_mean: Vec::new(),
            bn_running_var: Vec::new(),
            scaling: None,
        };
        let has_bn = !params.bn.is_empty();
        if has_bn {
            leaves.bn_gamma[0] = g.param(&params.bn[0].gamma);
            leaves.bn_beta[0] = g.param(&params.bn[0].beta);
        }
        for (l, d) in params.dense.iter().enumerate() {
            leaves.dense_w.push(g.param(&d.w));
            leaves.dense_b.push(d.b.as_ref().map(|b| g.param(b)));
            if has_bn {
                leaves.bn_gamma[l + 1] = g.param(&params.bn[l + 1].gamma);
                leaves.bn_beta[l + 1] = g.param(&params.bn[l + 1].beta);
            }
        }
        for bn in &params.bn {
            leaves.bn_running_mean.push(g.leaf(&bn.running_mean, LeafKind::Input));
            leaves.bn_running_var.push(g.leaf(&bn.running_var, LeafKind::Input));
        }
        if let Some(sc) = &spec.input_scaling {
            let scale = g.constant(&Tensor::row(&sc.scale));
            let shift = g.constant(&Tensor::row(&sc.shift));
            leaves.scaling = Some((scale, shift));
        }
        leaves
    }

    /// Trainable leaves in the canonical flattening order.
    pub fn trainable(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let has_bn = !self.bn_gamma.is_empty();
        if has_bn {
            out.push(self.bn_gamma[0]);
            out.push(self.bn_beta[0]);
        }
        for l in 0..self.dense_w.len() {
            out.push(self.dense_w[l]);
            if let Some(b) = self.dense_b[l] {
                out.push(b);
            }
            if has_bn {
                out.push(self.bn_gamma[l + 1]);
                out.push(self.bn_beta[l + 1]);
            }
        }
        out
    }

    /// Push updated trainable values from a flat vector into the graph.
    pub fn set_trainable_flat(&self, g: &mut Graph, flat: &[f64]) {
        let mut off = 0;
        for v in self.trainable() {
            let (r, c) = g.shape(v);
            let n = r * c;
            g.set_leaf(v, &flat[off..off + n]).expect("leaf shape fixed");
            off += n;
        }
        assert_eq!(off, flat.len());
    }
}

/// Whether batch statistics (training) or running statistics (inference)
/// drive the batch-normalisation layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch statistics recorded by one train-mode BN layer.
pub struct BnBatchStats {
    pub mean: Var,
    pub var: Var,
}

pub struct ForwardOut {
    pub output: Var,
    /// One entry per BN layer (in layer order) when run in train mode.
    pub bn_stats: Vec<BnBatchStats>,
}

fn activation_var(g: &mut Graph, v: Var, act: Activation) -> Var {
    match act.slope() {
        None => g.tanh(v),
        Some(s) => g.leaky_relu(v, s),
    }
}

fn bn_layer(
    g: &mut Graph,
    x: Var,
    leaves: &MlpLeaves,
    k: usize,
    mode: Mode,
    stats: &mut Vec<BnBatchStats>,
) -> Result<Var, NnError> {
    let (n, _) = g.shape(x);
    let (mean, var) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(NnError::DegenerateBatch(n));
            }
            let mean = g.col_mean(x);
            let centered = g.sub_row(x, mean);
            let sq = g.square(centered);
            let var = g.col_mean(sq);
            stats.push(BnBatchStats { mean, var });
            (mean, var)
        }
        Mode::Infer => (leaves.bn_running_mean[k], leaves.bn_running_var[k]),
    };
    let centered = g.sub_row(x, mean);
    let var_eps = g.add_const(var, BN_EPS);
    let std = g.sqrt(var_eps);
    let normed = g.div_row(centered, std);
    let scaled = g.mul_row(normed, leaves.bn_gamma[k]);
    Ok(g.add_row(scaled, leaves.bn_beta[k]))
}

/// Record a forward pass on the graph. In train mode the BN layers use
/// batch statistics (and report them, so the optimizer step can fold them
/// into the running estimates); in infer mode they read the running
/// statistics leaves.
pub fn forward(
    g: &mut Graph,
    spec: &MlpSpec,
    leaves: &MlpLeaves,
    input: Var,
    mode: Mode,
) -> Result<ForwardOut, NnError> {
    let (_, c) = g.shape(input);
    if c != spec.input_dim {
        return Err(NnError::InputWidth {
            expected: spec.input_dim,
            got: c,
        });
    }
    let mut stats = Vec::new();
    let mut h = input;
    if let Some((scale, shift)) = leaves.scaling {
        h = g.mul_row(h, scale);
        h = g.add_row(h, shift);
    }
    if spec.use_batch_norm {
        h = bn_layer(g, h, leaves, 0, mode, &mut stats)?;
    }
    for (l, &(_, act)) in spec.hidden.iter().enumerate() {
        h = g.matmul(h, leaves.dense_w[l]);
        if let Some(b) = leaves.dense_b[l] {
            h = g.add_row(h, b);
        }
        if spec.use_batch_norm {
            h = bn_layer(g, h, leaves, l + 1, mode, &mut stats)?;
        }
        h = activation_var(g, h, act);
    }
    let last = spec.hidden.len();
    h = g.matmul(h, leaves.dense_w[last]);
    if let Some(b) = leaves.dense_b[last] {
        h = g.add_row(h, b);
    }
    if spec.use_batch_norm {
        h = bn_layer(g, h, leaves, last + 1, mode, &mut stats)?;
    }
    Ok(ForwardOut {
        output: h,
        bn_stats: stats,
    })
}

/// Forward pass carrying input tangent channels (for spatial derivatives).
/// Restricted to bias-style networks; the PDE-residual networks never use
/// batch normalisation.
pub fn forward_jets(
    g: &mut Graph,
    spec: &MlpSpec,
    leaves: &MlpLeaves,
    input: &JetVal,
) -> Result<JetVal, NnError> {
    if spec.use_batch_norm {
        return Err(NnError::TangentsThroughBatchNorm);
    }
    let mut h = input.clone();
    if let Some((scale, shift)) = leaves.scaling {
        h = jet::mul_row(g, &h, scale);
        h = jet::add_row(g, &h, shift);
    }
    for (l, &(_, act)) in spec.hidden.iter().enumerate() {
        h = jet::matmul(g, &h, leaves.dense_w[l]);
        if let Some(b) = leaves.dense_b[l] {
            h = jet::add_row(g, &h, b);
        }
        h = match act.slope() {
            None => jet::tanh(g, &h),
            Some(s) => jet::leaky_relu(g, &h, s),
        };
    }
    let last = spec.hidden.len();
    h = jet::matmul(g, &h, leaves.dense_w[last]);
    if let Some(b) = leaves.dense_b[last] {
        h = jet::add_row(g, &h, b);
    }
    Ok(h)
}

/// Fold the recorded batch statistics into the running estimates:
/// `running <- momentum * running + (1 - momentum) * batch`. Called once
/// per optimizer step, never during evaluation.
pub fn update_running_stats(params: &mut MlpParams, g: &Graph, out: &ForwardOut) {
    assert_eq!(params.bn.len(), out.bn_stats.len());
    for (bn, st) in params.bn.iter_mut().zip(&out.bn_stats) {
        let m = g.value(st.mean);
        let v = g.value(st.var);
        for (r, &b) in bn.running_mean.data_mut().iter_mut().zip(m) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, &b) in bn.running_var.data_mut().iter_mut().zip(v) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

/// Pure inference on values: a deterministic function of `(params, input)`
/// using running statistics for BN. Mirrors the graph forward op for op.
pub fn infer(spec: &MlpSpec, params: &MlpParams, batch: &Tensor) -> Tensor {
    let n = batch.rows();
    assert_eq!(batch.cols(), spec.input_dim, "input width mismatch");
    let mut h = batch.clone();
    if let Some(sc) = &spec.input_scaling {
        for row in h.data_mut().chunks_exact_mut(spec.input_dim) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * sc.scale[j] + sc.shift[j];
            }
        }
    }
    let bn_apply = |h: &mut Tensor, bn: &BnParams| {
        let c = h.cols();
        for row in h.data_mut().chunks_exact_mut(c) {
            for j in 0..c {
                let centered = row[j] - bn.running_mean.data()[j];
                let std = (bn.running_var.data()[j] + BN_EPS).sqrt();
                row[j] = (centered / std) * bn.gamma.data()[j] + bn.beta.data()[j];
            }
        }
    };
    if spec.use_batch_norm {
        bn_apply(&mut h, &params.bn[0]);
    }
    for (l, &(w, act)) in spec.hidden.iter().enumerate() {
        let mut next = Tensor::zeros(n, w);
        gemm_nn(
            n,
            h.cols(),
            w,
            h.data(),
            params.dense[l].w.data(),
            0.0,
            next.data_mut(),
        );
        if let Some(b) = &params.dense[l].b {
            for row in next.data_mut().chunks_exact_mut(w) {
                for (v, &bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
        }
        if spec.use_batch_norm {
            bn_apply(&mut next, &params.bn[l + 1]);
        }
        match act.slope() {
            None => next.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
            Some(s) => next
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = if *v >= 0.0 { *v } else { s * *v }),
        }
        h = next;
    }
    let last = spec.hidden.len();
    let mut out = Tensor::zeros(n, spec.output_dim);
    gemm_nn(
        n,
        h.cols(),
        spec.output_dim,
        h.data(),
        params.dense[last].w.data(),
        0.0,
        out.data_mut(),
    );
    if let Some(b) = &params.dense[last].b {
        for row in out.data_mut().chunks_exact_mut(spec.output_dim) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
    }
    if spec.use_batch_norm {
        bn_apply(&mut out, &params.bn[last + 1]);
    }
    out
}
