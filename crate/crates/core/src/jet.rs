//! Forward-mode tangents recorded on the reverse-mode tape.
//!
//! A [`DualVar`] carries a primal together with one directional derivative;
//! a [`JetVal`] generalises this to several directions at once, each
//! optionally with a second-order term, while sharing the primal chain.
//! Every tangent is expressed through ordinary graph primitives, so the
//! results stay differentiable with respect to network parameters: a loss
//! built from `u_x` or `u_xx` can be sent through [`Graph::backward`]
//! unchanged. This is how the PDE residuals obtain `du/dt`, `grad u` and
//! the needed second derivatives.

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

/// Primal/tangent pair for one direction. Both parts always have the same
/// shape.
#[derive(Debug, Clone, Copy)]
pub struct DualVar {
    pub primal: Var,
    pub tangent: Var,
}

impl DualVar {
    pub fn new(g: &Graph, primal: Var, tangent: Var) -> Self {
        assert_eq!(
            g.shape(primal),
            g.shape(tangent),
            "dual primal and tangent must share a shape"
        );
        DualVar { primal, tangent }
    }

    pub fn jet(self) -> JetVal {
        JetVal {
            primal: self.primal,
            channels: vec![JetChannel {
                t1: self.tangent,
                t2: SecondOrder::Untracked,
            }],
        }
    }
}

/// Second-order term of a tangent channel.
///
/// `Zero` means the term is tracked but structurally zero so far (the seed
/// of a straight-line perturbation); linear operations keep it `Zero` for
/// free and only genuinely curved operations promote it to a node. Piecewise
/// linear activations never promote it, which encodes their everywhere-zero
/// second derivative.
#[derive(Debug, Clone, Copy)]
pub enum SecondOrder {
    /// Not requested for this direction.
    Untracked,
    /// Requested, identically zero so far.
    Zero,
    Node(Var),
}

impl SecondOrder {
    pub fn tracked(&self) -> bool {
        !matches!(self, SecondOrder::Untracked)
    }

    /// The second-order term as a graph node, materialising zeros if needed.
    pub fn as_var(&self, g: &mut Graph, rows: usize, cols: usize) -> Option<Var> {
        match self {
            SecondOrder::Untracked => None,
            SecondOrder::Zero => Some(g.constant(&Tensor::zeros(rows, cols))),
            SecondOrder::Node(v) => Some(*v),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct JetChannel {
    pub t1: Var,
    pub t2: SecondOrder,
}

/// A value with tangent channels for several perturbation directions.
#[derive(Debug, Clone)]
pub struct JetVal {
    pub primal: Var,
    pub channels: Vec<JetChannel>,
}

impl JetVal {
    /// Plain value without tangents.
    pub fn plain(primal: Var) -> Self {
        JetVal {
            primal,
            channels: Vec::new(),
        }
    }

    /// Seed a batch of points (`n x m`) with one channel per requested
    /// coordinate: the first-order tangent is the unit direction `e_j`,
    /// and the second-order term starts at zero when requested.
    pub fn seed_coordinates(g: &mut Graph, points: Var, second: &[bool]) -> Self {
        let (n, m) = g.shape(points);
        assert_eq!(second.len(), m, "one second-order flag per coordinate");
        let channels = (0..m)
            .map(|j| {
                let mut dir = Tensor::zeros(n, m);
                for i in 0..n {
                    dir.set(i, j, 1.0);
                }
                let t1 = g.constant(&dir);
                let t2 = if second[j] {
                    SecondOrder::Zero
                } else {
                    SecondOrder::Untracked
                };
                JetChannel { t1, t2 }
            })
            .collect();
        JetVal {
            primal: points,
            channels,
        }
    }
}

fn map_linear(g: &mut Graph, x: &JetVal, mut f: impl FnMut(&mut Graph, Var) -> Var) -> JetVal {
    let primal = f(g, x.primal);
    let channels = x
        .channels
        .iter()
        .map(|ch| {
            let t1 = f(g, ch.t1);
            let t2 = match ch.t2 {
                SecondOrder::Untracked => SecondOrder::Untracked,
                SecondOrder::Zero => SecondOrder::Zero,
                SecondOrder::Node(v) => SecondOrder::Node(f(g, v)),
            };
            JetChannel { t1, t2 }
        })
        .collect();
    JetVal { primal, channels }
}

/// x @ w where only x carries tangents.
pub fn matmul(g: &mut Graph, x: &JetVal, w: Var) -> JetVal {
    map_linear(g, x, |g, v| g.matmul(v, w))
}

/// x + b (row broadcast); constants shift the primal only.
pub fn add_row(g: &mut Graph, x: &JetVal, b: Var) -> JetVal {
    let primal = g.add_row(x.primal, b);
    JetVal {
        primal,
        channels: x.channels.clone(),
    }
}

/// Row-broadcast scaling (e.g. affine input normalisation).
pub fn mul_row(g: &mut Graph, x: &JetVal, s: Var) -> JetVal {
    map_linear(g, x, |g, v| g.mul_row(v, s))
}

pub fn scale(g: &mut Graph, x: &JetVal, s: f64) -> JetVal {
    map_linear(g, x, |g, v| g.scale(v, s))
}

pub fn add_const(g: &mut Graph, x: &JetVal, c: f64) -> JetVal {
    let primal = g.add_const(x.primal, c);
    JetVal {
        primal,
        channels: x.channels.clone(),
    }
}

pub fn neg(g: &mut Graph, x: &JetVal) -> JetVal {
    map_linear(g, x, |g, v| g.neg(v))
}

pub fn slice_col(g: &mut Graph, x: &JetVal, j: usize) -> JetVal {
    map_linear(g, x, |g, v| g.slice_col(v, j))
}

pub fn add(g: &mut Graph, a: &JetVal, b: &JetVal) -> JetVal {
    combine(g, a, b, Graph::add, |g, x2, y2| match (x2, y2) {
        (SecondOrder::Zero, o) | (o, SecondOrder::Zero) => o,
        (SecondOrder::Node(x), SecondOrder::Node(y)) => SecondOrder::Node(g.add(x, y)),
        _ => unreachable!("tracked channels only"),
    })
}

pub fn sub(g: &mut Graph, a: &JetVal, b: &JetVal) -> JetVal {
    combine(g, a, b, Graph::sub, |g, x2, y2| match (x2, y2) {
        (o, SecondOrder::Zero) => o,
        (SecondOrder::Zero, SecondOrder::Node(y)) => SecondOrder::Node(g.neg(y)),
        (SecondOrder::Node(x), SecondOrder::Node(y)) => SecondOrder::Node(g.sub(x, y)),
        _ => unreachable!("tracked channels only"),
    })
}

fn combine(
    g: &mut Graph,
    a: &JetVal,
    b: &JetVal,
    prim: fn(&mut Graph, Var, Var) -> Var,
    sec: impl Fn(&mut Graph, SecondOrder, SecondOrder) -> SecondOrder,
) -> JetVal {
    assert_eq!(
        a.channels.len(),
        b.channels.len(),
        "jet operands must carry matching channels"
    );
    let primal = prim(g, a.primal, b.primal);
    let channels = a
        .channels
        .iter()
        .zip(&b.channels)
        .map(|(ca, cb)| {
            let t1 = prim(g, ca.t1, cb.t1);
            let t2 = match (ca.t2.tracked(), cb.t2.tracked()) {
                (false, false) => SecondOrder::Untracked,
                (true, true) => sec(g, ca.t2, cb.t2),
                _ => panic!("jet operands disagree on second-order tracking"),
            };
            JetChannel { t1, t2 }
        })
        .collect();
    JetVal { primal, channels }
}

/// Elementwise product with the full second-order product rule
/// `(ab)'' = a''b + 2a'b' + ab''`.
pub fn mul(g: &mut Graph, a: &JetVal, b: &JetVal) -> JetVal {
    assert_eq!(a.channels.len(), b.channels.len());
    let primal = g.mul(a.primal, b.primal);
    let channels = a
        .channels
        .iter()
        .zip(&b.channels)
        .map(|(ca, cb)| {
            let left = g.mul(ca.t1, b.primal);
            let right = g.mul(a.primal, cb.t1);
            let t1 = g.add(left, right);
            let t2 = match (ca.t2.tracked(), cb.t2.tracked()) {
                (false, false) => SecondOrder::Untracked,
                (true, true) => {
                    let cross = g.mul(ca.t1, cb.t1);
                    let mut acc = g.scale(cross, 2.0);
                    if let SecondOrder::Node(x2) = ca.t2 {
                        let x2b = g.mul(x2, b.primal);
                        acc = g.add(acc, x2b);
                    }
                    if let SecondOrder::Node(y2) = cb.t2 {
                        let ay2 = g.mul(a.primal, y2);
                        acc = g.add(acc, ay2);
                    }
                    SecondOrder::Node(acc)
                }
                _ => panic!("jet operands disagree on second-order tracking"),
            };
            JetChannel { t1, t2 }
        })
        .collect();
    JetVal { primal, channels }
}

/// tanh with `f' = 1 - y^2` and `f'' = -2 y (1 - y^2)`.
pub fn tanh(g: &mut Graph, x: &JetVal) -> JetVal {
    let y = g.tanh(x.primal);
    if x.channels.is_empty() {
        return JetVal::plain(y);
    }
    let y2 = g.square(y);
    let ny2 = g.neg(y2);
    let d1 = g.add_const(ny2, 1.0);
    let need_d2 = x.channels.iter().any(|c| c.t2.tracked());
    let d2 = if need_d2 {
        let yd1 = g.mul(y, d1);
        Some(g.scale(yd1, -2.0))
    } else {
        None
    };
    let channels = x
        .channels
        .iter()
        .map(|ch| {
            let t1 = g.mul(ch.t1, d1);
            let t2 = match ch.t2 {
                SecondOrder::Untracked => SecondOrder::Untracked,
                SecondOrder::Zero => {
                    let sq = g.square(ch.t1);
                    SecondOrder::Node(g.mul(d2.unwrap(), sq))
                }
                SecondOrder::Node(x2) => {
                    let sq = g.square(ch.t1);
                    let curv = g.mul(d2.unwrap(), sq);
                    let lin = g.mul(x2, d1);
                    SecondOrder::Node(g.add(curv, lin))
                }
            };
            JetChannel { t1, t2 }
        })
        .collect();
    JetVal {
        primal: y,
        channels,
    }
}

/// Leaky rectifier; the second derivative is defined as zero everywhere,
/// so second-order terms pass through the slope factor only.
pub fn leaky_relu(g: &mut Graph, x: &JetVal, slope: f64) -> JetVal {
    let y = g.leaky_relu(x.primal, slope);
    if x.channels.is_empty() {
        return JetVal::plain(y);
    }
    let d1 = g.leaky_grad(x.primal, slope);
    let channels = x
        .channels
        .iter()
        .map(|ch| {
            let t1 = g.mul(ch.t1, d1);
            let t2 = match ch.t2 {
                SecondOrder::Untracked => SecondOrder::Untracked,
                SecondOrder::Zero => SecondOrder::Zero,
                SecondOrder::Node(x2) => SecondOrder::Node(g.mul(x2, d1)),
            };
            JetChannel { t1, t2 }
        })
        .collect();
    JetVal {
        primal: y,
        channels,
    }
}

/// Value, first derivatives and requested second derivatives of a scalar
/// function at a batch of points.
pub struct SpatialDerivs {
    /// Function value, `n x 1`.
    pub value: Var,
    /// One `n x 1` column per input coordinate.
    pub grad: Vec<Var>,
    /// Second derivative along each coordinate where requested.
    pub second: Vec<Option<Var>>,
}

/// Evaluate `f` (a graph-recorded scalar function of `n x m` points) with
/// tangent channels seeded along every coordinate, returning its value,
/// gradient and the requested pure second derivatives. All results are
/// tape nodes, so a loss built from them remains differentiable in any
/// parameters `f` closes over.
pub fn spatial_derivatives<F>(g: &mut Graph, f: F, points: Var, second: &[bool]) -> SpatialDerivs
where
    F: FnOnce(&mut Graph, &JetVal) -> JetVal,
{
    let (n, m) = g.shape(points);
    assert_eq!(second.len(), m);
    let seeded = JetVal::seed_coordinates(g, points, second);
    let out = f(g, &seeded);
    assert_eq!(
        out.channels.len(),
        m,
        "function must preserve the tangent channels"
    );
    assert_eq!(g.shape(out.primal).1, 1, "expected a scalar function");
    let grad = out.channels.iter().map(|c| c.t1).collect();
    let second = out
        .channels
        .iter()
        .map(|c| c.t2.as_var(g, n, 1))
        .collect();
    SpatialDerivs {
        value: out.primal,
        grad,
        second,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// u(t, x) = t * x as a jet function of an `n x 2` point batch.
    fn bilinear(g: &mut Graph, pts: &JetVal) -> JetVal {
        let t = slice_col(g, pts, 0);
        let x = slice_col(g, pts, 1);
        mul(g, &t, &x)
    }

    #[test]
    fn bilinear_derivatives() {
        // du/dt = x, du/dx = t, d2u/dx2 = 0 at any point
        let mut g = Graph::new();
        let pts = g.constant(&Tensor::from_rows(2, 2, &[0.3, -1.7, 2.0, 0.5]));
        let d = spatial_derivatives(&mut g, bilinear, pts, &[false, true]);
        assert_eq!(g.value(d.value), &[0.3 * -1.7, 2.0 * 0.5]);
        assert_eq!(g.value(d.grad[0]), &[-1.7, 0.5]); // du/dt = x
        assert_eq!(g.value(d.grad[1]), &[0.3, 2.0]); // du/dx = t
        assert!(d.second[0].is_none());
        let uxx = d.second[1].unwrap();
        assert_eq!(g.value(uxx), &[0.0, 0.0]);
    }

    #[test]
    fn tanh_neuron_second_derivative_vanishes_at_origin() {
        // u(x) = tanh(x) is odd, so u''(0) = 0; u'(0) = 1
        let mut g = Graph::new();
        let pts = g.constant(&Tensor::from_rows(1, 1, &[0.0]));
        let d = spatial_derivatives(
            &mut g,
            |g, p| {
                let x = slice_col(g, p, 0);
                tanh(g, &x)
            },
            pts,
            &[true],
        );
        assert_eq!(g.value(d.value), &[0.0]);
        assert_eq!(g.value(d.grad[0]), &[1.0]);
        assert_eq!(g.value(d.second[0].unwrap()), &[0.0]);
    }

    #[test]
    fn jet_derivatives_match_finite_differences() {
        // f(t, x) = tanh(0.7 x - 0.3 t) * x + t^2
        let f_val = |t: f64, x: f64| (0.7 * x - 0.3 * t).tanh() * x + t * t;
        let jet_f = |g: &mut Graph, p: &JetVal| -> JetVal {
            let t = slice_col(g, p, 0);
            let x = slice_col(g, p, 1);
            let sx = scale(g, &x, 0.7);
            let st = scale(g, &t, -0.3);
            let z = add(g, &sx, &st);
            let tz = tanh(g, &z);
            let prod = mul(g, &tz, &x);
            let t2 = mul(g, &t, &t);
            add(g, &prod, &t2)
        };

        let (t0, x0) = (0.4, -0.8);
        let mut g = Graph::new();
        let pts = g.constant(&Tensor::from_rows(1, 2, &[t0, x0]));
        let d = spatial_derivatives(&mut g, jet_f, pts, &[true, true]);

        let h = 1e-5;
        let fd_t = (f_val(t0 + h, x0) - f_val(t0 - h, x0)) / (2.0 * h);
        let fd_x = (f_val(t0, x0 + h) - f_val(t0, x0 - h)) / (2.0 * h);
        let fd_tt = (f_val(t0 + h, x0) - 2.0 * f_val(t0, x0) + f_val(t0 - h, x0)) / (h * h);
        let fd_xx = (f_val(t0, x0 + h) - 2.0 * f_val(t0, x0) + f_val(t0, x0 - h)) / (h * h);

        assert!((g.value(d.grad[0])[0] - fd_t).abs() < 1e-8);
        assert!((g.value(d.grad[1])[0] - fd_x).abs() < 1e-8);
        assert!((g.value(d.second[0].unwrap())[0] - fd_tt).abs() < 1e-4);
        assert!((g.value(d.second[1].unwrap())[0] - fd_xx).abs() < 1e-4);
    }

    #[test]
    fn forward_tangent_matches_reverse_input_gradient() {
        // d/dx of tanh(w x) computed forward (tangent seed) vs reverse
        // (backward to the input leaf), agreement to 1e-12.
        let w = Tensor::from_rows(1, 4, &[0.5, -1.2, 0.3, 2.0]);
        let u = Tensor::from_rows(4, 1, &[1.0, -0.5, 0.25, 0.75]);
        let xs = [-0.9, -0.1, 0.0, 0.4, 1.3];
        for &x0 in &xs {
            let mut g = Graph::new();
            let x = g.input(&Tensor::scalar(x0));
            let wl = g.constant(&w);
            let ul = g.constant(&u);
            let h = g.matmul(x, wl);
            let th = g.tanh(h);
            let y = g.matmul(th, ul);
            g.backward(y).unwrap();
            let reverse = g.grad(x).unwrap()[0];

            let mut g2 = Graph::new();
            let xp = g2.constant(&Tensor::scalar(x0));
            let d = spatial_derivatives(
                &mut g2,
                |g, p: &JetVal| {
                    let wl = g.constant(&w);
                    let ul = g.constant(&u);
                    let h = matmul(g, p, wl);
                    let th = tanh(g, &h);
                    matmul(g, &th, ul)
                },
                xp,
                &[false],
            );
            let forward = g2.value(d.grad[0])[0];
            let denom = reverse.abs().max(1e-12);
            assert!(
                (forward - reverse).abs() / denom < 1e-12,
                "x={x0}: forward {forward} vs reverse {reverse}"
            );
        }
    }
}
