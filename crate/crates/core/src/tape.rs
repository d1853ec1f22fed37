//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every differentiable quantity in the crate — network layers, energy
//! residuals, the unrolled Levenberg-Marquardt iterations — is recorded as a
//! node on one of these tapes and swept backwards by [`Tape::backward`].
//!
//! Nodes only ever reference earlier nodes, so the tape is a topologically
//! ordered DAG by construction and a single reverse pass suffices. Tapes are
//! single-owner: build one per independent computation and sweep it; there is
//! no shared mutation, so independent tapes can live on different threads.

use crate::error::{Error, Result};
use crate::tensor::{cholesky, cholesky_solve, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A recorded operation. Inputs are node ids of earlier nodes.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product, equal shapes.
    Mul(NodeId, NodeId),
    /// Scalar node times tensor node.
    SMul(NodeId, NodeId),
    /// Constant scale.
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Tanh(NodeId),
    /// max(0, x); subgradient 0 at the kink.
    Max0(NodeId),
    Softplus(NodeId),
    Log(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    /// Indicator x > 0 as a value; derivative is zero everywhere.
    StepPos(NodeId),
    /// Softmax over the last axis (1-D or row-wise 2-D).
    Softmax(NodeId),
    /// Stack along axis 0; trailing dims must match ([] counts as [1]).
    Concat(Vec<NodeId>),
    /// Rows [lo, hi) along axis 0 (elements for 1-D).
    SliceRows(NodeId, usize, usize),
    Reshape(NodeId),
    /// out[i,j] = m[i,j] * v[i]
    RowScale(NodeId, NodeId),
    /// out[i,j] = m[i,j] * v[j]
    ColScale(NodeId, NodeId),
    /// x solving A x = b for symmetric positive definite A.
    SolveSpd(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    /// Cached Cholesky factor for SolveSpd nodes.
    chol: Option<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// First node that produced a non-finite value, if any.
    poisoned: Option<(usize, &'static str)>,
}

/// dOutput/dNode for every node of a tape, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the swept output with respect to `id`. Nodes unreachable
    /// from the output get a zero tensor of the node's shape.
    pub fn get(&self, id: NodeId, tape: &Tape) -> Tensor {
        match &self.grads[id.index()] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.index()].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.index()].value
    }

    /// First node that produced NaN/Inf, with the op name.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.poisoned
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.poisoned {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op) -> NodeId {
        let (value, chol) = self.eval(&op);
        let id = NodeId(self.nodes.len() as u32);
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some((id.index(), op_name(&op)));
        }
        self.nodes.push(Node { op, value, chol });
        id
    }

    // ── graph construction ───────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some((id.index(), "leaf"));
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            chol: None,
        });
        id
    }

    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.leaf(Tensor::scalar(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    /// Scalar node times tensor node.
    pub fn smul(&mut self, s: NodeId, x: NodeId) -> NodeId {
        self.push(Op::SMul(s, x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -1.0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Transpose(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Square(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sqrt(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn max0(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Max0(x))
    }

    /// Alias for [`Tape::max0`]; the network-activation spelling.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.max0(x)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softplus(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sin(x))
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Cos(x))
    }

    /// Elementwise indicator `x > 0`. Zero derivative; used to build active
    /// sets of penalty features inside analytic Jacobians.
    pub fn step_pos(&mut self, x: NodeId) -> NodeId {
        self.push(Op::StepPos(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero parts");
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: NodeId, lo: usize, hi: usize) -> NodeId {
        self.push(Op::SliceRows(x, lo, hi))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.value(x).numel(),
            "reshape {:?} -> {:?}",
            self.value(x).shape(),
            shape
        );
        let id = self.push(Op::Reshape(x));
        let node = &mut self.nodes[id.index()];
        node.value = Tensor::new(shape.to_vec(), node.value.data().to_vec()).unwrap();
        id
    }

    pub fn row_scale(&mut self, m: NodeId, v: NodeId) -> NodeId {
        self.push(Op::RowScale(m, v))
    }

    pub fn col_scale(&mut self, m: NodeId, v: NodeId) -> NodeId {
        self.push(Op::ColScale(m, v))
    }

    /// Differentiable solve of A·x = b for symmetric positive definite A.
    /// A failed factorization is reported as an error rather than recorded.
    pub fn solve_spd(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        {
            let av = self.value(a);
            let bv = self.value(b);
            assert_eq!(av.shape().len(), 2, "solve_spd expects a square matrix");
            assert_eq!(av.rows(), av.cols(), "solve_spd expects a square matrix");
            assert_eq!(
                bv.numel(),
                av.rows(),
                "solve_spd rhs length {} vs matrix dim {}",
                bv.numel(),
                av.rows()
            );
        }
        let l = cholesky(self.value(a))?;
        let x = Tensor::vector(cholesky_solve(&l, self.value(b).data()));
        let id = NodeId(self.nodes.len() as u32);
        if self.poisoned.is_none() && !x.is_finite() {
            self.poisoned = Some((id.index(), "solve_spd"));
        }
        self.nodes.push(Node {
            op: Op::SolveSpd(a, b),
            value: x,
            chol: Some(l),
        });
        Ok(id)
    }

    // ── composite helpers ────────────────────────────────────────────

    /// Mean of all elements.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let m = self.mul(a, b);
        self.sum(m)
    }

    /// ½·‖x‖²
    pub fn half_sq_norm(&mut self, x: NodeId) -> NodeId {
        let sq = self.square(x);
        let s = self.sum(sq);
        self.scale(s, 0.5)
    }

    /// Elementwise |x| = max0(x) + max0(−x); subgradient 0 at the kink.
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let p = self.max0(x);
        let nx = self.neg(x);
        let n = self.max0(nx);
        self.add(p, n)
    }

    /// Elementwise sign with sign(0) = 0.
    pub fn sign(&mut self, x: NodeId) -> NodeId {
        let p = self.step_pos(x);
        let nx = self.neg(x);
        let n = self.step_pos(nx);
        self.sub(p, n)
    }

    /// Cross-entropy −log softmax(logits)[target].
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        let p = self.softmax(logits);
        let pt = self.slice_rows(p, target, target + 1);
        let lp = self.log(pt);
        let s = self.sum(lp);
        self.neg(s)
    }

    /// Concatenate 2-D blocks left-to-right (axis 1) via the transpose trick.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let transposed: Vec<NodeId> = parts.iter().map(|&p| self.transpose(p)).collect();
        let stacked = self.concat(&transposed);
        self.transpose(stacked)
    }

    // ── execution ────────────────────────────────────────────────────

    fn eval(&self, op: &Op) -> (Tensor, Option<Tensor>) {
        let v = |id: NodeId| &self.nodes[id.index()].value;
        let out = match op {
            Op::Leaf => Tensor::zeros(&[]),
            Op::Add(a, b) => v(*a).add(v(*b)),
            Op::Sub(a, b) => v(*a).sub(v(*b)),
            Op::Mul(a, b) => v(*a).mul(v(*b)),
            Op::SMul(s, x) => {
                let sv = v(*s).item();
                v(*x).scale(sv)
            }
            Op::Scale(x, c) => v(*x).scale(*c),
            Op::Matmul(a, b) => v(*a).matmul(v(*b)),
            Op::Transpose(x) => v(*x).transpose(),
            Op::Sum(x) => Tensor::scalar(v(*x).sum()),
            Op::Square(x) => v(*x).map(|t| t * t),
            Op::Sqrt(x) => v(*x).map(f64::sqrt),
            Op::Tanh(x) => v(*x).map(f64::tanh),
            Op::Max0(x) => v(*x).map(|t| t.max(0.0)),
            Op::Softplus(x) => v(*x).map(softplus),
            Op::Log(x) => v(*x).map(f64::ln),
            Op::Sin(x) => v(*x).map(f64::sin),
            Op::Cos(x) => v(*x).map(f64::cos),
            Op::StepPos(x) => v(*x).map(|t| if t > 0.0 { 1.0 } else { 0.0 }),
            Op::Softmax(x) => softmax_last_axis(v(*x)),
            Op::Concat(parts) => concat_axis0(parts.iter().map(|&p| v(p)).collect::<Vec<_>>()),
            Op::SliceRows(x, lo, hi) => slice_rows(v(*x), *lo, *hi),
            Op::Reshape(x) => v(*x).clone(),
            Op::RowScale(m, s) => row_scale(v(*m), v(*s)),
            Op::ColScale(m, s) => col_scale(v(*m), v(*s)),
            Op::SolveSpd(a, b) => {
                let l = cholesky(v(*a)).expect("solve_spd: factorization checked at insertion");
                let x = cholesky_solve(&l, v(*b).data());
                return (Tensor::vector(x), Some(l));
            }
        };
        (out, None)
    }

    /// Reverse sweep from a scalar output. Returns dOutput/dNode for every
    /// node; nodes not reachable from the output have no stored gradient and
    /// read back as zeros.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        self.ensure_finite()?;
        let out_val = self.value(output);
        if out_val.numel() != 1 {
            return Err(Error::NonScalarOutput(out_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.index()] = Some(Tensor::new(out_val.shape().to_vec(), vec![1.0]).unwrap());

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: "backward",
                    node: i,
                });
            }
            self.vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let v = |id: NodeId| &self.nodes[id.index()].value;
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::StepPos(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone(), v(*a).shape());
                accumulate(grads, *b, g.clone(), v(*b).shape());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone(), v(*a).shape());
                accumulate(grads, *b, g.scale(-1.0), v(*b).shape());
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(v(*b)), v(*a).shape());
                accumulate(grads, *b, g.mul(v(*a)), v(*b).shape());
            }
            Op::SMul(s, x) => {
                let ds = g.dot(v(*x));
                accumulate(grads, *s, Tensor::new(v(*s).shape().to_vec(), vec![ds]).unwrap(), v(*s).shape());
                accumulate(grads, *x, g.scale(v(*s).item()), v(*x).shape());
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.scale(*c), v(*x).shape()),
            Op::Matmul(a, b) => {
                let (da, db) = matmul_vjp(v(*a), v(*b), g);
                accumulate(grads, *a, da, v(*a).shape());
                accumulate(grads, *b, db, v(*b).shape());
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose(), v(*x).shape()),
            Op::Sum(x) => {
                accumulate(grads, *x, Tensor::full(v(*x).shape(), g.item()), v(*x).shape())
            }
            Op::Square(x) => {
                let dx = g.zip(v(*x), |gi, xi| 2.0 * xi * gi);
                accumulate(grads, *x, dx, v(*x).shape());
            }
            Op::Sqrt(x) => {
                let dx = g.zip(&node.value, |gi, yi| gi * 0.5 / yi);
                accumulate(grads, *x, dx, v(*x).shape());
            }
            Op::Tanh(x) => {
                let dx = g.zip(&node.value, |gi, yi| gi * (1.0 - yi * yi));
                accumulate(grads, *x, dx, v(*x).shape());
            }
            Op::Max0(x) => {
                let dx = g.zip(v(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                accumulate(grads, *x, dx, v(*x).shape());
            }
            Op::Softplus(x) => {
                let dx = g.zip(v(*x), |gi, xi| gi * sigmoid(xi));
                accumulate(grads, *x, dx, v(*x).shape());
            }
            Op::Log(x) => {
                let dx = g.zip(v(*x), |gi, xi| gi / xi);
                accumulate(grads, *x, dx, v(*x).shape());
            }
            Op::Sin(x) => {
                let dx = g.zip(v(*x), |gi, xi| gi * xi.cos());
                accumulate(grads, *x, dx, v(*x).shape());
            }
            Op::Cos(x) => {
                let dx = g.zip(v(*x), |gi, xi| -gi * xi.sin());
                accumulate(grads, *x, dx, v(*x).shape());
            }
            Op::Softmax(x) => {
                let dx = softmax_vjp(&node.value, g);
                accumulate(grads, *x, dx, v(*x).shape());
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = v(p);
                    let rows = axis0_len(pv.shape());
                    let row_width = pv.numel() / rows.max(1);
                    let lo = offset;
                    let hi = offset + rows;
                    offset = hi;
                    let gd = g.data();
                    let piece = Tensor::new(
                        pv.shape().to_vec(),
                        gd[lo * row_width..hi * row_width].to_vec(),
                    )
                    .unwrap();
                    accumulate(grads, p, piece, pv.shape());
                }
            }
            Op::SliceRows(x, lo, _hi) => {
                let xv = v(*x);
                let rows = axis0_len(xv.shape());
                let row_width = xv.numel() / rows.max(1);
                let mut dx = Tensor::zeros(xv.shape());
                let dst = &mut dx.data_mut()[lo * row_width..lo * row_width + g.numel()];
                dst.copy_from_slice(g.data());
                accumulate(grads, *x, dx, xv.shape());
            }
            Op::Reshape(x) => {
                let xv = v(*x);
                let dx = Tensor::new(xv.shape().to_vec(), g.data().to_vec()).unwrap();
                accumulate(grads, *x, dx, xv.shape());
            }
            Op::RowScale(m, s) => {
                let (mv, sv) = (v(*m), v(*s));
                let (r, c) = (mv.rows(), mv.cols());
                let mut dm = Tensor::zeros(mv.shape());
                let mut ds = vec![0.0; r];
                for i2 in 0..r {
                    let si = sv.data()[i2];
                    for j in 0..c {
                        let gij = g.data()[i2 * c + j];
                        dm.data_mut()[i2 * c + j] = gij * si;
                        ds[i2] += gij * mv.data()[i2 * c + j];
                    }
                }
                accumulate(grads, *m, dm, mv.shape());
                accumulate(grads, *s, Tensor::vector(ds), sv.shape());
            }
            Op::ColScale(m, s) => {
                let (mv, sv) = (v(*m), v(*s));
                let (r, c) = (mv.rows(), mv.cols());
                let mut dm = Tensor::zeros(mv.shape());
                let mut ds = vec![0.0; c];
                for i2 in 0..r {
                    for j in 0..c {
                        let gij = g.data()[i2 * c + j];
                        dm.data_mut()[i2 * c + j] = gij * sv.data()[j];
                        ds[j] += gij * mv.data()[i2 * c + j];
                    }
                }
                accumulate(grads, *m, dm, mv.shape());
                accumulate(grads, *s, Tensor::vector(ds), sv.shape());
            }
            Op::SolveSpd(a, b) => {
                let l = node.chol.as_ref().expect("solve_spd caches its factor");
                let db = Tensor::vector(cholesky_solve(l, g.data()));
                // dA = -db ⊗ x
                let x = &node.value;
                let n = x.numel();
                let mut da = Tensor::zeros(&[n, n]);
                for r in 0..n {
                    for c2 in 0..n {
                        da.data_mut()[r * n + c2] = -db.data()[r] * x.data()[c2];
                    }
                }
                accumulate(grads, *a, da, v(*a).shape());
                accumulate(grads, *b, db, v(*b).shape());
            }
        }
    }

    /// Re-execute every op from the stored leaf values. Used to check that a
    /// tape replays deterministically.
    pub fn replay_values(&self) -> Vec<Tensor> {
        let mut replayed = Tape::new();
        for node in &self.nodes {
            match &node.op {
                Op::Leaf => {
                    replayed.leaf(node.value.clone());
                }
                op => {
                    let id = replayed.push(op.clone());
                    // Reshape carries its target shape in the stored value.
                    if matches!(op, Op::Reshape(_)) {
                        let data = replayed.nodes[id.index()].value.data().to_vec();
                        replayed.nodes[id.index()].value =
                            Tensor::new(node.value.shape().to_vec(), data).unwrap();
                    }
                }
            }
        }
        replayed.nodes.into_iter().map(|n| n.value).collect()
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::SMul(..) => "smul",
        Op::Scale(..) => "scale",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Sum(..) => "sum",
        Op::Square(..) => "square",
        Op::Sqrt(..) => "sqrt",
        Op::Tanh(..) => "tanh",
        Op::Max0(..) => "max0",
        Op::Softplus(..) => "softplus",
        Op::Log(..) => "log",
        Op::Sin(..) => "sin",
        Op::Cos(..) => "cos",
        Op::StepPos(..) => "step_pos",
        Op::Softmax(..) => "softmax",
        Op::Concat(..) => "concat",
        Op::SliceRows(..) => "slice_rows",
        Op::Reshape(..) => "reshape",
        Op::RowScale(..) => "row_scale",
        Op::ColScale(..) => "col_scale",
        Op::SolveSpd(..) => "solve_spd",
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor, shape: &[usize]) {
    debug_assert_eq!(g.shape(), shape);
    match &mut grads[id.index()] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn softplus(x: f64) -> f64 {
    // Stable ln(1 + e^x).
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_last_axis(x: &Tensor) -> Tensor {
    let shape = x.shape();
    let (rows, cols) = match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("softmax expects a 1-D or 2-D input, got {:?}", shape),
    };
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[r * cols + j] = e;
            z += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= z;
        }
    }
    Tensor::new(shape.to_vec(), out).unwrap()
}

fn softmax_vjp(y: &Tensor, g: &Tensor) -> Tensor {
    let shape = y.shape();
    let (rows, cols) = match shape.len() {
        1 => (1, shape[0]),
        _ => (shape[0], shape[1]),
    };
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let yr = &y.data()[r * cols..(r + 1) * cols];
        let gr = &g.data()[r * cols..(r + 1) * cols];
        let gy: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for j in 0..cols {
            dx[r * cols + j] = yr[j] * (gr[j] - gy);
        }
    }
    Tensor::new(shape.to_vec(), dx).unwrap()
}

fn axis0_len(shape: &[usize]) -> usize {
    if shape.is_empty() {
        1
    } else {
        shape[0]
    }
}

fn concat_axis0(parts: Vec<&Tensor>) -> Tensor {
    let first = parts[0];
    let trailing: &[usize] = if first.shape().is_empty() {
        &[]
    } else {
        &first.shape()[1..]
    };
    let row_width: usize = trailing.iter().product();
    let mut total_rows = 0;
    let mut data = Vec::new();
    for p in &parts {
        let p_trailing: &[usize] = if p.shape().is_empty() {
            &[]
        } else {
            &p.shape()[1..]
        };
        assert_eq!(
            p_trailing, trailing,
            "concat trailing dims differ: {:?} vs {:?}",
            p.shape(),
            first.shape()
        );
        total_rows += axis0_len(p.shape());
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![total_rows];
    shape.extend_from_slice(trailing);
    Tensor::new(shape, data).unwrap()
}

fn slice_rows(x: &Tensor, lo: usize, hi: usize) -> Tensor {
    let rows = axis0_len(x.shape());
    assert!(lo <= hi && hi <= rows, "slice [{lo},{hi}) of {rows} rows");
    let row_width = x.numel() / rows.max(1);
    let mut shape = x.shape().to_vec();
    if shape.is_empty() {
        shape = vec![1];
    }
    shape[0] = hi - lo;
    Tensor::new(shape, x.data()[lo * row_width..hi * row_width].to_vec()).unwrap()
}

fn row_scale(m: &Tensor, s: &Tensor) -> Tensor {
    let (r, c) = (m.rows(), m.cols());
    assert_eq!(s.numel(), r, "row_scale vector length");
    let mut out = m.clone();
    for i in 0..r {
        let si = s.data()[i];
        for j in 0..c {
            out.data_mut()[i * c + j] *= si;
        }
    }
    out
}

fn col_scale(m: &Tensor, s: &Tensor) -> Tensor {
    let (r, c) = (m.rows(), m.cols());
    assert_eq!(s.numel(), c, "col_scale vector length");
    let mut out = m.clone();
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[i * c + j] *= s.data()[j];
        }
    }
    out
}

fn matmul_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    // Work in promoted matrix shapes, then restore the operands' own shapes.
    let (ar, ac) = promoted_dims(a, true);
    let (br, bc) = promoted_dims(b, false);
    debug_assert_eq!(ac, br);
    let gm = Tensor::new(vec![ar, bc], g.data().to_vec()).unwrap();
    let am = Tensor::new(vec![ar, ac], a.data().to_vec()).unwrap();
    let bm = Tensor::new(vec![br, bc], b.data().to_vec()).unwrap();
    let da = gm.matmul(&bm.transpose());
    let db = am.transpose().matmul(&gm);
    (
        Tensor::new(a.shape().to_vec(), da.into_data()).unwrap(),
        Tensor::new(b.shape().to_vec(), db.into_data()).unwrap(),
    )
}

fn promoted_dims(t: &Tensor, is_left: bool) -> (usize, usize) {
    match t.shape().len() {
        2 => (t.shape()[0], t.shape()[1]),
        1 => {
            if is_left {
                (1, t.shape()[0])
            } else {
                (t.shape()[0], 1)
            }
        }
        _ => panic!("matmul operand must be 1-D or 2-D"),
    }
}

// ── finite differences ──────────────────────────────────────────────

/// Compare reverse-mode gradients of `f` at `x` against central finite
/// differences, component-wise. Returns the maximum relative error, with the
/// denominator floored at 1 so near-zero gradients read as absolute error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: Fn(&mut Tape, NodeId) -> NodeId,
{
    grad_check_multi(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), eps)
}

/// Multi-input variant of [`grad_check`].
pub fn grad_check_multi<F>(f: F, xs: &[Tensor], eps: f64) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &ids);
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &ids);
    let grads = match tape.backward(out) {
        Ok(g) => g,
        Err(_) => return f64::INFINITY,
    };

    let mut worst = 0.0_f64;
    for (which, x) in xs.iter().enumerate() {
        let ad = grads.get(ids[which], &tape);
        for comp in 0..x.numel() {
            let mut plus: Vec<Tensor> = xs.to_vec();
            plus[which].data_mut()[comp] += eps;
            let mut minus: Vec<Tensor> = xs.to_vec();
            minus[which].data_mut()[comp] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = ad.data()[comp];
            let denom = a.abs().max(fd.abs()).max(1.0);
            worst = worst.max((a - fd).abs() / denom);
        }
    }
    worst
}
