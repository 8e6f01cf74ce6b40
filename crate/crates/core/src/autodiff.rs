//! Arena-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Tape`] owns a flat arena of nodes; every operation evaluates eagerly
//! and records its operands, so the arena order is already topological and
//! [`Tape::backward`] is a single reverse sweep.  Gradients of any scalar
//! (1x1) node are exact up to floating-point rounding; [`fd_gradients`]
//! provides the independent finite-difference oracle the tests compare
//! against.
//!
//! A process-wide counter tracks how many backward sweeps have ever run,
//! which lets deployment paths assert they are forward-only.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::mat::Mat;
use crate::mathx;

static BACKWARD_PASSES: AtomicUsize = AtomicUsize::new(0);

/// Total backward sweeps executed by this process.
pub fn backward_passes() -> usize {
    BACKWARD_PASSES.load(Ordering::Relaxed)
}

/// Handle into a [`Tape`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    /// Elementwise quotient.
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Scale(NodeId, f64),
    Block { a: NodeId, r0: usize, c0: usize },
    /// Embed `a` into a zero matrix at `(r0, c0)`.
    PadInto { a: NodeId, r0: usize, c0: usize },
    VStack(NodeId, NodeId),
    /// Tile a single row; the count is the stored value's row count.
    RepeatRows(NodeId),
    /// Same entries in row-major order, different shape.
    Reshape(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    /// Sum of squared entries, a 1x1 result.
    SumSq(NodeId),
    /// Frobenius inner product, a 1x1 result.
    FrobDot(NodeId, NodeId),
    /// Elementwise square root.
    Sqrt(NodeId),
    /// Elementwise natural log.
    Ln(NodeId),
    /// Elementwise absolute value.
    Abs(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    val: Mat,
}

/// Gradients of one scalar output with respect to every node; `None` for
/// nodes the output does not depend on.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    /// Gradient, or zeros of the given shape when the node is unused.
    pub fn wrt_or_zero(&self, id: NodeId, rows: usize, cols: usize) -> Mat {
        match self.wrt(id) {
            Some(g) => {
                assert_eq!(g.shape(), (rows, cols), "gradient shape");
                g.clone()
            }
            None => Mat::zeros(rows, cols),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].val
    }

    fn push(&mut self, op: Op, val: Mat) -> NodeId {
        self.nodes.push(Node { op, val });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, m: Mat) -> NodeId {
        self.push(Op::Leaf, m)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b)).expect("add shapes");
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b)).expect("sub shapes");
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shapes");
        let mut v = va.clone();
        for (x, y) in v.as_mut_slice().iter_mut().zip(vb.as_slice()) {
            *x *= y;
        }
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "div shapes");
        let mut v = va.clone();
        for (x, y) in v.as_mut_slice().iter_mut().zip(vb.as_slice()) {
            *x /= y;
        }
        self.push(Op::Div(a, b), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn block(&mut self, a: NodeId, r0: usize, r1: usize, c0: usize, c1: usize) -> NodeId {
        let v = self.value(a).block(r0, r1, c0, c1);
        self.push(Op::Block { a, r0, c0 }, v)
    }

    pub fn pad_into(&mut self, a: NodeId, rows: usize, cols: usize, r0: usize, c0: usize) -> NodeId {
        let va = self.value(a);
        assert!(r0 + va.rows() <= rows && c0 + va.cols() <= cols, "pad bounds");
        let mut v = Mat::zeros(rows, cols);
        v.set_block(r0, c0, va);
        self.push(Op::PadInto { a, r0, c0 }, v)
    }

    pub fn vstack(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).vstack(self.value(b));
        self.push(Op::VStack(a, b), v)
    }

    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows(), 1, "repeat_rows takes a row vector");
        let row = va.row(0).to_vec();
        let v = Mat::from_fn(n, row.len(), |_, c| row[c]);
        self.push(Op::RepeatRows(a), v)
    }

    /// Reinterpret the entries row-major under a new shape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows() * va.cols(), rows * cols, "reshape size");
        let v = Mat::from_vec(rows, cols, va.as_slice().to_vec());
        self.push(Op::Reshape(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(mathx::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sumsq(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).frob_norm_sq();
        self.push(Op::SumSq(a), Mat::from_vec(1, 1, vec![s]))
    }

    pub fn frob_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.value(a).frob_dot(self.value(b));
        self.push(Op::FrobDot(a, b), Mat::from_vec(1, 1, vec![s]))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(mathx::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(mathx::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(mathx::abs);
        self.push(Op::Abs(a), v)
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "scalar() on non-scalar node");
        v[(0, 0)]
    }

    /// Constant 1x1 node (a leaf; gradients may flow to it but are unused).
    pub fn scalar_leaf(&mut self, x: f64) -> NodeId {
        self.leaf(Mat::from_vec(1, 1, vec![x]))
    }

    /// Reverse sweep from a scalar node.  Operands always precede their
    /// consumers in the arena, so one reverse pass visits every dependent.
    pub fn backward(&self, out: NodeId) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        BACKWARD_PASSES.fetch_add(1, Ordering::Relaxed);
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let da = hadamard(&g, self.value(*b));
                    let db = hadamard(&g, self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Div(a, b) => {
                    let vb = self.value(*b);
                    let da = zip_map(&g, vb, |gi, bi| gi / bi);
                    let va = self.value(*a);
                    let mut db = g.clone();
                    for ((x, ai), bi) in
                        db.as_mut_slice().iter_mut().zip(va.as_slice()).zip(vb.as_slice())
                    {
                        *x
 = -*x * ai / (bi * bi);
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose());
                    let db = self.value(*a).transpose().matmul(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::Block { a, r0, c0 } => {
                    let (ar, ac) = self.value(*a).shape();
                    let mut da = Mat::zeros(ar, ac);
                    da.set_block(*r0, *c0, &g);
                    acc(&mut grads, *a, da);
                }
                Op::PadInto { a, r0, c0 } => {
                    let (ar, ac) = self.value(*a).shape();
                    acc(&mut grads, *a, g.block(*r0, r0 + ar, *c0, c0 + ac));
                }
                Op::VStack(a, b) => {
                    let ra = self.value(*a).rows();
                    let rb = self.value(*b).rows();
                    acc(&mut grads, *a, g.block(0, ra, 0, g.cols()));
                    acc(&mut grads, *b, g.block(ra, ra + rb, 0, g.cols()));
                }
                Op::RepeatRows(a) => {
                    let mut da = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            da[(0, c)] += g[(r, c)];
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::Reshape(a) => {
                    let (ar, ac) = self.value(*a).shape();
                    acc(&mut grads, *a, Mat::from_vec(ar, ac, g.as_slice().to_vec()));
                }
                Op::Relu(a) => {
                    let da = zip_map(&g, self.value(*a), |gi, ai| if ai > 0.0 { gi } else { 0.0 });
                    acc(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    // Uses the stored output: d tanh = 1 - tanh^2.
                    let da = zip_map(&g, &self.nodes[id].val, |gi, ti| gi * (1.0 - ti * ti));
                    acc(&mut grads, *a, da);
                }
                Op::SumSq(a) => {
                    let s = 2.0 * g[(0, 0)];
                    acc(&mut grads, *a, self.value(*a).scale(s));
                }
                Op::FrobDot(a, b) => {
                    let s = g[(0, 0)];
                    let da = self.value(*b).scale(s);
                    let db = self.value(*a).scale(s);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Sqrt(a) => {
                    let da = zip_map(&g, &self.nodes[id].val, |gi, si| gi / (2.0 * si));
                    acc(&mut grads, *a, da);
                }
                Op::Ln(a) => {
                    let da = zip_map(&g, self.value(*a), |gi, ai| gi / ai);
                    acc(&mut grads, *a, da);
                }
                Op::Abs(a) => {
                    let da = zip_map(&g, self.value(*a), |gi, ai| {
                        if ai > 0.0 {
                            gi
                        } else if ai < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, da);
                }
            }
        }
        Gradients { grads }
    }
}

fn acc(grads: &mut [Option<Mat>], id: NodeId, delta: Mat) {
    match &mut grads[id.0] {
        Some(m) => *m = m.add(&delta).expect("gradient shapes"),
        slot @ None => *slot = Some(delta),
    }
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    assert_eq!(a.shape(), b.shape(), "zip shapes");
    let mut out = a.clone();
    for (x, y) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x = f(*x, *y);
    }
    out
}

/// Central-difference gradients of a scalar function of matrix inputs; the
/// oracle for [`Tape::backward`].
pub fn fd_gradients(f: &dyn Fn(&[Mat]) -> f64, inputs: &[Mat], h: f64) -> Vec<Mat> {
    let mut out = Vec::with_capacity(inputs.len());
    for (k, m) in inputs.iter().enumerate() {
        let mut g = Mat::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                let mut probe = inputs.to_vec();
                probe[k][(r, c)] = m[(r, c)] + h;
                let fp = f(&probe);
                probe[k][(r, c)] = m[(r, c)] - h;
                let fm = f(&probe);
                g[(r, c)] = (fp - fm) / (2.0 * h);
            }
        }
        out.push(g);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::boxed::Box;

    fn assert_close(got: &Mat, want: &Mat, label: &str) {
        assert_eq!(got.shape(), want.shape(), "{label}: shape");
        for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
            let tol = 1e-5 * w.abs() + 1e-7;
            assert!((g - w).abs() <= tol, "{label}: {g} vs {w}");
        }
    }

    /// Scalar model y_hat = w*x on the batch {(x=2, y=0)} with w=1:
    /// L = (wx - y)^2 has dL/dw = 2*(wx - y)*x = 8.
    #[test]
    fn scalar_regression_hand_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Mat::from_vec(1, 1, vec![1.0]));
        let x = t.leaf(Mat::from_vec(1, 1, vec![2.0]));
        let y = t.leaf(Mat::from_vec(1, 1, vec![0.0]));
        let pred = t.mul(w, x);
        let resid = t.sub(pred, y);
        let loss = t.sumsq(resid);
        assert_eq!(t.scalar(loss), 4.0);
        let g = t.backward(loss);
        assert_eq!(g.wrt(w).unwrap()[(0, 0)], 8.0);
    }

    #[test]
    fn zero_residual_gradients_vanish() {
        let mut t = Tape::new();
        let w = t.leaf(Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let x = t.leaf(Mat::from_rows(&[&[1.0], &[1.0]]));
        let pred = t.matmul(w, x);
        let target = t.leaf(Mat::from_rows(&[&[3.0], &[7.0]]));
        let resid = t.sub(pred, target);
        let loss = t.sumsq(resid);
        assert_eq!(t.scalar(loss), 0.0);
        let g = t.backward(loss);
        assert!(g.wrt(w).unwrap().frob_norm() == 0.0);
    }

    /// The same node used as both operands must receive both contributions:
    /// d/dA frob_dot(A, A) = 2A.
    #[test]
    fn repeated_operand_accumulates() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let s = t.frob_dot(a, a);
        let g = t.backward(s);
        assert_close(g.wrt(a).unwrap(), &t.value(a).scale(2.0), "frob_dot(a,a)");
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::eye(2));
        let b = t.leaf(Mat::eye(2));
        let s = t.sumsq(a);
        let g = t.backward(s);
        assert!(g.wrt(b).is_none());
        assert!(g.wrt_or_zero(b, 2, 2).frob_norm() == 0.0);
    }

    /// Every op, exercised in a small graph and checked against central
    /// finite differences on the same computation.
    #[test]
    fn per_op_gradients_match_finite_differences() {
        type Builder = Box<dyn Fn(&mut Tape, &[NodeId]) -> NodeId>;
        let m23 = Mat::from_rows(&[&[0.3, -1.2, 0.7], &[1.1, 0.4, -0.6]]);
        let m23b = Mat::from_rows(&[&[-0.8, 0.2, 1.4], &[0.9, -1.0, 0.25]]);
        let m32 = Mat::from_rows(&[&[0.5, -0.3], &[1.2, 0.8], &[-0.7, 0.1]]);
        let row = Mat::from_rows(&[&[0.4, -0.9, 1.3]]);
        let pos = Mat::from_rows(&[&[0.7, 1.9], &[0.2, 3.0]]);

        let cases: Vec<(&str, Vec<Mat>, Builder)> = vec![
            (
                "add",
                vec![m23.clone(), m23b.clone()],
                Box::new(|t, l| {
                    let s = t.add(l[0], l[1]);
                    t.sumsq(s)
                }),
            ),
            (
                "sub",
                vec![m23.clone(), m23b.clone()],
                Box::new(|t, l| {
                    let s = t.sub(l[0], l[1]);
                    t.sumsq(s)
                }),
            ),
            (
                "mul",
                vec![m23.clone(), m23b.clone()],
                Box::new(|t, l| {
                    let s = t.mul(l[0], l[1]);
                    t.sumsq(s)
                }),
            ),
            (
                "div",
                vec![m23.clone(), pos.clone()],
                Box::new(|t, l| {
                    let a = t.block(l[0], 0, 2, 0, 2);
                    let s = t.div(a, l[1]);
                    t.sumsq(s)
                }),
            ),
            (
                "matmul",
                vec![m23.clone(), m32.clone()],
                Box::new(|t, l| {
                    let s = t.matmul(l[0], l[1]);
                    t.sumsq(s)
                }),
            ),
            (
                "transpose",
                vec![m23.clone()],
                Box::new(|t, l| {
                    let s = t.transpose(l[0]);
                    let p = t.matmul(l[0], s);
                    t.sumsq(p)
                }),
            ),
            (
                "scale",
                vec![m23.clone()],
                Box::new(|t, l| {
                    let s = t.scale(l[0], -2.5);
                    t.sumsq(s)
                }),
            ),
            (
                "block_pad",
                vec![m23.clone()],
                Box::new(|t, l| {
                    let b = t.block(l[0], 0, 2, 1, 3);
                    let p = t.pad_into(b, 4, 4, 1, 2);
                    t.sumsq(p)
                }),
            ),
            (
                "vstack",
                vec![m23.clone(), m23b.clone()],
                Box::new(|t, l| {
                    let v = t.vstack(l[0], l[1]);
                    t.sumsq(v)
                }),
            ),
            (
                "repeat_rows",
                vec![row.clone()],
                Box::new(|t, l| {
                    let r = t.repeat_rows(l[0], 4);
                    t.sumsq(r)
                }),
            ),
            (
                "relu",
                vec![m23.clone()],
                Box::new(|t, l| {
                    let r = t.relu(l[0]);
                    t.sumsq(r)
                }),
            ),
            (
                "tanh",
                vec![m23.clone()],
                Box::new(|t, l| {
                    let r = t.tanh(l[0]);
                    t.sumsq(r)
                }),
            ),
            (
                "frob_dot",
                vec![m23.clone(), m23b.clone()],
                Box::new(|t, l| {
                    let d = t.frob_dot(l[0], l[1]);
                    t.mul(d, d)
                }),
            ),
            (
                "sqrt_ln",
                vec![pos.clone()],
                Box::new(|t, l| {
                    let s = t.sqrt(l[0]);
                    let n = t.ln(s);
                    t.sumsq(n)
                }),
            ),
            (
                "abs",
                vec![m23.clone()],
                Box::new(|t, l| {
                    let a = t.abs(l[0]);
                    t.sumsq(a)
                }),
            ),
            (
                "reshape",
                vec![m23.clone(), m23b.clone()],
                Box::new(|t, l| {
                    // 2x3 reshaped to 3x2 and used in a product, so the
                    // gradient must land back in row-major 2x3 layout.
                    let r = t.reshape(l[0], 3, 2);
                    let p = t.matmul(l[1], r);
                    t.sumsq(p)
                }),
            ),
        ];

        for (name, inputs, build) in &cases {
            let mut tape = Tape::new();
            let leaves: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
            let out = build(&mut tape, &leaves);
            let grads = tape.backward(out);
            let fd = fd_gradients(
                &|ms: &[Mat]| {
                    let mut t = Tape::new();
                    let ls: Vec<NodeId> = ms.iter().map(|m| t.leaf(m.clone())).collect();
                    let o = build(&mut t, &ls);
                    t.scalar(o)
                },
                inputs,
                1e-5,
            );
            for (k, leaf) in leaves.iter().enumerate() {
                let got = grads.wrt_or_zero(*leaf, inputs[k].rows(), inputs[k].cols());
                assert_close(&got, &fd[k], name);
            }
        }
    }

    /// A deeper composite resembling the real use: affine layer, relu,
    /// second affine, squared loss; gradients for weights and biases.
    #[test]
    fn mlp_composite_matches_finite_differences() {
        let x = Mat::from_rows(&[&[0.2, -0.7, 1.1], &[0.9, 0.3, -0.4]]);
        let w1 = Mat::from_rows(&[&[0.5, -0.2, 0.1], &[0.3, 0.8, -0.6], &[-0.4, 0.2, 0.9], &[
            0.7, -0.5, 0.3,
        ]]);
        let b1 = Mat::from_rows(&[&[0.1, -0.2, 0.05, 0.4]]);
        let w2 = Mat::from_rows(&[&[0.6, -0.3, 0.2, 0.5]]);
        let target = Mat::from_rows(&[&[0.3], &[-0.8]]);
        let inputs = vec![w1, b1, w2];

        let run = |t: &mut Tape, leaves: &[NodeId], x: &Mat, target: &Mat| -> NodeId {
            let xl = t.leaf(x.clone());
            let tl = t.leaf(target.clone());
            let w1t = t.transpose(leaves[0]);
            let pre = t.matmul(xl, w1t);
            let bias = t.repeat_rows(leaves[1], x.rows());
            let pre = t.add(pre, bias);
            let h = t.relu(pre);
            let w2t = t.transpose(leaves[2]);
            let pred = t.matmul(h, w2t);
            let resid = t.sub(pred, tl);
            t.sumsq(resid)
        };

        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = run(&mut tape, &leaves, &x, &target);
        let grads = tape.backward(out);
        let fd = fd_gradients(
            &|ms: &[Mat]| {
                let mut t = Tape::new();
                let ls: Vec<NodeId> = ms.iter().map(|m| t.leaf(m.clone())).collect();
                let o = run(&mut t, &ls, &x, &target);
                t.scalar(o)
            },
            &inputs,
            1e-5,
        );
        for (k, leaf) in leaves.iter().enumerate() {
            assert_close(grads.wrt(*leaf).unwrap(), &fd[k], "mlp composite");
        }
    }

    #[test]
    fn backward_counter_counts_only_backward() {
        let before = backward_passes();
        let mut t = Tape::new();
        let a = t.leaf(Mat::eye(3));
        let b = t.transpose(a);
        let _ = t.matmul(a, b);
        assert_eq!(backward_passes(), before, "forward ops must not count");
        let s = t.sumsq(a);
        let _ = t.backward(s);
        let _ = t.backward(s);
        assert_eq!(backward_passes(), before + 2);
    }

    #[test]
    #[should_panic(expected = "backward needs a scalar output")]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::eye(2));
        let _ = t.backward(a);
    }
}
