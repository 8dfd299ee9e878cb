//! Define-by-run reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a flat tape: every operation appends a node holding the
//! eagerly-computed value plus enough information to push gradients back to
//! its parents. `backward` walks the tape in reverse insertion order, which
//! is always a valid reverse topological order.
//!
//! The op set is deliberately small; model code composes these primitives.
//! Each backward rule is validated against central finite differences in the
//! tests below and again by the model-level gradient suite.

use crate::align;
use crate::tensor::{Mat, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Broadcast-add a 1×c row vector to every row of an n×c matrix.
    AddRow(usize, usize),
    /// Broadcast-multiply every row of an n×c matrix by a 1×c row vector.
    MulRow(usize, usize),
    /// Broadcast-add an n×1 column vector to every column of an n×c matrix.
    AddCol(usize, usize),
    /// `scale * x + shift`, scale and shift constant.
    Affine(usize, T, T),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    /// Per-row zero-mean unit-variance normalization with epsilon.
    NormalizeRows(usize, T),
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    SliceCols(usize, usize),
    Transpose(usize),
    GatherRows(usize, Vec<usize>),
    /// Repeat a 1×c row n times.
    RepeatRow(usize),
    SumAll(usize),
    MeanAll(usize),
    /// n×c → n×1 column of squared row norms.
    SumSqRows(usize),
    /// 1-D convolution over rows with zero padding (k−1)/2 and a stride.
    /// x: n×cin, w: (k·cin)×cout, b: 1×cout, output: ((n−1)/stride+1)×cout.
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        kernel: usize,
        stride: usize,
    },
    /// Negative log-sum over all monotonic alignment paths of a T×N matrix.
    ForwardSum(usize),
}

struct Node<T: Scalar> {
    val: Mat<T>,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients per node produced by [`Graph::backward`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Mat<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, zeros if it never received one.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Mat<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(shape.0, shape.1),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn val(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].val
    }

    fn push(&mut self, val: Mat<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { val, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a leaf node (parameter or constant).
    pub fn leaf(&mut self, val: Mat<T>) -> NodeId {
        self.push(val, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = self.val(a).matmul(self.val(b));
        self.push(val, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.val(a), self.val(b));
        assert_eq!(va.shape(), vb.shape(), "add shapes");
        let mut val = va.clone();
        val.add_assign(vb);
        self.push(val, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.val(a), self.val(b));
        assert_eq!(va.shape(), vb.shape(), "sub shapes");
        let val = Mat::from_fn(va.rows(), va.cols(), |i, j| va.get(i, j) - vb.get(i, j));
        self.push(val, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.val(a), self.val(b));
        assert_eq!(va.shape(), vb.shape(), "mul shapes");
        let val = Mat::from_fn(va.rows(), va.cols(), |i, j| va.get(i, j) * vb.get(i, j));
        self.push(val, Op::Mul(a.0, b.0))
    }

    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> NodeId {
        let (vm, vr) = (self.val(m), self.val(row));
        assert_eq!(vr.rows(), 1, "add_row expects a 1×c row");
        assert_eq!(vm.cols(), vr.cols(), "add_row widths");
        let val = Mat::from_fn(vm.rows(), vm.cols(), |i, j| vm.get(i, j) + vr.get(0, j));
        self.push(val, Op::AddRow(m.0, row.0))
    }

    pub fn mul_row(&mut self, m: NodeId, row: NodeId) -> NodeId {
        let (vm, vr) = (self.val(m), self.val(row));
        assert_eq!(vr.rows(), 1, "mul_row expects a 1×c row");
        assert_eq!(vm.cols(), vr.cols(), "mul_row widths");
        let val = Mat::from_fn(vm.rows(), vm.cols(), |i, j| vm.get(i, j) * vr.get(0, j));
        self.push(val, Op::MulRow(m.0, row.0))
    }

    pub fn add_col(&mut self, m: NodeId, col: NodeId) -> NodeId {
        let (vm, vc) = (self.val(m), self.val(col));
        assert_eq!(vc.cols(), 1, "add_col expects an n×1 column");
        assert_eq!(vm.rows(), vc.rows(), "add_col heights");
        let val = Mat::from_fn(vm.rows(), vm.cols(), |i, j| vm.get(i, j) + vc.get(i, 0));
        self.push(val, Op::AddCol(m.0, col.0))
    }

    pub fn affine(&mut self, a: NodeId, scale: T, shift: T) -> NodeId {
        let val = self.val(a).map(|v| scale * v + shift);
        self.push(val, Op::Affine(a.0, scale, shift))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        self.affine(a, s, T::zero())
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let val = self.val(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(val, Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let val = self.val(a).map(|v| v.tanh());
        self.push(val, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = T::one();
        let val = self.val(a).map(|v| one / (one + (-v).exp()));
        self.push(val, Op::Sigmoid(a.0))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.val(a);
        let mut val = va.clone();
        for i in 0..val.rows() {
            softmax_row(val.row_mut(i));
        }
        self.push(val, Op::SoftmaxRows(a.0))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.val(a);
        let mut val = va.clone();
        for i in 0..val.rows() {
            let row = val.row_mut(i);
            let mut mx = T::neg_infinity();
            for &v in row.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for &v in row.iter() {
                sum += (v - mx).exp();
            }
            let lse = mx + sum.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(val, Op::LogSoftmaxRows(a.0))
    }

    pub fn normalize_rows(&mut self, a: NodeId, eps: T) -> NodeId {
        let va = self.val(a);
        let n = T::from_f64(va.cols() as f64);
        let mut val = va.clone();
        for i in 0..val.rows() {
            let row = val.row_mut(i);
            let mut mean = T::zero();
            for &v in row.iter() {
                mean += v;
            }
            mean /= n;
            let mut var = T::zero();
            for &v in row.iter() {
                let d = v - mean;
                var += d * d;
            }
            var /= n;
            let inv = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push(val, Op::NormalizeRows(a.0, eps))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.val(a), self.val(b));
        assert_eq!(va.rows(), vb.rows(), "concat_cols heights");
        let (ca, cb) = (va.cols(), vb.cols());
        let val = Mat::from_fn(va.rows(), ca + cb, |i, j| {
            if j < ca {
                va.get(i, j)
            } else {
                vb.get(i, j - ca)
            }
        });
        self.push(val, Op::ConcatCols(a.0, b.0))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.val(a), self.val(b));
        assert_eq!(va.cols(), vb.cols(), "concat_rows widths");
        let ra = va.rows();
        let val = Mat::from_fn(ra + vb.rows(), va.cols(), |i, j| {
            if i < ra {
                va.get(i, j)
            } else {
                vb.get(i - ra, j)
            }
        });
        self.push(val, Op::ConcatRows(a.0, b.0))
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let va = self.val(a);
        assert!(from < to && to <= va.cols(), "slice_cols range");
        let val = Mat::from_fn(va.rows(), to - from, |i, j| va.get(i, from + j));
        self.push(val, Op::SliceCols(a.0, from))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let val = self.val(a).transpose();
        self.push(val, Op::Transpose(a.0))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let va = self.val(a);
        for &i in &idx {
            assert!(i < va.rows(), "gather index in range");
        }
        let val = Mat::from_fn(idx.len(), va.cols(), |i, j| va.get(idx[i], j));
        self.push(val, Op::GatherRows(a.0, idx))
    }

    pub fn repeat_row(&mut self, row: NodeId, n: usize) -> NodeId {
        let vr = self.val(row);
        assert_eq!(vr.rows(), 1, "repeat_row expects a 1×c row");
        let val = Mat::from_fn(n, vr.cols(), |_, j| vr.get(0, j));
        self.push(val, Op::RepeatRow(row.0))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let va = self.val(a);
        let mut s = T::zero();
        for &v in va.as_slice() {
            s += v;
        }
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.val(a);
        let mut s = T::zero();
        for &v in va.as_slice() {
            s += v;
        }
        s /= T::from_f64(va.len() as f64);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::MeanAll(a.0))
    }

    pub fn sumsq_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.val(a);
        let mut data = Vec::with_capacity(va.rows());
        for i in 0..va.rows() {
            let mut s = T::zero();
            for &v in va.row(i) {
                s += v * v;
            }
            data.push(s);
        }
        let rows = va.rows();
        self.push(Mat::from_vec(rows, 1, data), Op::SumSqRows(a.0))
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, kernel: usize, stride: usize) -> NodeId {
        assert!(kernel % 2 == 1, "kernel width must be odd");
        assert!(stride >= 1);
        let (vx, vw, vb) = (self.val(x), self.val(w), self.val(b));
        let cin = vx.cols();
        let cout = vw.cols();
        assert_eq!(vw.rows(), kernel * cin, "conv weight shape");
        assert_eq!(vb.shape(), (1, cout), "conv bias shape");
        let n = vx.rows();
        let pad = (kernel - 1) / 2;
        let out_rows = (n - 1) / stride + 1;
        let mut val = Mat::zeros(out_rows, cout);
        for oi in 0..out_rows {
            let orow = val.row_mut(oi);
            orow.copy_from_slice(vb.row(0));
            let center = oi * stride;
            for t in 0..kernel {
                let src = center + t;
                if src < pad || src - pad >= n {
                    continue;
                }
                let xrow = vx.row(src - pad);
                for (ci, &xv) in xrow.iter().enumerate() {
                    let wrow = vw.row(t * cin + ci);
                    for (o, &wv) in orow.iter_mut().zip(wrow.iter()) {
                        *o += xv * wv;
                    }
                }
            }
        }
        self.push(
            val,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                kernel,
                stride,
            },
        )
    }

    /// Forward-sum alignment loss over a T×N log-weight matrix (T ≥ N).
    pub fn forward_sum(&mut self, m: NodeId) -> NodeId {
        let vm = self.val(m);
        assert!(vm.rows() >= vm.cols() && vm.cols() >= 1, "forward_sum needs T >= N >= 1");
        let loss = align::forward_sum_neg_log(vm);
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::ForwardSum(m.0))
    }

    /// Reverse pass from a 1×1 loss node; returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Grads<T> {
        assert_eq!(self.val(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::filled(1, 1, T::one()));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    // keep leaf gradients readable after the pass
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(&self.nodes[*b].val);
                    let db = self.nodes[*a].val.matmul_tn(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    let mut neg = g;
                    neg.scale_assign(-T::one());
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].val, &self.nodes[*b].val);
                    let da = Mat::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * vb.get(i, j));
                    let db = Mat::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * va.get(i, j));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(m, r) => {
                    let mut dr = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let v = dr.get(0, j) + g.get(i, j);
                            dr.set(0, j, v);
                        }
                    }
                    accumulate(&mut grads, *m, g);
                    accumulate(&mut grads, *r, dr);
                }
                Op::MulRow(m, r) => {
                    let (vm, vr) = (&self.nodes[*m].val, &self.nodes[*r].val);
                    let dm = Mat::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * vr.get(0, j));
                    let mut dr = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let v = dr.get(0, j) + g.get(i, j) * vm.get(i, j);
                            dr.set(0, j, v);
                        }
                    }
                    accumulate(&mut grads, *m, dm);
                    accumulate(&mut grads, *r, dr);
                }
                Op::AddCol(m, c) => {
                    let mut dc = Mat::zeros(g.rows(), 1);
                    for i in 0..g.rows() {
                        let mut s = T::zero();
                        for j in 0..g.cols() {
                            s += g.get(i, j);
                        }
                        dc.set(i, 0, s);
                    }
                    accumulate(&mut grads, *m, g);
                    accumulate(&mut grads, *c, dc);
                }
                Op::Affine(a, s, _) => {
                    let mut da = g;
                    da.scale_assign(*s);
                    accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let va = &self.nodes[*a].val;
                    let da = Mat::from_fn(g.rows(), g.cols(), |i, j| {
                        if va.get(i, j) > T::zero() {
                            g.get(i, j)
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let y = &node.val;
                    let da = Mat::from_fn(g.rows(), g.cols(), |i, j| {
                        let t = y.get(i, j);
                        g.get(i, j) * (T::one() - t * t)
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &node.val;
                    let da = Mat::from_fn(g.rows(), g.cols(), |i, j| {
                        let s = y.get(i, j);
                        g.get(i, j) * s * (T::one() - s)
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.val;
                    let mut da = Mat::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let mut dot = T::zero();
                        for j in 0..g.cols() {
                            dot += g.get(i, j) * y.get(i, j);
                        }
                        for j in 0..g.cols() {
                            da.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.val;
                    let mut da = Mat::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let mut gsum = T::zero();
                        for j in 0..g.cols() {
                            gsum += g.get(i, j);
                        }
                        for j in 0..g.cols() {
                            da.set(i, j, g.get(i, j) - y.get(i, j).exp() * gsum);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::NormalizeRows(a, eps) => {
                    let va = &self.nodes[*a].val;
                    let y = &node.val;
                    let n = T::from_f64(va.cols() as f64);
                    let mut da = Mat::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let mut mean = T::zero();
                        let mut var = T::zero();
                        for &v in va.row(i) {
                            mean += v;
                        }
                        mean /= n;
                        for &v in va.row(i) {
                            let d = v - mean;
                            var += d * d;
                        }
                        var /= n;
                        let inv = T::one() / (var + *eps).sqrt();
                        let mut gmean = T::zero();
                        let mut gy = T::zero();
                        for j in 0..g.cols() {
                            gmean += g.get(i, j);
                            gy += g.get(i, j) * y.get(i, j);
                        }
                        gmean /= n;
                        gy /= n;
                        for j in 0..g.cols() {
                            let v = inv * (g.get(i, j) - gmean - y.get(i, j) * gy);
                            da.set(i, j, v);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].val.cols();
                    let da = Mat::from_fn(g.rows(), ca, |i, j| g.get(i, j));
                    let db = Mat::from_fn(g.rows(), g.cols() - ca, |i, j| g.get(i, ca + j));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[*a].val.rows();
                    let da = Mat::from_fn(ra, g.cols(), |i, j| g.get(i, j));
                    let db = Mat::from_fn(g.rows() - ra, g.cols(), |i, j| g.get(ra + i, j));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::SliceCols(a, from) => {
                    let va = &self.nodes[*a].val;
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            da.set(i, from + j, g.get(i, j));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose());
                }
                Op::GatherRows(a, idx) => {
                    let va = &self.nodes[*a].val;
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    for (i, &src) in idx.iter().enumerate() {
                        for j in 0..g.cols() {
                            let v = da.get(src, j) + g.get(i, j);
                            da.set(src, j, v);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RepeatRow(r) => {
                    let mut dr = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let v = dr.get(0, j) + g.get(i, j);
                            dr.set(0, j, v);
                        }
                    }
                    accumulate(&mut grads, *r, dr);
                }
                Op::SumAll(a) => {
                    let va = &self.nodes[*a].val;
                    let s = g.get(0, 0);
                    accumulate(&mut grads, *a, Mat::filled(va.rows(), va.cols(), s));
                }
                Op::MeanAll(a) => {
                    let va = &self.nodes[*a].val;
                    let s = g.get(0, 0) / T::from_f64(va.len() as f64);
                    accumulate(&mut grads, *a, Mat::filled(va.rows(), va.cols(), s));
                }
                Op::SumSqRows(a) => {
                    let va = &self.nodes[*a].val;
                    let two = T::from_f64(2.0);
                    let da = Mat::from_fn(va.rows(), va.cols(), |i, j| {
                        two * va.get(i, j) * g.get(i, 0)
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    kernel,
                    stride,
                } => {
                    let (vx, vw) = (&self.nodes[*x].val, &self.nodes[*w].val);
                    let cin = vx.cols();
                    let n = vx.rows();
                    let pad = (*kernel - 1) / 2;
                    let mut dx = Mat::zeros(vx.rows(), vx.cols());
                    let mut dw = Mat::zeros(vw.rows(), vw.cols());
                    let mut db = Mat::zeros(1, vw.cols());
                    for oi in 0..g.rows() {
                        let grow = g.row(oi);
                        for (j, &gv) in grow.iter().enumerate() {
                            let v = db.get(0, j) + gv;
                            db.set(0, j, v);
                        }
                        let center = oi * stride;
                        for t in 0..*kernel {
                            let src = center + t;
                            if src < pad || src - pad >= n {
                                continue;
                            }
                            let xi = src - pad;
                            for ci in 0..cin {
                                let xv = vx.get(xi, ci);
                                let wrow = vw.row(t * cin + ci);
                                let mut dxv = T::zero();
                                for (j, &gv) in grow.iter().enumerate() {
                                    dxv += gv * wrow[j];
                                    let v = dw.get(t * cin + ci, j) + gv * xv;
                                    dw.set(t * cin + ci, j, v);
                                }
                                let v = dx.get(xi, ci) + dxv;
                                dx.set(xi, ci, v);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::ForwardSum(m) => {
                    let vm = &self.nodes[*m].val;
                    let mut dm = align::forward_sum_posterior(vm);
                    dm.scale_assign(-g.get(0, 0));
                    accumulate(&mut grads, *m, dm);
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Mat<T>>], id: usize, g: Mat<T>) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut mx = T::neg_infinity();
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randmat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central finite-difference check of `d loss / d input` for one input
    /// leaf of an arbitrary graph builder.
    fn fd_check(
        build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId,
        input: &Mat<f64>,
        rtol: f64,
    ) {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("input should receive a gradient");

        let h = 1e-6;
        for i in 0..input.rows() {
            for j in 0..input.cols() {
                let eval = |v: f64| {
                    let mut m = input.clone();
                    m.set(i, j, v);
                    let mut g2 = Graph::new();
                    let x2 = g2.leaf(m);
                    let l2 = build(&mut g2, x2);
                    g2.val(l2).get(0, 0)
                };
                let base = input.get(i, j);
                let fd = (eval(base + h) - eval(base - h)) / (2.0 * h);
                let an = analytic.get(i, j);
                let tol = rtol * an.abs().max(fd.abs()).max(1.0);
                assert!(
                    (an - fd).abs() <= tol,
                    "grad mismatch at ({i},{j}): analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn fd_matmul_and_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = randmat(&mut rng, 4, 3);
        let x = randmat(&mut rng, 2, 4);
        fd_check(
            move |g, xn| {
                let wn = g.leaf(w.clone());
                let y = g.matmul(xn, wn);
                let y2 = g.mul(y, y);
                g.sum_all(y2)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn fd_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randmat(&mut rng, 3, 5);
        fd_check(
            |g, xn| {
                let a = g.relu(xn);
                let b = g.tanh(a);
                let c = g.sigmoid(b);
                g.mean_all(c)
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn fd_softmax_and_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randmat(&mut rng, 4, 6);
        let probe = randmat(&mut rng, 4, 6);
        let p1 = probe.clone();
        fd_check(
            move |g, xn| {
                let s = g.softmax_rows(xn);
                let pn = g.leaf(p1.clone());
                let y = g.mul(s, pn);
                g.sum_all(y)
            },
            &x,
            1e-5,
        );
        let p2 = probe.clone();
        fd_check(
            move |g, xn| {
                let s = g.log_softmax_rows(xn);
                let pn = g.leaf(p2.clone());
                let y = g.mul(s, pn);
                g.sum_all(y)
            },
            &x,
            1e-5,
        );
        let p3 = probe;
        fd_check(
            move |g, xn| {
                let s = g.normalize_rows(xn, 1e-5);
                let pn = g.leaf(p3.clone());
                let y = g.mul(s, pn);
                g.sum_all(y)
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn fd_broadcast_and_shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = randmat(&mut rng, 3, 4);
        let row = randmat(&mut rng, 1, 4);
        let col = randmat(&mut rng, 3, 1);
        // gradient w.r.t. the broadcast row through several ops
        let m0 = m.clone();
        let c0 = col.clone();
        fd_check(
            move |g, rn| {
                let mn = g.leaf(m0.clone());
                let cn = g.leaf(c0.clone());
                let a = g.add_row(mn, rn);
                let b = g.mul_row(a, rn);
                let c = g.add_col(b, cn);
                let t = g.transpose(c);
                let s = g.slice_cols(t, 1, 3);
                g.mean_all(s)
            },
            &row,
            1e-5,
        );
        // gradient w.r.t. a gathered/repeated source
        fd_check(
            |g, xn| {
                let gathered = g.gather_rows(xn, vec![0, 2, 2, 1]);
                let sq = g.sumsq_rows(gathered);
                g.sum_all(sq)
            },
            &m,
            1e-5,
        );
        fd_check(
            |g, rn| {
                let rep = g.repeat_row(rn, 5);
                let sq = g.mul(rep, rep);
                g.mean_all(sq)
            },
            &row,
            1e-5,
        );
        let m1 = m.clone();
        fd_check(
            move |g, xn| {
                let mn = g.leaf(m1.clone());
                let cat = g.concat_cols(xn, mn);
                let catr = g.concat_rows(cat, cat);
                let y = g.mul(catr, catr);
                g.sum_all(y)
            },
            &m,
            1e-5,
        );
    }

    #[test]
    fn fd_conv1d_stride_one_and_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for stride in [1usize, 2] {
            let x = randmat(&mut rng, 7, 3);
            let w = randmat(&mut rng, 9, 4); // kernel 3, cin 3, cout 4
            let b = randmat(&mut rng, 1, 4);
            let (w1, b1) = (w.clone(), b.clone());
            fd_check(
                move |g, xn| {
                    let wn = g.leaf(w1.clone());
                    let bn = g.leaf(b1.clone());
                    let y = g.conv1d(xn, wn, bn, 3, stride);
                    let y2 = g.mul(y, y);
                    g.sum_all(y2)
                },
                &x,
                1e-5,
            );
            // also check the weight and bias gradients
            let x1 = x.clone();
            fd_check(
                move |g, wn| {
                    let xn = g.leaf(x1.clone());
                    let bn = g.leaf(b.clone());
                    let y = g.conv1d(xn, wn, bn, 3, stride);
                    let y2 = g.mul(y, y);
                    g.sum_all(y2)
                },
                &w,
                1e-5,
            );
        }
    }

    #[test]
    fn conv1d_matches_direct_computation() {
        // single channel, kernel 3, identity-style weights picked by hand
        let x = Mat::from_vec(4, 1, vec![1.0f64, 2.0, 3.0, 4.0]);
        let w = Mat::from_vec(3, 1, vec![0.5, 1.0, -1.0]); // taps at t-1, t, t+1
        let b = Mat::from_vec(1, 1, vec![0.25]);
        let mut g = Graph::new();
        let xn = g.leaf(x);
        let wn = g.leaf(w);
        let bn = g.leaf(b);
        let y = g.conv1d(xn, wn, bn, 3, 1);
        let got = g.val(y);
        // out[t] = 0.25 + 0.5*x[t-1] + 1.0*x[t] - 1.0*x[t+1]
        let expect = [
            0.25 + 0.0 + 1.0 - 2.0,
            0.25 + 0.5 + 2.0 - 3.0,
            0.25 + 1.0 + 3.0 - 4.0,
            0.25 + 1.5 + 4.0 - 0.0,
        ];
        for (i, e) in expect.iter().enumerate() {
            assert!((got.get(i, 0) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_strided_output_length() {
        let mut g = Graph::<f64>::new();
        for (n, stride, want) in [(5, 2, 3), (1, 2, 1), (6, 2, 3), (4, 1, 4)] {
            let xn = g.leaf(Mat::zeros(n, 2));
            let wn = g.leaf(Mat::zeros(6, 3));
            let bn = g.leaf(Mat::zeros(1, 3));
            let y = g.conv1d(xn, wn, bn, 3, stride);
            assert_eq!(g.val(y).rows(), want);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randmat(&mut rng, 5, 7);
        let mut g = Graph::new();
        let xn = g.leaf(x);
        let s = g.softmax_rows(xn);
        for i in 0..5 {
            let sum: f64 = g.val(s).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_leaf_accumulates_gradient() {
        // y = x + x  =>  dy/dx = 2
        let mut g = Graph::new();
        let x = g.leaf(Mat::from_vec(1, 1, vec![3.0f64]));
        let y = g.add(x, x);
        let l = g.sum_all(y);
        let grads = g.backward(l);
        assert_eq!(grads.get(x).unwrap().get(0, 0), 2.0);
    }
}
