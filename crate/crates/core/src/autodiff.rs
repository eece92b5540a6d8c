//! Reverse-mode differentiation over a flat tape of f64 tensors.
//!
//! Forward passes that need gradients are expressed as ops on a [`Tape`];
//! `backward` then walks the tape once in reverse, accumulating exact
//! vector-Jacobian products. The op set is the minimal vocabulary the model
//! requires, with a few fused ops where the generic composition would be
//! wasteful or numerically delicate:
//!
//! * [`Tape::soft_and`] / [`Tape::soft_or`] fuse the product-form relaxations
//!   of the logic switchboards, with zero-aware product gradients.
//! * [`Tape::graft`] substitutes an externally computed forward value while
//!   routing the backward pass into the soft stream it replaces. Both the
//!   straight-through concept estimator and discrete-to-continuous gradient
//!   grafting are instances of this one op.
//! * [`Tape::bce_mean`] and [`Tape::ce_rows_mean`] keep the loss math in one
//!   place so the clamping and log-sum-exp details cannot drift between the
//!   trainer and the gradient checker.
//!
//! Invariant: ops never mutate parent values, so a tape may be evaluated once
//! and differentiated once. Leaves can share storage via `Arc` to keep
//! per-sample tapes from cloning model parameters.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};
use std::sync::Arc;

pub type NodeId = usize;

/// Clamp applied inside [`Tape::bce_mean`] before taking logs.
pub const BCE_EPS: f64 = 1e-7;

enum Value {
    Owned(ArrayD<f64>),
    Shared(Arc<ArrayD<f64>>),
}

impl Value {
    fn get(&self) -> &ArrayD<f64> {
        match self {
            Value::Owned(a) => a,
            Value::Shared(a) => a,
        }
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// 2-D matrix product.
    MatMul(NodeId, NodeId),
    /// (M x N) matrix times length-N vector.
    MatVec(NodeId, NodeId),
    Transpose(NodeId),
    /// Broadcast row addition: (M x N) + (N,).
    AddRow(NodeId, NodeId),
    MeanAxis(NodeId, usize),
    SumAll(NodeId),
    Reshape(NodeId),
    ConcatVec(Vec<NodeId>),
    SliceVec(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    RowSoftmax(NodeId),
    RowNormalize { x: NodeId, eps: f64 },
    Sigmoid(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    /// Tensor scaled by a 0-d node.
    ScaleByNode(NodeId, NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    /// Per-group projections: q (G x D) against w (G x D x g) -> flat (G*g,).
    BlockDot {
        q: NodeId,
        w: NodeId,
    },
    /// Soft conjunction: out_i = prod_j (1 - w_ij * (1 - x_j)).
    SoftAnd {
        w: NodeId,
        x: NodeId,
    },
    /// Soft disjunction: out_i = 1 - prod_j (1 - w_ij * x_j).
    SoftOr {
        w: NodeId,
        x: NodeId,
    },
    /// Forward takes the node's stored (externally supplied) value; backward
    /// passes the upstream gradient to `soft` unchanged.
    Graft {
        soft: NodeId,
    },
    /// Inverted dropout with a fixed 0/1 mask.
    Dropout {
        x: NodeId,
        mask: ArrayD<f64>,
        keep: f64,
    },
    /// Mean binary cross-entropy against a constant target, inputs clamped to
    /// [BCE_EPS, 1 - BCE_EPS].
    BceMean {
        pred: NodeId,
        target: ArrayD<f64>,
    },
    /// Mean over rows of (logsumexp(row) - row[label]).
    CeRowsMean {
        scores: NodeId,
        labels: Vec<usize>,
    },
    /// (T x V x D) pooled over frames and each part's joint set -> (P x D).
    PartPool {
        x: NodeId,
        parts: Vec<Vec<usize>>,
    },
    /// Mean over ordered pairs p != q of relu(cos(f_p, f_q)); zero-norm rows
    /// contribute cosine 0.
    ReluCosPairsMean {
        f: NodeId,
    },
}

struct Node {
    value: Value,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.by_node[id].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<f64>> {
        self.by_node[id].take()
    }
}

fn same_shape(a: &ArrayD<f64>, b: &ArrayD<f64>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: operand shapes differ");
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

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        self.nodes[id].value.get()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_shared(&mut self, value: Arc<ArrayD<f64>>) -> NodeId {
        self.nodes.push(Node {
            value: Value::Shared(value),
            op: Op::Leaf,
        });
        self.nodes.len() - 1
    }

    pub fn leaf_scalar(&mut self, value: f64) -> NodeId {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn leaf_vec(&mut self, value: Vec<f64>) -> NodeId {
        self.leaf(Array1::from_vec(value).into_dyn())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        same_shape(self.value(a), self.value(b), "add");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        same_shape(self.value(a), self.value(b), "sub");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        same_shape(self.value(a), self.value(b), "mul");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a))
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    fn as2(&self, id: NodeId) -> ndarray::ArrayView2<'_, f64> {
        self.value(id)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected 2-d value")
    }

    fn as1(&self, id: NodeId) -> ndarray::ArrayView1<'_, f64> {
        self.value(id)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("expected 1-d value")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.as2(a).dot(&self.as2(b)).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matvec(&mut self, m: NodeId, x: NodeId) -> NodeId {
        let v = self.as2(m).dot(&self.as1(x)).into_dyn();
        self.push(v, Op::MatVec(m, x))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.as2(a).t().to_owned().into_dyn();
        self.push(v, Op::Transpose(a))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let m = self.as2(a);
        let r = self.as1(row);
        assert_eq!(m.ncols(), r.len(), "add_row: width mismatch");
        let v = (&m + &r).into_dyn();
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let v = self
            .value(a)
            .mean_axis(Axis(axis))
            .expect("mean over empty axis");
        self.push(v, Op::MeanAxis(a, axis))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    pub fn concat_vec(&mut self, parts: &[NodeId]) -> NodeId {
        let mut out = Vec::new();
        for &p in parts {
            out.extend(self.as1(p).iter().copied());
        }
        let v = Array1::from_vec(out).into_dyn();
        self.push(v, Op::ConcatVec(parts.to_vec()))
    }

    pub fn slice_vec(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self
            .as1(a)
            .slice(ndarray::s![start..start + len])
            .to_owned()
            .into_dyn();
        self.push(v, Op::SliceVec(a, start, len))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self
            .as2(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned()
            .into_dyn();
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.as2(p)).collect();
        let v = ndarray::concatenate(Axis(1), &views)
            .expect("concat_cols: row count mismatch")
            .into_dyn();
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let m = self.as2(a);
        let mut v = m.to_owned();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(v.into_dyn(), Op::RowSoftmax(a))
    }

    /// Rows scaled to unit length: y_i = x_i / sqrt(|x_i|^2 + eps).
    pub fn row_normalize(&mut self, x: NodeId, eps: f64) -> NodeId {
        let m = self.as2(x);
        let mut v = m.to_owned();
        for mut row in v.rows_mut() {
            let n = (row.iter().map(|&a| a * a).sum::<f64>() + eps).sqrt();
            row.mapv_inplace(|a| a / n);
        }
        self.push(v.into_dyn(), Op::RowNormalize { x, eps })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn scale_by_node(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert!(self.value(s).ndim() == 0, "scale_by_node: scalar expected");
        let k = self.value(s)[IxDyn(&[])];
        let v = self.value(a) * k;
        self.push(v, Op::ScaleByNode(a, s))
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xm = self.as2(x);
        let g = self.as1(gamma);
        let b = self.as1(beta);
        assert_eq!(xm.ncols(), g.len(), "layer_norm_rows: gamma width");
        assert_eq!(xm.ncols(), b.len(), "layer_norm_rows: beta width");
        let mut v = xm.to_owned();
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mu = row.sum() / n;
            let var = row.fold(0.0, |acc, &x| acc + (x - mu) * (x - mu)) / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, e) in row.iter_mut().enumerate() {
                *e = g[j] * ((*e - mu) * inv) + b[j];
            }
        }
        self.push(v.into_dyn(), Op::LayerNormRows { x, gamma, beta, eps })
    }

    pub fn block_dot(&mut self, q: NodeId, w: NodeId) -> NodeId {
        let qm = self.as2(q);
        let wm = self
            .value(w)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("block_dot: 3-d weight expected");
        let (groups, dim, per) = (wm.shape()[0], wm.shape()[1], wm.shape()[2]);
        assert_eq!(qm.nrows(), groups, "block_dot: group count");
        assert_eq!(qm.ncols(), dim, "block_dot: feature dim");
        let mut out = Array1::zeros(groups * per);
        for gidx in 0..groups {
            for p in 0..per {
                let mut acc = 0.0;
                for d in 0..dim {
                    acc += qm[[gidx, d]] * wm[[gidx, d, p]];
                }
                out[gidx * per + p] = acc;
            }
        }
        self.push(out.into_dyn(), Op::BlockDot { q, w })
    }

    pub fn soft_and(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let wm = self.as2(w);
        let xv = self.as1(x);
        assert_eq!(wm.ncols(), xv.len(), "soft_and: input width");
        let mut out = Array1::ones(wm.nrows());
        for (i, row) in wm.rows().into_iter().enumerate() {
            let mut p = 1.0;
            for (j, &wij) in row.iter().enumerate() {
                p *= 1.0 - wij * (1.0 - xv[j]);
            }
            out[i] = p;
        }
        self.push(out.into_dyn(), Op::SoftAnd { w, x })
    }

    pub fn soft_or(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let wm = self.as2(w);
        let xv = self.as1(x);
        assert_eq!(wm.ncols(), xv.len(), "soft_or: input width");
        let mut out = Array1::zeros(wm.nrows());
        for (i, row) in wm.rows().into_iter().enumerate() {
            let mut p = 1.0;
            for (j, &wij) in row.iter().enumerate() {
                p *= 1.0 - wij * xv[j];
            }
            out[i] = 1.0 - p;
        }
        self.push(out.into_dyn(), Op::SoftOr { w, x })
    }

    pub fn graft(&mut self, soft: NodeId, hard: ArrayD<f64>) -> NodeId {
        same_shape(self.value(soft), &hard, "graft");
        self.push(hard, Op::Graft { soft })
    }

    pub fn dropout(&mut self, x: NodeId, mask: ArrayD<f64>, keep: f64) -> NodeId {
        same_shape(self.value(x), &mask, "dropout");
        assert!(keep > 0.0 && keep <= 1.0, "dropout: keep out of range");
        let v = self.value(x) * &mask / keep;
        self.push(v, Op::Dropout { x, mask, keep })
    }

    pub fn bce_mean(&mut self, pred: NodeId, target: ArrayD<f64>) -> NodeId {
        same_shape(self.value(pred), &target, "bce_mean");
        let n = target.len() as f64;
        let mut acc = 0.0;
        for (&p, &t) in self.value(pred).iter().zip(target.iter()) {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        let v = ArrayD::from_elem(IxDyn(&[]), acc / n);
        self.push(v, Op::BceMean { pred, target })
    }

    pub fn ce_rows_mean(&mut self, scores: NodeId, labels: Vec<usize>) -> NodeId {
        let s = self.as2(scores);
        assert_eq!(s.nrows(), labels.len(), "ce_rows_mean: label count");
        let mut acc = 0.0;
        for (row, &y) in s.rows().into_iter().zip(labels.iter()) {
            assert!(y < row.len(), "ce_rows_mean: label out of range");
            let max = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            acc += lse - row[y];
        }
        let v = ArrayD::from_elem(IxDyn(&[]), acc / labels.len() as f64);
        self.push(v, Op::CeRowsMean { scores, labels })
    }

    pub fn part_pool(&mut self, x: NodeId, parts: Vec<Vec<usize>>) -> NodeId {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("part_pool: 3-d input expected");
        let (t, v, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Array2::zeros((parts.len(), d));
        for (p, joints) in parts.iter().enumerate() {
            assert!(!joints.is_empty(), "part_pool: empty part");
            for &j in joints {
                assert!(j < v, "part_pool: joint index out of range");
                for ti in 0..t {
                    for di in 0..d {
                        out[[p, di]] += xv[[ti, j, di]];
                    }
                }
            }
            let denom = (t * joints.len()) as f64;
            for di in 0..d {
                out[[p, di]] /= denom;
            }
        }
        self.push(out.into_dyn(), Op::PartPool { x, parts })
    }

    pub fn relu_cos_pairs_mean(&mut self, f: NodeId) -> NodeId {
        let fm = self.as2(f);
        let p = fm.nrows();
        let mut acc = 0.0;
        if p > 1 {
            for a in 0..p {
                for b in 0..p {
                    if a != b {
                        acc += cos_rows(&fm, a, b).max(0.0);
                    }
                }
            }
            acc /= (p * (p - 1)) as f64;
        }
        let v = ArrayD::from_elem(IxDyn(&[]), acc);
        self.push(v, Op::ReluCosPairsMean { f })
    }

    /// Backward pass from a scalar node, seeded with 1.
    pub fn backward(&mut self, root: NodeId) -> Gradients {
        assert!(
            self.value(root).ndim() == 0,
            "backward: root must be a scalar"
        );
        let seed = ArrayD::from_elem(IxDyn(&[]), 1.0);
        self.backward_seeded(root, &seed)
    }

    /// Backward pass seeded with an arbitrary upstream gradient at `node`.
    pub fn backward_seeded(&mut self, node: NodeId, seed: &ArrayD<f64>) -> Gradients {
        same_shape(self.value(node), seed, "backward_seeded");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[node] = Some(seed.clone());
        for id in (0..=node).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { by_node: grads }
    }

    fn accumulate_parents(&self, id: NodeId, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let acc = |grads: &mut [Option<ArrayD<f64>>], pid: NodeId, delta: ArrayD<f64>| {
            match &mut grads[pid] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * self.value(*b));
                acc(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, k) => acc(grads, *a, g * *k),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                acc(grads, *a, g2.dot(&self.as2(*b).t()).into_dyn());
                acc(grads, *b, self.as2(*a).t().dot(&g2).into_dyn());
            }
            Op::MatVec(m, x) => {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let xv = self.as1(*x);
                let mm = self.as2(*m);
                let mut dm = Array2::zeros((mm.nrows(), mm.ncols()));
                for i in 0..mm.nrows() {
                    for j in 0..mm.ncols() {
                        dm[[i, j]] = gv[i] * xv[j];
                    }
                }
                acc(grads, *m, dm.into_dyn());
                acc(grads, *x, mm.t().dot(&gv).into_dyn());
            }
            Op::Transpose(a) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                acc(grads, *a, g2.t().to_owned().into_dyn());
            }
            Op::AddRow(a, row) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                acc(grads, *a, g.clone());
                acc(grads, *row, g2.sum_axis(Axis(0)).into_dyn());
            }
            Op::MeanAxis(a, axis) => {
                let shape = self.value(*a).shape().to_vec();
                let n = shape[*axis] as f64;
                let mut da = ArrayD::zeros(IxDyn(&shape));
                for mut lane in da.axis_iter_mut(Axis(*axis)) {
                    lane += &(g / n);
                }
                acc(grads, *a, da);
            }
            Op::SumAll(a) => {
                let gs = g[IxDyn(&[])];
                acc(grads, *a, ArrayD::from_elem(self.value(*a).raw_dim(), gs));
            }
            Op::Reshape(a) => {
                let da = g
                    .clone()
                    .into_shape_with_order(self.value(*a).raw_dim())
                    .unwrap();
                acc(grads, *a, da);
            }
            Op::ConcatVec(parts) => {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(
                        grads,
                        p,
                        gv.slice(ndarray::s![off..off + len]).to_owned().into_dyn(),
                    );
                    off += len;
                }
            }
            Op::SliceVec(a, start, len) => {
                let mut da = Array1::zeros(self.value(*a).len());
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                da.slice_mut(ndarray::s![*start..start + len]).assign(&gv);
                acc(grads, *a, da.into_dyn());
            }
            Op::SliceCols(a, start, len) => {
                let src = self.as2(*a);
                let mut da = Array2::zeros((src.nrows(), src.ncols()));
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                da.slice_mut(ndarray::s![.., *start..start + len]).assign(&g2);
                acc(grads, *a, da.into_dyn());
            }
            Op::ConcatCols(parts) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = self.as2(p).ncols();
                    acc(
                        grads,
                        p,
                        g2.slice(ndarray::s![.., off..off + w]).to_owned().into_dyn(),
                    );
                    off += w;
                }
            }
            Op::RowSoftmax(a) => {
                let y = self.as2(id);
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut da = Array2::zeros((y.nrows(), y.ncols()));
                for i in 0..y.nrows() {
                    let dot: f64 = y.row(i).iter().zip(g2.row(i).iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..y.ncols() {
                        da[[i, j]] = y[[i, j]] * (g2[[i, j]] - dot);
                    }
                }
                acc(grads, *a, da.into_dyn());
            }
            Op::RowNormalize { x, eps } => {
                let xm = self.as2(*x);
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut da = Array2::zeros((xm.nrows(), xm.ncols()));
                for i in 0..xm.nrows() {
                    let s: f64 = xm.row(i).iter().map(|&a| a * a).sum::<f64>() + eps;
                    let n = s.sqrt();
                    let dot: f64 =
                        xm.row(i).iter().zip(g2.row(i).iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..xm.ncols() {
                        da[[i, j]] = g2[[i, j]] / n - xm[[i, j]] * dot / (s * n);
                    }
                }
                acc(grads, *x, da.into_dyn());
            }
            Op::Sigmoid(a) => {
                let y = self.value(id);
                acc(grads, *a, g * &(y * &(1.0 - y)));
            }
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(grads, *a, g * &mask);
            }
            Op::Exp(a) => {
                acc(grads, *a, g * self.value(id));
            }
            Op::ScaleByNode(a, s) => {
                let k = self.value(*s)[IxDyn(&[])];
                acc(grads, *a, g * k);
                let ds = (g * self.value(*a)).sum();
                acc(grads, *s, ArrayD::from_elem(IxDyn(&[]), ds));
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let xm = self.as2(*x);
                let gam = self.as1(*gamma);
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let (rows, cols) = (xm.nrows(), xm.ncols());
                let mut dx = Array2::zeros((rows, cols));
                let mut dgamma = Array1::zeros(cols);
                let mut dbeta = Array1::zeros(cols);
                for i in 0..rows {
                    let row = xm.row(i);
                    let n = cols as f64;
                    let mu = row.sum() / n;
                    let var = row.fold(0.0, |a, &v| a + (v - mu) * (v - mu)) / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) * inv).collect();
                    let dy = g2.row(i);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..cols {
                        let dxh = dy[j] * gam[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[j];
                        dgamma[j] += dy[j] * xhat[j];
                        dbeta[j] += dy[j];
                    }
                    mean_dxhat /= n;
                    mean_dxhat_xhat /= n;
                    for j in 0..cols {
                        let dxh = dy[j] * gam[j];
                        dx[[i, j]] = inv * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                acc(grads, *x, dx.into_dyn());
                acc(grads, *gamma, dgamma.into_dyn());
                acc(grads, *beta, dbeta.into_dyn());
            }
            Op::BlockDot { q, w } => {
                let qm = self.as2(*q);
                let wm = self.value(*w).view().into_dimensionality::<Ix3>().unwrap();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let (groups, dim, per) = (wm.shape()[0], wm.shape()[1], wm.shape()[2]);
                let mut dq = Array2::zeros((groups, dim));
                let mut dw = ndarray::Array3::zeros((groups, dim, per));
                for gidx in 0..groups {
                    for p in 0..per {
                        let go = gv[gidx * per + p];
                        if go == 0.0 {
                            continue;
                        }
                        for d in 0..dim {
                            dq[[gidx, d]] += go * wm[[gidx, d, p]];
                            dw[[gidx, d, p]] += go * qm[[gidx, d]];
                        }
                    }
                }
                acc(grads, *q, dq.into_dyn());
                acc(grads, *w, dw.into_dyn());
            }
            Op::SoftAnd { w, x } => {
                let wm = self.as2(*w);
                let xv = self.as1(*x);
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dw = Array2::zeros((wm.nrows(), wm.ncols()));
                let mut dx = Array1::zeros(xv.len());
                for i in 0..wm.nrows() {
                    product_row_backward(
                        gv[i],
                        wm.row(i).iter().enumerate().map(|(j, &wij)| {
                            // term and its partials wrt (w_ij, x_j)
                            (1.0 - wij * (1.0 - xv[j]), -(1.0 - xv[j]), wij)
                        }),
                        |j, dterm_w, dterm_x| {
                            dw[[i, j]] += dterm_w;
                            dx[j] += dterm_x;
                        },
                    );
                }
                acc(grads, *w, dw.into_dyn());
                acc(grads, *x, dx.into_dyn());
            }
            Op::SoftOr { w, x } => {
                let wm = self.as2(*w);
                let xv = self.as1(*x);
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dw = Array2::zeros((wm.nrows(), wm.ncols()));
                let mut dx = Array1::zeros(xv.len());
                for i in 0..wm.nrows() {
                    // out = 1 - prod, so the product receives -g.
                    product_row_backward(
                        -gv[i],
                        wm.row(i).iter().enumerate().map(|(j, &wij)| {
                            (1.0 - wij * xv[j], -xv[j], -wij)
                        }),
                        |j, dterm_w, dterm_x| {
                            dw[[i, j]] += dterm_w;
                            dx[j] += dterm_x;
                        },
                    );
                }
                acc(grads, *w, dw.into_dyn());
                acc(grads, *x, dx.into_dyn());
            }
            Op::Graft { soft } => {
                acc(grads, *soft, g.clone());
            }
            Op::Dropout { x, mask, keep } => {
                acc(grads, *x, g * mask / *keep);
            }
            Op::BceMean { pred, target } => {
                let gs = g[IxDyn(&[])];
                let n = target.len() as f64;
                let p = self.value(*pred);
                let mut dp = ArrayD::zeros(p.raw_dim());
                for ((d, &pv), &t) in dp.iter_mut().zip(p.iter()).zip(target.iter()) {
                    if pv > BCE_EPS && pv < 1.0 - BCE_EPS {
                        *d = gs * (pv - t) / (pv * (1.0 - pv)) / n;
                    }
                }
                acc(grads, *pred, dp);
            }
            Op::CeRowsMean { scores, labels } => {
                let gs = g[IxDyn(&[])];
                let s = self.as2(*scores);
                let m = labels.len() as f64;
                let mut ds = Array2::zeros((s.nrows(), s.ncols()));
                for (i, (row, &y)) in s.rows().into_iter().zip(labels.iter()).enumerate() {
                    let max = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
                    let denom: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                    for j in 0..row.len() {
                        let p = (row[j] - max).exp() / denom;
                        ds[[i, j]] = gs * (p - if j == y { 1.0 } else { 0.0 }) / m;
                    }
                }
                acc(grads, *scores, ds.into_dyn());
            }
            Op::PartPool { x, parts } => {
                let xv = self.value(*x);
                let (t, d) = (xv.shape()[0], xv.shape()[2]);
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ArrayD::zeros(xv.raw_dim());
                {
                    let mut dx3 = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for (p, joints) in parts.iter().enumerate() {
                        let denom = (t * joints.len()) as f64;
                        for &j in joints {
                            for ti in 0..t {
                                for di in 0..d {
                                    dx3[[ti, j, di]] += g2[[p, di]] / denom;
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::ReluCosPairsMean { f } => {
                let fm = self.as2(*f);
                let p = fm.nrows();
                let gs = g[IxDyn(&[])];
                let mut df = Array2::zeros((p, fm.ncols()));
                if p > 1 {
                    let scale = gs / (p * (p - 1)) as f64;
                    for a in 0..p {
                        for b in 0..p {
                            if a == b {
                                continue;
                            }
                            let na = norm_row(&fm, a);
                            let nb = norm_row(&fm, b);
                            if na == 0.0 || nb == 0.0 {
                                continue;
                            }
                            let cos = cos_rows(&fm, a, b);
                            if cos <= 0.0 {
                                continue;
                            }
                            for j in 0..fm.ncols() {
                                df[[a, j]] +=
                                    scale * (fm[[b, j]] / (na * nb) - cos * fm[[a, j]] / (na * na));
                                df[[b, j]] +=
                                    scale * (fm[[a, j]] / (na * nb) - cos * fm[[b, j]] / (nb * nb));
                            }
                        }
                    }
                }
                acc(grads, *f, df.into_dyn());
            }
        }
    }
}

fn norm_row(m: &ndarray::ArrayView2<'_, f64>, i: usize) -> f64 {
    m.row(i).fold(0.0, |a, &x| a + x * x).sqrt()
}

fn cos_rows(m: &ndarray::ArrayView2<'_, f64>, a: usize, b: usize) -> f64 {
    let na = norm_row(m, a);
    let nb = norm_row(m, b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = m.row(a).iter().zip(m.row(b).iter()).map(|(&x, &y)| x * y).sum();
    dot / (na * nb)
}

/// Gradient of `gout * prod_j term_j` with respect to each term's two inputs,
/// exact in the presence of zero-valued terms: with one zero the only nonzero
/// partial is through that term, with two or more all partials vanish.
///
/// `terms` yields `(term_j, d term_j / d u_j, d term_j / d v_j)`; `sink`
/// receives `(j, gout * prod_{k!=j} * dterm_du, gout * prod_{k!=j} * dterm_dv)`.
fn product_row_backward(
    gout: f64,
    terms: impl Iterator<Item = (f64, f64, f64)> + Clone,
    mut sink: impl FnMut(usize, f64, f64),
) {
    if gout == 0.0 {
        return;
    }
    let mut zeros = 0usize;
    let mut zero_at = 0usize;
    let mut prod_nonzero = 1.0;
    for (j, (t, _, _)) in terms.clone().enumerate() {
        if t == 0.0 {
            zeros += 1;
            zero_at = j;
            if zeros > 1 {
                return;
            }
        } else {
            prod_nonzero *= t;
        }
    }
    if zeros == 1 {
        if let Some((_, du, dv)) = terms.clone().nth(zero_at) {
            sink(zero_at, gout * prod_nonzero * du, gout * prod_nonzero * dv);
        }
        return;
    }
    for (j, (t, du, dv)) in terms.enumerate() {
        let partial = prod_nonzero / t;
        sink(j, gout * partial * du, gout * partial * dv);
    }
}
