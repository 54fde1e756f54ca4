//! Matrix-level reverse-mode differentiation.
//!
//! A `Tape` records primitive operations as they execute; `backward` walks
//! the record in reverse (recording order is a topological order, so its
//! reverse visits every consumer before its producers) and accumulates
//! adjoints. Leaves hold parameters; their adjoints are the loss gradients.
//!
//! Masks passed to the masked ops are constants of the forward pass: masked
//! entries are never read, produce exact zeros, and receive zero gradient.
//! This is also how sparse selection stays straight-through — the selection
//! set enters as a constant mask.

use crate::error::{Error, Result};
use crate::matrix::{softmax_masked, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    /// x [r x c] + bias [1 x c] added to every row
    AddRowBroadcast(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Clamp(usize, T, T),
    GatherRows(usize, Vec<usize>),
    SliceCols(usize, usize, usize),
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    /// Row-wise softmax over entries with a true mask; masked entries are
    /// never read and output exact zeros. Fully masked rows output zeros.
    MaskedSoftmaxRows(usize, Vec<bool>),
    /// Row-wise x_i / sum(masked x) over the masked set, zeros elsewhere.
    MaskedNormalizeRows(usize, Vec<bool>),
    /// Mean of the masked entries, as a 1x1 matrix.
    MaskedMean(usize, Vec<bool>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter). Its adjoint is kept by backward.
    pub fn leaf(&mut self, m: Matrix<T>) -> NodeId {
        self.push(m, Op::Leaf)
    }

    /// A non-differentiable input (labels, masks-as-values). Structurally a
    /// leaf; callers simply ignore its adjoint.
    pub fn constant(&mut self, m: Matrix<T>) -> NodeId {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mm(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.transpose();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.nodes[a.0].value.scale(c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let b = &self.nodes[bias.0].value;
        debug_assert_eq!(b.rows(), 1);
        debug_assert_eq!(b.cols(), x.cols());
        let mut v = x.clone();
        for r in 0..v.rows() {
            for (o, &bv) in v.row_mut(r).iter_mut().zip(b.row(0)) {
                *o += bv;
            }
        }
        self.push(v, Op::AddRowBroadcast(a.0, bias.0))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.relu();
        self.push(v, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.sigmoid();
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.ln());
        self.push(v, Op::Log(a.0))
    }

    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a.0, lo, hi))
    }

    pub fn gather_rows(&mut self, a: NodeId, ids: Vec<usize>) -> NodeId {
        let src = &self.nodes[a.0].value;
        let mut v = Matrix::zeros(ids.len(), src.cols());
        for (r, &id) in ids.iter().enumerate() {
            debug_assert!(id < src.rows());
            v.row_mut(r).copy_from_slice(src.row(id));
        }
        self.push(v, Op::GatherRows(a.0, ids))
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let src = &self.nodes[a.0].value;
        debug_assert!(lo < hi && hi <= src.cols());
        let mut v = Matrix::zeros(src.rows(), hi - lo);
        for r in 0..src.rows() {
            v.row_mut(r).copy_from_slice(&src.row(r)[lo..hi]);
        }
        self.push(v, Op::SliceCols(a.0, lo, hi))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(x.rows(), y.rows());
        let mut v = Matrix::zeros(x.rows(), x.cols() + y.cols());
        for r in 0..x.rows() {
            v.row_mut(r)[..x.cols()].copy_from_slice(x.row(r));
            v.row_mut(r)[x.cols()..].copy_from_slice(y.row(r));
        }
        self.push(v, Op::ConcatCols(a.0, b.0))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        debug_assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].value.cols();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.rows()).sum();
        let mut v = Matrix::zeros(total, cols);
        let mut at = 0;
        for p in parts {
            let m = &self.nodes[p.0].value;
            debug_assert_eq!(m.cols(), cols);
            for r in 0..m.rows() {
                v.row_mut(at + r).copy_from_slice(m.row(r));
            }
            at += m.rows();
        }
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    /// `mask` is row-major [rows x cols], true = participate.
    pub fn masked_softmax_rows(&mut self, a: NodeId, mask: Vec<bool>) -> NodeId {
        let x = &self.nodes[a.0].value;
        debug_assert_eq!(mask.len(), x.rows() * x.cols());
        let mut v = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let m = &mask[r * x.cols()..(r + 1) * x.cols()];
            let s = softmax_masked(x.row(r), m);
            v.row_mut(r).copy_from_slice(&s);
        }
        self.push(v, Op::MaskedSoftmaxRows(a.0, mask))
    }

    /// Row-wise sum-normalization over the masked set; rows whose masked sum
    /// is zero (or fully masked rows) output zeros.
    pub fn masked_normalize_rows(&mut self, a: NodeId, mask: Vec<bool>) -> NodeId {
        let x = &self.nodes[a.0].value;
        debug_assert_eq!(mask.len(), x.rows() * x.cols());
        let mut v = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let m = &mask[r * x.cols()..(r + 1) * x.cols()];
            let xr = x.row(r);
            let mut s = T::zero();
            for (xv, &mv) in xr.iter().zip(m) {
                if mv {
                    s += *xv;
                }
            }
            if s != T::zero() {
                let vr = v.row_mut(r);
                for c in 0..xr.len() {
                    if m[c] {
                        vr[c] = xr[c] / s;
                    }
                }
            }
        }
        self.push(v, Op::MaskedNormalizeRows(a.0, mask))
    }

    /// Mean over masked entries as a 1x1 node. Errors if the mask is empty.
    pub fn masked_mean(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        let x = &self.nodes[a.0].value;
        debug_assert_eq!(mask.len(), x.rows() * x.cols());
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Numeric("masked mean over empty selection".into()));
        }
        let mut s = T::zero();
        for (v, &m) in x.data().iter().zip(&mask) {
            if m {
                s += *v;
            }
        }
        let v = Matrix::scalar(s / T::from_usize(count));
        Ok(self.push(v, Op::MaskedMean(a.0, mask)))
    }

    /// Accumulate adjoints of every node reachable from `root`, which must
    /// be 1x1. Returns the adjoint store; leaves keep their gradients.
    pub fn backward(&self, root: NodeId) -> Grads<T> {
        let rv = &self.nodes[root.0].value;
        assert_eq!(
            (rv.rows(), rv.cols()),
            (1, 1),
            "backward root must be scalar"
        );
        let mut adj: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Matrix::scalar(T::one()));

        for i in (0..self.nodes.len()).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da = g.mm(&bv.transpose());
                    let db = av.transpose().mm(&g);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Transpose(a) => {
                    acc(&mut adj, *a, g.transpose());
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g.scale(-T::one()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    acc(&mut adj, *a, g.zip(bv, |x, y| x * y));
                    acc(&mut adj, *b, g.zip(av, |x, y| x * y));
                }
                Op::Scale(a, c) => {
                    acc(&mut adj, *a, g.scale(*c));
                }
                Op::AddRowBroadcast(a, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &gv) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *bias, db);
                }
                Op::Relu(a) => {
                    let av = &self.nodes[*a].value;
                    acc(
                        &mut adj,
                        *a,
                        g.zip(av, |gv, x| if x > T::zero() { gv } else { T::zero() }),
                    );
                }
                Op::Sigmoid(a) => {
                    // node.value holds s(x); ds/dx = s(1-s)
                    acc(
                        &mut adj,
                        *a,
                        g.zip(&node.value, |gv, s| gv * s * (T::one() - s)),
                    );
                }
                Op::Log(a) => {
                    let av = &self.nodes[*a].value;
                    acc(&mut adj, *a, g.zip(av, |gv, x| gv / x));
                }
                Op::Clamp(a, lo, hi) => {
                    let av = &self.nodes[*a].value;
                    acc(
                        &mut adj,
                        *a,
                        g.zip(av, |gv, x| {
                            if x > *lo && x < *hi {
                                gv
                            } else {
                                T::zero()
                            }
                        }),
                    );
                }
                Op::GatherRows(a, ids) => {
                    let src = &self.nodes[*a].value;
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &gv) in da.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    acc(&mut adj, *a, da);
                }
                Op::SliceCols(a, lo, _hi) => {
                    let src = &self.nodes[*a].value;
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            da.set(r, lo + c, g.get(r, c));
                        }
                    }
                    acc(&mut adj, *a, da);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    let mut da = Matrix::zeros(g.rows(), ca);
                    let mut db = Matrix::zeros(g.rows(), g.cols() - ca);
                    for r in 0..g.rows() {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let rows = self.nodes[p].value.rows();
                        let mut dp = Matrix::zeros(rows, g.cols());
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(g.row(at + r));
                        }
                        acc(&mut adj, p, dp);
                        at += rows;
                    }
                }
                Op::MaskedSoftmaxRows(a, mask) => {
                    // per row: dx_j = p_j * (g_j - sum_k g_k p_k) on the mask
                    let p = &node.value;
                    let mut da = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let m = &mask[r * p.cols()..(r + 1) * p.cols()];
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let mut dot = T::zero();
                        for c in 0..pr.len() {
                            if m[c] {
                                dot += gr[c] * pr[c];
                            }
                        }
                        let dr = da.row_mut(r);
                        for c in 0..pr.len() {
                            if m[c] {
                                dr[c] = pr[c] * (gr[c] - dot);
                            }
                        }
                    }
                    acc(&mut adj, *a, da);
                }
                Op::MaskedNormalizeRows(a, mask) => {
                    // out_j = m_j x_j / s; dx_j = (m_j/s) (g_j - sum_k g_k out_k)
                    let av = &self.nodes[*a].value;
                    let out = &node.value;
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let m = &mask[r * av.cols()..(r + 1) * av.cols()];
                        let xr = av.row(r);
                        let or = out.row(r);
                        let gr = g.row(r);
                        let mut s = T::zero();
                        for c in 0..xr.len() {
                            if m[c] {
                                s += xr[c];
                            }
                        }
                        if s == T::zero() {
                            continue;
                        }
                        let mut dot = T::zero();
                        for c in 0..xr.len() {
                            if m[c] {
                                dot += gr[c] * or[c];
                            }
                        }
                        let dr = da.row_mut(r);
                        for c in 0..xr.len() {
                            if m[c] {
                                dr[c] = (gr[c] - dot) / s;
                            }
                        }
                    }
                    acc(&mut adj, *a, da);
                }
                Op::MaskedMean(a, mask) => {
                    let av = &self.nodes[*a].value;
                    let count = mask.iter().filter(|&&m| m).count();
                    let gv = g.get(0, 0) / T::from_usize(count);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for (o, &m) in da.data_mut().iter_mut().zip(mask) {
                        if m {
                            *o = gv;
                        }
                    }
                    acc(&mut adj, *a, da);
                }
            }
            adj[i] = Some(g);
        }
        Grads { adj }
    }
}

fn acc<T: Scalar>(adj: &mut [Option<Matrix<T>>], id: usize, delta: Matrix<T>) {
    match &mut adj[id] {
        Some(m) => m.add_assign(&delta),
        none => *none = Some(delta),
    }
}

pub struct Grads<T> {
    adj: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.adj[id.0].as_ref()
    }

    /// Gradient of a leaf, zeros if the leaf is unreachable from the root.
    pub fn of(&self, id: NodeId, rows: usize, cols: usize) -> Matrix<T> {
        match self.get(id) {
            Some(m) => m.clone(),
            None => Matrix::zeros(rows, cols),
        }
    }
}
