//! Reverse-mode autodiff over f64 tensors.
//!
//! A `Graph` records one forward pass as an append-only list of nodes, each
//! holding its value and the op that produced it. `backward` walks the list
//! in reverse, accumulating gradients into every reachable node and
//! collecting them per parameter. Parent edges are explicit, so gradient
//! reachability can be inspected directly: a `Detach` node has no parents,
//! which is what makes stop-gradient verifiable rather than assumed.
//!
//! Everything is single-threaded f64 with fixed iteration order, so equal
//! inputs give bitwise-equal outputs.

use std::collections::{HashMap, HashSet};

use ndarray::{ArrayD, Axis, IxDyn};

pub type NodeId = usize;
pub type ParamId = usize;

/// Named parameter tensors. Parameter order is creation order and is part of
/// checkpoint identity.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<f64>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(id, v)| (id, self.names[id].as_str(), v))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Value,
    Param(ParamId),
    Detach,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    /// x (T, M) plus a row vector broadcast over all rows; rhs is (M,) or (1, M).
    AddBias(NodeId, NodeId),
    MulConst(NodeId, ArrayD<f64>),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Abs(NodeId),
    MatMul(NodeId, NodeId),
    SoftmaxRows(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    Reshape(NodeId),
    Transpose2(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    /// Row lookup into a (V, E) table; ids are data, not differentiable.
    Gather { table: NodeId, ids: Vec<usize> },
    /// Same-length 1-D convolution: x (T, Cin), w (K, Cin, Cout), b (Cout,).
    Conv1d { x: NodeId, w: NodeId, b: NodeId },
    /// Width-2 stride-1 max over time, last frame passes through.
    MaxPoolPairs(NodeId),
    /// 3x3 stride-2 SAME convolution: x (Cin, H, W), w (Cout, Cin, 3, 3).
    Conv2dS2 { x: NodeId, w: NodeId, b: NodeId },
    /// (C, H, W) -> (H, C*W): per-timestep flatten of channels x bands.
    FlattenTime(NodeId),
    /// Mask is pre-scaled by 1/(1-p); zero entries drop units.
    Dropout { x: NodeId, mask: ArrayD<f64> },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Value | Op::Param(_) | Op::Detach => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Abs(a)
            | Op::SoftmaxRows(a)
            | Op::SliceRows(a, _, _)
            | Op::SliceCols(a, _, _)
            | Op::Reshape(a)
            | Op::Transpose2(a)
            | Op::MeanAll(a)
            | Op::SumAll(a)
            | Op::MaxPoolPairs(a)
            | Op::FlattenTime(a)
            | Op::Dropout { x: a, .. } => vec![*a],
            Op::ConcatRows(list) | Op::ConcatCols(list) => list.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::Conv1d { x, w, b } | Op::Conv2dS2 { x, w, b } => vec![*x, *w, *b],
        }
    }
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients of one scalar, indexed by parameter. A missing entry means the
/// parameter is unreachable from the loss (structurally zero gradient).
#[derive(Debug)]
pub struct Gradients {
    by_param: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.by_param.get(id).and_then(|g| g.as_ref())
    }

    /// Sum of squared entries over all present gradients.
    pub fn squared_norm(&self) -> f64 {
        self.by_param
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Adds another gradient set (e.g. per-batch-item accumulation).
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (mine, theirs) in self.by_param.iter_mut().zip(&other.by_param) {
            match (mine.as_mut(), theirs) {
                (_, None) => {}
                (Some(m), Some(t)) => *m += t,
                (None, Some(t)) => *mine = Some(t.clone()),
            }
        }
    }

    pub fn empty(param_count: usize) -> Self {
        Gradients { by_param: vec![None; param_count] }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    param_count: usize,
}

fn d1(n: usize) -> IxDyn {
    IxDyn(&[n])
}

fn d2(r: usize, c: usize) -> IxDyn {
    IxDyn(&[r, c])
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality().expect("2-d tensor")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, n: NodeId) -> &ArrayD<f64> {
        &self.nodes[n].value
    }

    /// Scalar value of a zero-dim or single-element node.
    pub fn scalar(&self, n: NodeId) -> f64 {
        let v = self.value(n);
        assert_eq!(v.len(), 1, "scalar() on node of {} elements", v.len());
        *v.iter().next().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, v: ArrayD<f64>) -> NodeId {
        self.push(v, Op::Value)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::Value)
    }

    /// Brings a parameter into the graph (one node per parameter per graph).
    pub fn param(&mut self, ps: &ParamSet, p: ParamId) -> NodeId {
        self.param_count = self.param_count.max(ps.len());
        if let Some(&n) = self.param_nodes.get(&p) {
            return n;
        }
        let n = self.push(ps.value(p).clone(), Op::Param(p));
        self.param_nodes.insert(p, n);
        n
    }

    /// Copies a value while cutting all gradient edges.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(v, Op::Detach)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// x (T, M) plus a row vector (M,) or (1, M) broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(b);
        let cols = *xv.shape().last().expect("add_bias on empty shape");
        let blen: usize = bv.len();
        assert_eq!(blen, cols, "bias length matches columns");
        let mut v = xv.clone();
        let bslice: Vec<f64> = bv.iter().copied().collect();
        for mut row in v.rows_mut() {
            for (cell, bval) in row.iter_mut().zip(&bslice) {
                *cell += bval;
            }
        }
        self.push(v, Op::AddBias(x, b))
    }

    pub fn mul_const(&mut self, a: NodeId, c: ArrayD<f64>) -> NodeId {
        assert_eq!(self.value(a).shape(), c.shape(), "mul_const shapes");
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(stable_sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(stable_softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = as2(self.value(a));
        let mut v = av.to_owned();
        for mut row in v.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v.into_dyn(), Op::SoftmaxRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let v = ndarray::concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat_rows column mismatch")
        .into_dyn();
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let v = ndarray::concatenate(
            Axis(1),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat_cols row mismatch")
        .into_dyn();
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let av = as2(self.value(a));
        assert!(start < end && end <= av.nrows(), "slice_rows range");
        let v = av.slice(ndarray::s![start..end, ..]).to_owned().into_dyn();
        self.push(v, Op::SliceRows(a, start, end))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let av = as2(self.value(a));
        assert!(start < end && end <= av.ncols(), "slice_cols range");
        let v = av.slice(ndarray::s![.., start..end]).to_owned().into_dyn();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count");
        self.push(v, Op::Reshape(a))
    }

    pub fn transpose2(&mut self, a: NodeId) -> NodeId {
        let v = as2(self.value(a)).t().to_owned().into_dyn();
        self.push(v, Op::Transpose2(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = ArrayD::from_elem(IxDyn(&[]), av.sum() / av.len() as f64);
        self.push(v, Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Embedding lookup: one table row per id, in order.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = as2(self.value(table));
        let mut v = ndarray::Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < t.nrows(), "gather id {id} out of table ({})", t.nrows());
            v.row_mut(i).assign(&t.row(id));
        }
        self.push(v.into_dyn(), Op::Gather { table, ids: ids.to_vec() })
    }

    /// Same-length 1-D convolution over time. SAME padding splits k-1 as
    /// floor((k-1)/2) on the left.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = as2(self.value(x)).to_owned();
        let wv = self.value(w).clone();
        let bv = self.value(b).clone();
        let (t, cin) = (xv.nrows(), xv.ncols());
        let ws = wv.shape();
        assert_eq!(ws.len(), 3, "conv1d kernel is (K, Cin, Cout)");
        let (k, wcin, cout) = (ws[0], ws[1], ws[2]);
        assert_eq!(wcin, cin, "conv1d channel mismatch");
        assert_eq!(bv.len(), cout, "conv1d bias length");
        let pad_left = (k - 1) / 2;
        let mut y = ndarray::Array2::zeros((t, cout));
        for row in y.rows_mut() {
            let mut row = row;
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = bv[c];
            }
        }
        for dk in 0..k {
            // y[t] += x[t + dk - pad_left] . w[dk]
            let (dst_lo, src_lo) = if dk >= pad_left {
                (0usize, dk - pad_left)
            } else {
                (pad_left - dk, 0usize)
            };
            if src_lo >= t || dst_lo >= t {
                continue;
            }
            let span = (t - src_lo).min(t - dst_lo);
            let wk = wv
                .index_axis(Axis(0), dk)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            let xs = xv.slice(ndarray::s![src_lo..src_lo + span, ..]);
            let prod = xs.dot(&wk);
            let mut ys = y.slice_mut(ndarray::s![dst_lo..dst_lo + span, ..]);
            ys += &prod;
        }
        self.push(y.into_dyn(), Op::Conv1d { x, w, b })
    }

    pub fn maxpool_pairs(&mut self, a: NodeId) -> NodeId {
        let av = as2(self.value(a));
        let (t, c) = (av.nrows(), av.ncols());
        let mut v = ndarray::Array2::zeros((t, c));
        for i in 0..t {
            for j in 0..c {
                v[[i, j]] = if i + 1 < t {
                    av[[i, j]].max(av[[i + 1, j]])
                } else {
                    av[[i, j]]
                };
            }
        }
        self.push(v.into_dyn(), Op::MaxPoolPairs(a))
    }

    /// 3x3 stride-2 SAME conv over (Cin, H, W) with kernel (Cout, Cin, 3, 3):
    /// output (Cout, ceil(H/2), ceil(W/2)).
    pub fn conv2d_s2(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = self.value(b).clone();
        let xs = xv.shape().to_vec();
        let wsh = wv.shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input is (Cin, H, W)");
        assert_eq!(wsh.len(), 4, "conv2d kernel is (Cout, Cin, 3, 3)");
        assert_eq!(wsh[1], xs[0], "conv2d channel mismatch");
        assert_eq!((wsh[2], wsh[3]), (3, 3));
        let (cin, h, wdt) = (xs[0], xs[1], xs[2]);
        let cout = wsh[0];
        assert_eq!(bv.len(), cout);
        let oh = h.div_ceil(2);
        let ow = wdt.div_ceil(2);
        let pad_h = ((oh - 1) * 2 + 3).saturating_sub(h) / 2;
        let pad_w = ((ow - 1) * 2 + 3).saturating_sub(wdt) / 2;
        let mut y = ArrayD::zeros(IxDyn(&[cout, oh, ow]));
        for oc in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bv[oc];
                    for ic in 0..cin {
                        for kh in 0..3 {
                            for kw in 0..3 {
                                let ih = (i * 2 + kh) as isize - pad_h as isize;
                                let iw = (j * 2 + kw) as isize - pad_w as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wdt
                                {
                                    acc += xv[[ic, ih as usize, iw as usize]]
                                        * wv[[oc, ic, kh, kw]];
                                }
                            }
                        }
                    }
                    y[[oc, i, j]] = acc;
                }
            }
        }
        self.push(y, Op::Conv2dS2 { x, w, b })
    }

    /// (C, H, W) -> (H, C*W): per-timestep flatten, channel-major.
    pub fn flatten_time(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let s = av.shape();
        assert_eq!(s.len(), 3, "flatten_time input is (C, H, W)");
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut v = ndarray::Array2::zeros((h, c * w));
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    v[[hi, ci * w + wi]] = av[[ci, hi, wi]];
                }
            }
        }
        self.push(v.into_dyn(), Op::FlattenTime(a))
    }

    /// Inverted dropout with a caller-built mask of zeros and 1/(1-p).
    pub fn dropout(&mut self, x: NodeId, mask: ArrayD<f64>) -> NodeId {
        assert_eq!(self.value(x).shape(), mask.shape(), "dropout mask shape");
        let v = self.value(x) * &mask;
        self.push(v, Op::Dropout { x, mask })
    }

    /// Node ids reachable from `n` along gradient edges (inclusive).
    /// `Detach` contributes itself but none of its history.
    pub fn ancestors(&self, n: NodeId) -> HashSet<NodeId> {
        let mut seen = HashSet::new();
        let mut stack = vec![n];
        while let Some(id) = stack.pop() {
            if seen.insert(id) {
                stack.extend(self.nodes[id].op.parents());
            }
        }
        seen
    }

    /// Parameters with a gradient path to `n`.
    pub fn reachable_params(&self, n: NodeId) -> HashSet<ParamId> {
        self.ancestors(n)
            .into_iter()
            .filter_map(|id| match self.nodes[id].op {
                Op::Param(p) => Some(p),
                _ => None,
            })
            .collect()
    }

    /// Gradients of the scalar node `loss` with respect to every reachable
    /// parameter.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), 1.0));
        let needed = self.ancestors(loss);
        for id in (0..self.nodes.len()).rev() {
            if !needed.contains(&id) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Param(_)) {
                grads[id] = Some(g); // keep for collection
            }
        }
        let mut by_param = vec![None; self.param_count];
        for (&p, &n) in &self.param_nodes {
            if let Some(g) = grads[n].take() {
                by_param[p] = Some(g);
            }
        }
        Gradients { by_param }
    }

    fn backprop_node(&self, id: NodeId, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let acc = |grads: &mut [Option<ArrayD<f64>>], target: NodeId, delta: ArrayD<f64>| {
            match &mut grads[target] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Value | Op::Param(_) | Op::Detach => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * self.value(*b));
                acc(grads, *b, g * self.value(*a));
            }
            Op::Neg(a) => acc(grads, *a, g.mapv(|x| -x)),
            Op::Scale(a, c) => acc(grads, *a, g.mapv(|x| x * c)),
            Op::AddBias(x, b) => {
                acc(grads, *x, g.clone());
                let g2 = as2(g);
                let sums = g2.sum_axis(Axis(0));
                let bshape = self.value(*b).raw_dim();
                let gb = sums.into_dyn().into_shape_with_order(bshape).unwrap();
                acc(grads, *b, gb);
            }
            Op::MulConst(a, c) => acc(grads, *a, g * c),
            Op::Sigmoid(a) => {
                let y = self.value(id);
                acc(grads, *a, g * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::Tanh(a) => {
                let y = self.value(id);
                acc(grads, *a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Relu(a) => {
                let y = self.value(id);
                acc(grads, *a, g * &y.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                acc(grads, *a, g * &x.mapv(stable_sigmoid));
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                acc(grads, *a, g * &x.mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }));
            }
            Op::MatMul(a, b) => {
                let g2 = as2(g);
                let av = as2(self.value(*a));
                let bv = as2(self.value(*b));
                acc(grads, *a, g2.dot(&bv.t()).into_dyn());
                acc(grads, *b, av.t().dot(&g2).into_dyn());
            }
            Op::SoftmaxRows(a) => {
                let y = as2(self.value(id));
                let g2 = as2(g);
                let mut out = y.to_owned();
                for (mut row, (yrow, grow)) in
                    out.rows_mut().into_iter().zip(y.rows().into_iter().zip(g2.rows()))
                {
                    let dot: f64 = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                    for ((cell, &yv), &gv) in row.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                        *cell = yv * (gv - dot);
                    }
                }
                acc(grads, *a, out.into_dyn());
            }
            Op::ConcatRows(parts) => {
                let g2 = as2(g);
                let mut row = 0;
                for &p in parts {
                    let n = as2(self.value(p)).nrows();
                    let gp = g2.slice(ndarray::s![row..row + n, ..]).to_owned().into_dyn();
                    acc(grads, p, gp);
                    row += n;
                }
            }
            Op::ConcatCols(parts) => {
                let g2 = as2(g);
                let mut col = 0;
                for &p in parts {
                    let n = as2(self.value(p)).ncols();
                    let gp = g2.slice(ndarray::s![.., col..col + n]).to_owned().into_dyn();
                    acc(grads, p, gp);
                    col += n;
                }
            }
            Op::SliceRows(a, start, end) => {
                let av = as2(self.value(*a));
                let mut ga = ndarray::Array2::zeros((av.nrows(), av.ncols()));
                ga.slice_mut(ndarray::s![*start..*end, ..]).assign(&as2(g));
                acc(grads, *a, ga.into_dyn());
            }
            Op::SliceCols(a, start, end) => {
                let av = as2(self.value(*a));
                let mut ga = ndarray::Array2::zeros((av.nrows(), av.ncols()));
                ga.slice_mut(ndarray::s![.., *start..*end]).assign(&as2(g));
                acc(grads, *a, ga.into_dyn());
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).raw_dim();
                acc(grads, *a, g.clone().into_shape_with_order(shape).unwrap());
            }
            Op::Transpose2(a) => {
                acc(grads, *a, as2(g).t().to_owned().into_dyn());
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let s = g.iter().next().unwrap() / av.len() as f64;
                acc(grads, *a, ArrayD::from_elem(av.raw_dim(), s));
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                let s = *g.iter().next().unwrap();
                acc(grads, *a, ArrayD::from_elem(av.raw_dim(), s));
            }
            Op::Gather { table, ids } => {
                let t = as2(self.value(*table));
                let g2 = as2(g);
                let mut gt = ndarray::Array2::zeros((t.nrows(), t.ncols()));
                for (i, &idx) in ids.iter().enumerate() {
                    let mut row = gt.row_mut(idx);
                    row += &g2.row(i);
                }
                acc(grads, *table, gt.into_dyn());
            }
            Op::Conv1d { x, w, b } => {
                let g2 = as2(g).to_owned();
                let xv = as2(self.value(*x)).to_owned();
                let wv = self.value(*w).clone();
                let (t, cin) = (xv.nrows(), xv.ncols());
                let k = wv.shape()[0];
                let cout = wv.shape()[2];
                let pad_left = (k - 1) / 2;
                let mut gx = ndarray::Array2::zeros((t, cin));
                let mut gw = ArrayD::zeros(wv.raw_dim());
                for dk in 0..k {
                    let (dst_lo, src_lo) = if dk >= pad_left {
                        (0usize, dk - pad_left)
                    } else {
                        (pad_left - dk, 0usize)
                    };
                    if src_lo >= t || dst_lo >= t {
                        continue;
                    }
                    let span = (t - src_lo).min(t - dst_lo);
                    let wk = wv
                        .index_axis(Axis(0), dk)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    let gs = g2.slice(ndarray::s![dst_lo..dst_lo + span, ..]);
                    let xs = xv.slice(ndarray::s![src_lo..src_lo + span, ..]);
                    {
                        let mut gxs = gx.slice_mut(ndarray::s![src_lo..src_lo + span, ..]);
                        gxs += &gs.dot(&wk.t());
                    }
                    let gwk = xs.t().dot(&gs); // (Cin, Cout)
                    let mut gw_dk = gw.index_axis_mut(Axis(0), dk);
                    let mut gw_dk2 =
                        gw_dk.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                    gw_dk2 += &gwk;
                }
                let gb = g2.sum_axis(Axis(0)).into_dyn().into_shape_with_order(d1(cout)).unwrap();
                acc(grads, *x, gx.into_dyn());
                acc(grads, *w, gw);
                acc(grads, *b, gb);
            }
            Op::MaxPoolPairs(a) => {
                let av = as2(self.value(*a));
                let g2 = as2(g);
                let (t, c) = (av.nrows(), av.ncols());
                let mut ga = ndarray::Array2::zeros((t, c));
                for i in 0..t {
                    for j in 0..c {
                        if i + 1 < t && av[[i + 1, j]] > av[[i, j]] {
                            ga[[i + 1, j]] += g2[[i, j]];
                        } else {
                            ga[[i, j]] += g2[[i, j]];
                        }
                    }
                }
                acc(grads, *a, ga.into_dyn());
            }
            Op::Conv2dS2 { x, w, b } => {
                let xv = self.value(*x).clone();
                let wv = self.value(*w).clone();
                let (cin, h, wdt) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let cout = wv.shape()[0];
                let (oh, ow) = (h.div_ceil(2), wdt.div_ceil(2));
                let pad_h = ((oh - 1) * 2 + 3).saturating_sub(h) / 2;
                let pad_w = ((ow - 1) * 2 + 3).saturating_sub(wdt) / 2;
                let mut gx = ArrayD::zeros(xv.raw_dim());
                let mut gw = ArrayD::zeros(wv.raw_dim());
                let mut gb = ArrayD::zeros(d1(cout));
                for oc in 0..cout {
                    for i in 0..oh {
                        for j in 0..ow {
                            let go = g[[oc, i, j]];
                            if go == 0.0 {
                                continue;
                            }
                            gb[[oc]] += go;
                            for ic in 0..cin {
                                for kh in 0..3 {
                                    for kw in 0..3 {
                                        let ih = (i * 2 + kh) as isize - pad_h as isize;
                                        let iw = (j * 2 + kw) as isize - pad_w as isize;
                                        if ih >= 0
                                            && iw >= 0
                                            && (ih as usize) < h
                                            && (iw as usize) < wdt
                                        {
                                            let (ihu, iwu) = (ih as usize, iw as usize);
                                            gx[[ic, ihu, iwu]] += go * wv[[oc, ic, kh, kw]];
                                            gw[[oc, ic, kh, kw]] += go * xv[[ic, ihu, iwu]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *w, gw);
                acc(grads, *b, gb);
            }
            Op::FlattenTime(a) => {
                let av = self.value(*a);
                let (c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let g2 = as2(g);
                let mut ga = ArrayD::zeros(av.raw_dim());
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            ga[[ci, hi, wi]] = g2[[hi, ci * w + wi]];
                        }
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Dropout { x, mask } => {
                acc(grads, *x, g * mask);
            }
        }
    }
}

/// Overflow-safe logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe ln(1 + e^x).
pub fn stable_softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Helpers for building constants.
pub fn arr1(v: &[f64]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(d1(v.len()), v.to_vec()).unwrap()
}

pub fn arr2(rows: usize, cols: usize, v: Vec<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(d2(rows, cols), v).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central-difference check of d(loss)/d(param) for a scalar-valued
    /// builder over one ParamSet.
    fn fd_check(build: impl Fn(&mut Graph, &ParamSet) -> NodeId, ps: &mut ParamSet) {
        let mut g = Graph::new();
        let loss = build(&mut g, ps);
        let grads = g.backward(loss);
        let eps = 1e-6;
        for p in 0..ps.len() {
            let n = ps.value(p).len();
            for i in 0..n {
                let orig = ps.value(p).as_slice().unwrap()[i];
                ps.value_mut(p).as_slice_mut().unwrap()[i] = orig + eps;
                let mut gp = Graph::new();
                let lp_node = build(&mut gp, ps);
                let lp = gp.scalar(lp_node);
                ps.value_mut(p).as_slice_mut().unwrap()[i] = orig - eps;
                let mut gm = Graph::new();
                let lm_node = build(&mut gm, ps);
                let lm = gm.scalar(lm_node);
                ps.value_mut(p).as_slice_mut().unwrap()[i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = grads
                    .param(p)
                    .map(|g| g.as_slice().unwrap()[i])
                    .unwrap_or(0.0);
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "param {p}[{i}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let a = ps.add("a", rand_arr(&mut rng, &[3, 4]));
        let b = ps.add("b", rand_arr(&mut rng, &[4, 2]));
        let c = ps.add("c", rand_arr(&mut rng, &[2]));
        fd_check(
            |g, ps| {
                let an = g.param(ps, a);
                let bn = g.param(ps, b);
                let cn = g.param(ps, c);
                let mm = g.matmul(an, bn);
                let mb = g.add_bias(mm, cn);
                let s = g.sigmoid(mb);
                let t = g.tanh(mb);
                let r = g.relu(mb);
                let sp = g.softplus(mb);
                let m1 = g.mul(s, t);
                let m2 = g.add(r, sp);
                let d = g.sub(m1, m2);
                let ab = g.abs(d);
                g.mean_all(ab)
            },
            &mut ps,
        );
    }

    #[test]
    fn softmax_concat_slice_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let a = ps.add("a", rand_arr(&mut rng, &[2, 5]));
        let b = ps.add("b", rand_arr(&mut rng, &[2, 3]));
        fd_check(
            |g, ps| {
                let an = g.param(ps, a);
                let bn = g.param(ps, b);
                let sm = g.softmax_rows(an);
                let cat = g.concat_cols(&[sm, bn]);
                let sl = g.slice_cols(cat, 2, 7);
                let rows = g.concat_rows(&[sl, sl]);
                let one = g.slice_rows(rows, 1, 3);
                let tr = g.transpose2(one);
                let sq = g.mul(tr, tr);
                g.sum_all(sq)
            },
            &mut ps,
        );
    }

    #[test]
    fn conv1d_maxpool_gather_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let table = ps.add("table", rand_arr(&mut rng, &[5, 3]));
        let w = ps.add("w", rand_arr(&mut rng, &[2, 3, 4]));
        let b = ps.add("b", rand_arr(&mut rng, &[4]));
        fd_check(
            |g, ps| {
                let t = g.param(ps, table);
                let wn = g.param(ps, w);
                let bn = g.param(ps, b);
                let x = g.gather(t, &[0, 2, 4, 2, 1, 3]);
                let y = g.conv1d(x, wn, bn);
                let p = g.maxpool_pairs(y);
                let r = g.relu(p);
                g.mean_all(r)
            },
            &mut ps,
        );
    }

    #[test]
    fn conv2d_flatten_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let x = ps.add("x", rand_arr(&mut rng, &[2, 5, 4]));
        let w = ps.add("w", rand_arr(&mut rng, &[3, 2, 3, 3]));
        let b = ps.add("b", rand_arr(&mut rng, &[3]));
        fd_check(
            |g, ps| {
                let xn = g.param(ps, x);
                let wn = g.param(ps, w);
                let bn = g.param(ps, b);
                let y = g.conv2d_s2(xn, wn, bn);
                let f = g.flatten_time(y);
                let t = g.tanh(f);
                g.mean_all(t)
            },
            &mut ps,
        );
    }

    #[test]
    fn conv2d_halves_dimensions_by_ceiling() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", ArrayD::zeros(IxDyn(&[1, 5, 80])));
        let w = ps.add("w", ArrayD::zeros(IxDyn(&[4, 1, 3, 3])));
        let b = ps.add("b", ArrayD::zeros(IxDyn(&[4])));
        let mut g = Graph::new();
        let xn = g.param(&ps, x);
        let wn = g.param(&ps, w);
        let bn = g.param(&ps, b);
        let y = g.conv2d_s2(xn, wn, bn);
        assert_eq!(g.value(y).shape(), &[4, 3, 40]);
    }

    #[test]
    fn detach_cuts_gradient_flow_and_reachability() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let a = ps.add("a", rand_arr(&mut rng, &[2, 2]));
        let b = ps.add("b", rand_arr(&mut rng, &[2, 2]));
        let mut g = Graph::new();
        let an = g.param(&ps, a);
        let bn = g.param(&ps, b);
        let frozen = g.detach(an);
        let prod = g.mul(frozen, bn);
        let loss = g.sum_all(prod);
        let reach = g.reachable_params(loss);
        assert!(!reach.contains(&a), "detached param must be unreachable");
        assert!(reach.contains(&b));
        let grads = g.backward(loss);
        assert!(grads.param(a).is_none(), "no gradient through detach");
        assert!(grads.param(b).is_some());
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", arr1(&[2.0]));
        let mut g = Graph::new();
        let an = g.param(&ps, a);
        let sq = g.mul(an, an); // d/da a^2 = 2a = 4
        let s = g.sum_all(sq);
        let grads = g.backward(s);
        assert_eq!(grads.param(a).unwrap().as_slice().unwrap(), &[4.0]);
    }

    #[test]
    fn dropout_mask_routes_gradient() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", arr2(1, 4, vec![1.0, 2.0, 3.0, 4.0]));
        let mut g = Graph::new();
        let an = g.param(&ps, a);
        let mask = arr2(1, 4, vec![2.0, 0.0, 2.0, 0.0]);
        let d = g.dropout(an, mask);
        let s = g.sum_all(d);
        assert_eq!(g.scalar(s), 2.0 + 6.0);
        let grads = g.backward(s);
        assert_eq!(
            grads.param(a).unwrap().as_slice().unwrap(),
            &[2.0, 0.0, 2.0, 0.0]
        );
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamSet::new();
        let a = ps.add("a", rand_arr(&mut rng, &[4, 4]));
        let run = |ps: &ParamSet| {
            let mut g = Graph::new();
            let an = g.param(ps, a);
            let s = g.sigmoid(an);
            let m = g.matmul(s, an);
            let l = g.mean_all(m);
            g.scalar(l)
        };
        assert_eq!(run(&ps).to_bits(), run(&ps).to_bits());
    }
}
