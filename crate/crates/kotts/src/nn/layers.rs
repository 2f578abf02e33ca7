//! Trainable layers built on the autodiff graph.
//!
//! Layers own `ParamId`s, never tensors; all state lives in the shared
//! `ParamSet` so checkpointing and optimizer bookkeeping see one flat list.
//! Forward methods take `&mut Graph` and node ids, returning node ids.
//! Sequences are laid out time-major: (T, features).

use ndarray::{ArrayD, IxDyn};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId, ParamId, ParamSet};

/// Glorot/Xavier uniform: +-sqrt(6 / (fan_in + fan_out)).
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> ArrayD<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Inverted-dropout mask: entries are 0 with probability p, else 1/(1-p).
/// Returns None when p = 0 so callers can skip the node entirely.
pub fn dropout_mask(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Option<ArrayD<f64>> {
    assert!((0.0..1.0).contains(&p), "dropout p in [0, 1)");
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(ArrayD::from_shape_fn(IxDyn(shape), |_| {
        if rng.random::<f64>() < p { 0.0 } else { keep }
    }))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), xavier(rng, in_dim, out_dim, &[in_dim, out_dim]));
        let b = bias.then(|| ps.add(format!("{name}.b"), zeros(&[out_dim])));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: NodeId) -> NodeId {
        let w = g.param(ps, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let bn = g.param(ps, b);
                g.add_bias(y, bn)
            }
            None => y,
        }
    }
}

/// Symbol embedding. Id 0 is the padding symbol and always maps to the zero
/// vector; its table row receives no gradient.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Self {
        let table = ps.add(format!("{name}.table"), xavier(rng, vocab, dim, &[vocab, dim]));
        Embedding { table, vocab, dim }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, ids: &[usize]) -> NodeId {
        let t = g.param(ps, self.table);
        let rows = g.gather(t, ids);
        if ids.contains(&0) {
            let mut mask = ndarray::Array2::from_elem((ids.len(), self.dim), 1.0);
            for (i, &id) in ids.iter().enumerate() {
                if id == 0 {
                    mask.row_mut(i).fill(0.0);
                }
            }
            g.mul_const(rows, mask.into_dyn())
        } else {
            rows
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub width: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv1dLayer {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            xavier(rng, width * in_ch, out_ch, &[width, in_ch, out_ch]),
        );
        let b = ps.add(format!("{name}.b"), zeros(&[out_ch]));
        Conv1dLayer { w, b, width, in_ch, out_ch }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: NodeId) -> NodeId {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.conv1d(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2dLayer {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            xavier(rng, in_ch * 9, out_ch * 9, &[out_ch, in_ch, 3, 3]),
        );
        let b = ps.add(format!("{name}.b"), zeros(&[out_ch]));
        Conv2dLayer { w, b, in_ch, out_ch }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: NodeId) -> NodeId {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.conv2d_s2(x, w, b)
    }
}

/// Single LSTM cell. Gate layout along the 4H axis is [input, forget, cell,
/// output]; the forget-gate bias starts at 1 so early training does not
/// flush state.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), xavier(rng, in_dim, hidden, &[in_dim, 4 * hidden]));
        let u = ps.add(format!("{name}.u"), xavier(rng, hidden, hidden, &[hidden, 4 * hidden]));
        let mut bias = zeros(&[4 * hidden]);
        for i in hidden..2 * hidden {
            bias[[i]] = 1.0;
        }
        let b = ps.add(format!("{name}.b"), bias);
        LstmCell { w, u, b, in_dim, hidden }
    }

    pub fn zero_state(&self, g: &mut Graph) -> (NodeId, NodeId) {
        let h = g.constant(zeros(&[1, self.hidden]));
        let c = g.constant(zeros(&[1, self.hidden]));
        (h, c)
    }

    /// One step: x is (1, in_dim), returns (h', c') both (1, hidden).
    pub fn step(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> (NodeId, NodeId) {
        let hsz = self.hidden;
        let w = g.param(ps, self.w);
        let u = g.param(ps, self.u);
        let b = g.param(ps, self.b);
        let xw = g.matmul(x, w);
        let hu = g.matmul(h, u);
        let pre = g.add(xw, hu);
        let z = g.add_bias(pre, b);
        let zi = g.slice_cols(z, 0, hsz);
        let zf = g.slice_cols(z, hsz, 2 * hsz);
        let zg = g.slice_cols(z, 2 * hsz, 3 * hsz);
        let zo = g.slice_cols(z, 3 * hsz, 4 * hsz);
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let fc = g.mul(f, c);
        let ig = g.mul(i, cand);
        let c_next = g.add(fc, ig);
        let ct = g.tanh(c_next);
        let h_next = g.mul(o, ct);
        (h_next, c_next)
    }

    /// Unrolls over a (T, in_dim) sequence from a zero state; output (T, hidden).
    pub fn run(&self, g: &mut Graph, ps: &ParamSet, xs: NodeId) -> NodeId {
        let t_len = g.value(xs).shape()[0];
        let (mut h, mut c) = self.zero_state(g);
        let mut outs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let x = g.slice_rows(xs, t, t + 1);
            let (h2, c2) = self.step(g, ps, x, h, c);
            h = h2;
            c = c2;
            outs.push(h);
        }
        g.concat_rows(&outs)
    }
}

/// Gated recurrent unit; gate layout along 3H is [reset, update, candidate].
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w: ParamId,
    pub u: ParamId,
    pub b_in: ParamId,
    pub b_rec: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), xavier(rng, in_dim, hidden, &[in_dim, 3 * hidden]));
        let u = ps.add(format!("{name}.u"), xavier(rng, hidden, hidden, &[hidden, 3 * hidden]));
        let b_in = ps.add(format!("{name}.b_in"), zeros(&[3 * hidden]));
        let b_rec = ps.add(format!("{name}.b_rec"), zeros(&[3 * hidden]));
        GruCell { w, u, b_in, b_rec, in_dim, hidden }
    }

    pub fn zero_state(&self, g: &mut Graph) -> NodeId {
        g.constant(zeros(&[1, self.hidden]))
    }

    pub fn step(&self, g: &mut Graph, ps: &ParamSet, x: NodeId, h: NodeId) -> NodeId {
        let hsz = self.hidden;
        let w = g.param(ps, self.w);
        let u = g.param(ps, self.u);
        let b_in = g.param(ps, self.b_in);
        let b_rec = g.param(ps, self.b_rec);
        let xw = g.matmul(x, w);
        let xw = g.add_bias(xw, b_in);
        let hu = g.matmul(h, u);
        let hu = g.add_bias(hu, b_rec);
        let xr = g.slice_cols(xw, 0, hsz);
        let xz = g.slice_cols(xw, hsz, 2 * hsz);
        let xn = g.slice_cols(xw, 2 * hsz, 3 * hsz);
        let hr = g.slice_cols(hu, 0, hsz);
        let hz = g.slice_cols(hu, hsz, 2 * hsz);
        let hn = g.slice_cols(hu, 2 * hsz, 3 * hsz);
        let r_pre = g.add(xr, hr);
        let r = g.sigmoid(r_pre);
        let z_pre = g.add(xz, hz);
        let z = g.sigmoid(z_pre);
        let gated = g.mul(r, hn);
        let n_pre = g.add(xn, gated);
        let n = g.tanh(n_pre);
        // h' = (1 - z) * n + z * h
        let ones = g.constant(ndarray::Array2::from_elem((1, hsz), 1.0).into_dyn());
        let inv_z = g.sub(ones, z);
        let a = g.mul(inv_z, n);
        let bterm = g.mul(z, h);
        g.add(a, bterm)
    }

    /// Runs over (T, in_dim) and returns only the final state (1, hidden).
    pub fn run_final(&self, g: &mut Graph, ps: &ParamSet, xs: NodeId) -> NodeId {
        let t_len = g.value(xs).shape()[0];
        let mut h = self.zero_state(g);
        for t in 0..t_len {
            let x = g.slice_rows(xs, t, t + 1);
            h = self.step(g, ps, x, h);
        }
        h
    }
}

/// Bidirectional LSTM: forward and backward passes concatenated on the
/// feature axis, output (T, 2*hidden).
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl BiLstm {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        BiLstm {
            fwd: LstmCell::new(ps, rng, &format!("{name}.fwd"), in_dim, hidden),
            bwd: LstmCell::new(ps, rng, &format!("{name}.bwd"), in_dim, hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, xs: NodeId) -> NodeId {
        let t_len = g.value(xs).shape()[0];
        let fwd_out = self.fwd.run(g, ps, xs);
        let (mut h, mut c) = self.bwd.zero_state(g);
        let mut rev = vec![usize::MAX; t_len]; // placeholder indices
        let mut rev_nodes: Vec<NodeId> = Vec::with_capacity(t_len);
        for t in (0..t_len).rev() {
            let x = g.slice_rows(xs, t, t + 1);
            let (h2, c2) = self.bwd.step(g, ps, x, h, c);
            h = h2;
            c = c2;
            rev_nodes.push(h);
            rev[t] = rev_nodes.len() - 1;
        }
        let ordered: Vec<NodeId> = (0..t_len).map(|t| rev_nodes[rev[t]]).collect();
        let bwd_out = g.concat_rows(&ordered);
        g.concat_cols(&[fwd_out, bwd_out])
    }
}

/// Highway layer: y = t * relu(Wh x) + (1 - t) * x with t = sigmoid(Wt x).
/// The transform-gate bias starts at -1 so the layer opens near identity.
#[derive(Debug, Clone)]
pub struct Highway {
    pub transform: Linear,
    pub gate: Linear,
    pub dim: usize,
}

impl Highway {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let transform = Linear::new(ps, rng, &format!("{name}.h"), dim, dim, true);
        let gate = Linear::new(ps, rng, &format!("{name}.t"), dim, dim, true);
        if let Some(b) = gate.b {
            ps.value_mut(b).fill(-1.0);
        }
        Highway { transform, gate, dim }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: NodeId) -> NodeId {
        let rows = g.value(x).shape()[0];
        let hpre = self.transform.forward(g, ps, x);
        let h = g.relu(hpre);
        let tpre = self.gate.forward(g, ps, x);
        let t = g.sigmoid(tpre);
        let th = g.mul(t, h);
        let ones = g.constant(ndarray::Array2::from_elem((rows, self.dim), 1.0).into_dyn());
        let inv = g.sub(ones, t);
        let carry = g.mul(inv, x);
        g.add(th, carry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::finite_difference_report;
    use rand::SeedableRng;

    fn seq_const(g: &mut Graph, t: usize, d: usize, seed: u64) -> NodeId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.constant(ArrayD::from_shape_fn(IxDyn(&[t, d]), |_| {
            rng.random::<f64>() * 2.0 - 1.0
        }))
    }

    #[test]
    fn lstm_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ps = ParamSet::new();
        let cell = LstmCell::new(&mut ps, &mut rng, "lstm", 3, 4);
        let report = finite_difference_report(
            &|g, ps| {
                let xs = seq_const(g, 5, 3, 99);
                let out = cell.run(g, ps, xs);
                let sq = g.mul(out, out);
                g.mean_all(sq)
            },
            &mut ps,
            1e-5,
            0,
            0,
        );
        assert!(report.worst_rel < 1e-4, "{report:?}");
    }

    #[test]
    fn gru_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let cell = GruCell::new(&mut ps, &mut rng, "gru", 3, 4);
        let report = finite_difference_report(
            &|g, ps| {
                let xs = seq_const(g, 5, 3, 98);
                let h = cell.run_final(g, ps, xs);
                let sq = g.mul(h, h);
                g.mean_all(sq)
            },
            &mut ps,
            1e-5,
            0,
            0,
        );
        assert!(report.worst_rel < 1e-4, "{report:?}");
    }

    #[test]
    fn bilstm_and_highway_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ps = ParamSet::new();
        let bi = BiLstm::new(&mut ps, &mut rng, "bi", 3, 2);
        let hw = Highway::new(&mut ps, &mut rng, "hw", 4);
        let report = finite_difference_report(
            &|g, ps| {
                let xs = seq_const(g, 4, 3, 97);
                let out = bi.forward(g, ps, xs);
                let out = hw.forward(g, ps, out);
                let sq = g.mul(out, out);
                g.mean_all(sq)
            },
            &mut ps,
            1e-5,
            0,
            0,
        );
        assert!(report.worst_rel < 1e-4, "{report:?}");
    }

    #[test]
    fn bilstm_backward_direction_sees_the_future() {
        // With a one-hot impulse at the last frame, the backward half must
        // respond at frame 0 while the forward half cannot before the
        // impulse arrives.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ps = ParamSet::new();
        let bi = BiLstm::new(&mut ps, &mut rng, "bi", 1, 2);
        let mut g = Graph::new();
        let mut x = ndarray::Array2::zeros((6, 1));
        x[[5, 0]] = 1.0;
        let xs = g.constant(x.into_dyn());
        let out = bi.forward(&mut g, &ps, xs);
        let v = g.value(out);
        let fwd_frame0: f64 = (0..2).map(|j| v[[0, j]].abs()).sum();
        let bwd_frame0: f64 = (2..4).map(|j| v[[0, j]].abs()).sum();
        assert!(fwd_frame0 < 1e-12, "forward half leaked the future");
        assert!(bwd_frame0 > 1e-6, "backward half ignored the future");
    }

    #[test]
    fn embedding_pad_row_stays_zero_and_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut ps = ParamSet::new();
        let emb = Embedding::new(&mut ps, &mut rng, "emb", 5, 3);
        let mut g = Graph::new();
        let out = emb.forward(&mut g, &ps, &[0, 2, 0, 3]);
        let v = g.value(out);
        for j in 0..3 {
            assert_eq!(v[[0, j]], 0.0);
            assert_eq!(v[[2, j]], 0.0);
        }
        let sq = g.mul(out, out);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        let gt = grads.param(emb.table).unwrap();
        for j in 0..3 {
            assert_eq!(gt[[0, j]], 0.0, "pad row must get zero gradient");
        }
        assert!((0..3).any(|j| gt[[2, j]] != 0.0));
    }

    #[test]
    fn embedding_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut ps = ParamSet::new();
        let emb = Embedding::new(&mut ps, &mut rng, "emb", 4, 3);
        let lin = Linear::new(&mut ps, &mut rng, "lin", 3, 2, true);
        let report = finite_difference_report(
            &|g, ps| {
                let x = emb.forward(g, ps, &[0, 1, 2, 3, 1]);
                let y = lin.forward(g, ps, x);
                let t = g.tanh(y);
                g.mean_all(t)
            },
            &mut ps,
            1e-5,
            0,
            0,
        );
        assert!(report.worst_rel < 1e-4, "{report:?}");
    }

    #[test]
    fn dropout_mask_scales_to_preserve_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mask = dropout_mask(&mut rng, &[100, 100], 0.5).unwrap();
        let mean = mask.sum() / mask.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "inverted scaling off: {mean}");
        for &m in mask.iter() {
            assert!(m == 0.0 || (m - 2.0).abs() < 1e-12);
        }
        assert!(dropout_mask(&mut rng, &[4], 0.0).is_none());
    }
}
