use std::cell::RefCell;
use std::collections::HashMap;

use super::{gemm, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Axis selector for slicing and concatenation of rank-2 tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Axis 0 (time for `T×C` activations).
    Rows,
    /// Axis 1 (channels for `T×C` activations).
    Cols,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Log,
    Sin,
    Square,
    Silu,
    Relu,
}

enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    ScaleRows(usize, Vec<f64>),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Unary(usize, Unary),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    SnakeBeta {
        x: usize,
        log_alpha: usize,
        log_beta: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        stride: usize,
        padding: usize,
    },
    GatherRows(usize, Vec<Option<usize>>),
    Slice {
        x: usize,
        axis: Axis,
        start: usize,
    },
    Concat(Vec<usize>, Axis),
    Rope(usize, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape holds a snapshot of the parameter values it was created from, so the
/// store may be mutated once the tape is dropped. Tapes are single-threaded.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: Vec<Tensor>,
    trainable: Vec<bool>,
    param_nodes: RefCell<HashMap<usize, usize>>,
    track: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.grads[node].as_ref().map(|g| (pid, g)))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::empty()
    }
}

impl Tape {
    /// A tape with no parameters, recording gradients for leaves.
    pub fn empty() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: Vec::new(),
            trainable: Vec::new(),
            param_nodes: RefCell::new(HashMap::new()),
            track: true,
        }
    }

    /// A training tape over `store`.
    pub fn new(store: &ParamStore) -> Self {
        Self {
            params: store.values(),
            trainable: store.trainable_mask(),
            ..Self::empty()
        }
    }

    /// A tape that never requires gradients.
    pub fn inference(store: &ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.track,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// The leaf for a parameter; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_nodes.borrow().get(&id.0) {
            return Var { tape: self, id: node };
        }
        let value = self.params[id.0].clone();
        let v = self.push(value, Op::Param, self.trainable[id.0]);
        self.param_nodes.borrow_mut().insert(id.0, v.id);
        v
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = loss.id + 1;
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = self
            .param_nodes
            .borrow()
            .iter()
            .map(|(&p, &node)| (ParamId(p), node))
            .filter(|&(_, node)| node < n)
            .collect::<Vec<_>>();
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| g.map(|g| Tensor::from_parts(node.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Gradient buffer for `id`, allocated on first use, or `None` when the node
/// does not require gradients.
fn buf<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut [f64]> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(
        grads[id]
            .get_or_insert_with(|| vec![0.0; nodes[id].value.numel()])
            .as_mut_slice(),
    )
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf | Op::Param => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(ga) = buf(nodes, grads, a) {
                gemm(m, n, k, g, n, 1, bv.data(), 1, n, ga, true);
            }
            if let Some(gb) = buf(nodes, grads, b) {
                gemm(k, m, n, av.data(), 1, k, g, n, 1, gb, true);
            }
        }
        &Op::MatMulNt(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
            if let Some(ga) = buf(nodes, grads, a) {
                gemm(m, n, k, g, n, 1, bv.data(), k, 1, ga, true);
            }
            if let Some(gb) = buf(nodes, grads, b) {
                gemm(n, m, k, g, 1, n, av.data(), k, 1, gb, true);
            }
        }
        &Op::Add(a, b) => {
            for p in [a, b] {
                if let Some(gp) = buf(nodes, grads, p) {
                    gp.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        &Op::Sub(a, b) => {
            if let Some(ga) = buf(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = buf(nodes, grads, b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        &Op::Mul(a, b) => {
            let bv = nodes[b].value.clone();
            let av = nodes[a].value.clone();
            if let Some(ga) = buf(nodes, grads, a) {
                for ((x, y), w) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *x += y * w;
                }
            }
            if let Some(gb) = buf(nodes, grads, b) {
                for ((x, y), w) in gb.iter_mut().zip(g).zip(av.data()) {
                    *x += y * w;
                }
            }
        }
        &Op::AddRow(a, b) => {
            if let Some(ga) = buf(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            let c = nodes[b].value.numel();
            if let Some(gb) = buf(nodes, grads, b) {
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        &Op::Scale(a, c) => {
            if let Some(ga) = buf(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::ScaleRows(a, w) => {
            let cols = out.cols();
            if let Some(ga) = buf(nodes, grads, *a) {
                for (i, (row, grow)) in ga.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                    row.iter_mut().zip(grow).for_each(|(x, y)| *x += w[i] * y);
                }
            }
        }
        &Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            if let Some(ga) = buf(nodes, grads, a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        &Op::Reshape(a) => {
            if let Some(ga) = buf(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = buf(nodes, grads, a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        &Op::Unary(a, kind) => {
            let av = nodes[a].value.clone();
            if let Some(ga) = buf(nodes, grads, a) {
                let xs = av.data();
                let ys = out.data();
                for i in 0..ga.len() {
                    let d = match kind {
                        Unary::Exp => ys[i],
                        Unary::Log => 1.0 / xs[i],
                        Unary::Sin => xs[i].cos(),
                        Unary::Square => 2.0 * xs[i],
                        Unary::Silu => {
                            let s = 1.0 / (1.0 + (-xs[i]).exp());
                            s * (1.0 + xs[i] * (1.0 - s))
                        }
                        Unary::Relu => {
                            if xs[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    ga[i] += g[i] * d;
                }
            }
        }
        &Op::Softmax(a) => {
            let cols = out.cols();
            if let Some(ga) = buf(nodes, grads, a) {
                for ((grow, yrow), gout) in ga
                    .chunks_mut(cols)
                    .zip(out.data().chunks(cols))
                    .zip(g.chunks(cols))
                {
                    let dot: f64 = yrow.iter().zip(gout).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        grow[j] += yrow[j] * (gout[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let xv = nodes[*x].value.clone();
            let gv = nodes[*gain].value.clone();
            let cols = xv.cols();
            let xhat: Vec<f64> = xv
                .data()
                .chunks(cols)
                .enumerate()
                .flat_map(|(i, row)| row.iter().map(move |v| (v - mean[i]) * rstd[i]))
                .collect();
            if let Some(gb) = buf(nodes, grads, *bias) {
                for row in g.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(acc, y)| *acc += y);
                }
            }
            if let Some(gg) = buf(nodes, grads, *gain) {
                for (row, xrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for j in 0..cols {
                        gg[j] += row[j] * xrow[j];
                    }
                }
            }
            if let Some(gx) = buf(nodes, grads, *x) {
                let gain = gv.data();
                for (i, (grow, xrow)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..cols {
                        let gh = grow[j] * gain[j];
                        m1 += gh;
                        m2 += gh * xrow[j];
                    }
                    m1 /= cols as f64;
                    m2 /= cols as f64;
                    for j in 0..cols {
                        let gh = grow[j] * gain[j];
                        gx[i * cols + j] += rstd[i] * (gh - m1 - xrow[j] * m2);
                    }
                }
            }
        }
        &Op::SnakeBeta {
            x,
            log_alpha,
            log_beta,
        } => {
            let xv = nodes[x].value.clone();
            let la = nodes[log_alpha].value.clone();
            let lb = nodes[log_beta].value.clone();
            let cols = la.numel();
            let alpha: Vec<f64> = la.data().iter().map(|v| v.exp()).collect();
            let beta: Vec<f64> = lb.data().iter().map(|v| v.exp()).collect();
            let mut d_la = vec![0.0; cols];
            let mut d_lb = vec![0.0; cols];
            let mut d_x = vec![0.0; xv.numel()];
            for (i, &xi) in xv.data().iter().enumerate() {
                let c = i % cols;
                let inv = 1.0 / (beta[c] + SNAKE_EPS);
                let s = (alpha[c] * xi).sin();
                let s2 = (2.0 * alpha[c] * xi).sin();
                d_x[i] = g[i] * (1.0 + alpha[c] * s2 * inv);
                d_la[c] += g[i] * alpha[c] * xi * s2 * inv;
                d_lb[c] -= g[i] * s * s * beta[c] * inv * inv;
            }
            for (p, d) in [(x, d_x), (log_alpha, d_la), (log_beta, d_lb)] {
                if let Some(gp) = buf(nodes, grads, p) {
                    gp.iter_mut().zip(&d).for_each(|(acc, v)| *acc += v);
                }
            }
        }
        &Op::Conv1d {
            x,
            w,
            stride,
            padding,
        } => {
            let xv = nodes[x].value.clone();
            let wv = nodes[w].value.clone();
            let (t_in, c_in) = (xv.shape()[0], xv.shape()[1]);
            let (c_out, width) = (wv.shape()[0], wv.shape()[2]);
            let t_out = out.shape()[0];
            let q = c_in * width;
            if nodes[w].requires_grad {
                let cols = im2col(xv.data(), t_in, c_in, width, stride, padding, t_out);
                if let Some(gw) = buf(nodes, grads, w) {
                    gemm(c_out, t_out, q, g, 1, c_out, &cols, q, 1, gw, true);
                }
            }
            if let Some(gx) = buf(nodes, grads, x) {
                let mut gcols = vec![0.0; t_out * q];
                gemm(t_out, c_out, q, g, c_out, 1, wv.data(), q, 1, &mut gcols, false);
                for t in 0..t_out {
                    for k in 0..width {
                        let src = (t * stride + k) as isize - padding as isize;
                        if src < 0 || src as usize >= t_in {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..c_in {
                            gx[src * c_in + c] += gcols[t * q + c * width + k];
                        }
                    }
                }
            }
        }
        Op::GatherRows(a, idx) => {
            let cols = out.cols();
            if let Some(ga) = buf(nodes, grads, *a) {
                for (r, src) in idx.iter().enumerate() {
                    if let Some(s) = *src {
                        for j in 0..cols {
                            ga[s * cols + j] += g[r * cols + j];
                        }
                    }
                }
            }
        }
        &Op::Slice { x, axis, start } => {
            let in_cols = nodes[x].value.cols();
            let out_cols = out.cols();
            if let Some(gx) = buf(nodes, grads, x) {
                match axis {
                    Axis::Rows => {
                        let off = start * in_cols;
                        gx[off..off + g.len()]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(acc, v)| *acc += v);
                    }
                    Axis::Cols => {
                        for (i, row) in g.chunks(out_cols).enumerate() {
                            let dst = &mut gx[i * in_cols + start..i * in_cols + start + out_cols];
                            dst.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                        }
                    }
                }
            }
        }
        Op::Concat(parts, axis) => {
            let total_cols = out.cols();
            let mut offset = 0;
            for &p in parts {
                let pv_numel = nodes[p].value.numel();
                let pc = nodes[p].value.cols();
                if let Some(gp) = buf(nodes, grads, p) {
                    match axis {
                        Axis::Rows => gp
                            .iter_mut()
                            .zip(&g[offset..offset + pv_numel])
                            .for_each(|(acc, v)| *acc += v),
                        Axis::Cols => {
                            for (i, row) in gp.chunks_mut(pc).enumerate() {
                                let src = &g[i * total_cols + offset..i * total_cols + offset + pc];
                                row.iter_mut().zip(src).for_each(|(acc, v)| *acc += v);
                            }
                        }
                    }
                }
                offset += match axis {
                    Axis::Rows => pv_numel,
                    Axis::Cols => pc,
                };
            }
        }
        Op::Rope(a, positions) => {
            let d = out.cols();
            if let Some(ga) = buf(nodes, grads, *a) {
                for (t, &pos) in positions.iter().enumerate() {
                    for i in 0..d / 2 {
                        let (s, c) = rope_angle(pos, i, d).sin_cos();
                        let g0 = g[t * d + 2 * i];
                        let g1 = g[t * d + 2 * i + 1];
                        ga[t * d + 2 * i] += g0 * c + g1 * s;
                        ga[t * d + 2 * i + 1] += -g0 * s + g1 * c;
                    }
                }
            }
        }
    }
}

pub(crate) const SNAKE_EPS: f64 = 1e-9;

fn rope_angle(pos: usize, pair: usize, dim: usize) -> f64 {
    let theta = 10000f64.powf(-2.0 * pair as f64 / dim as f64);
    pos as f64 * theta
}

fn im2col(
    x: &[f64],
    t_in: usize,
    c_in: usize,
    width: usize,
    stride: usize,
    padding: usize,
    t_out: usize,
) -> Vec<f64> {
    let q = c_in * width;
    let mut cols = vec![0.0; t_out * q];
    for t in 0..t_out {
        for k in 0..width {
            let src = (t * stride + k) as isize - padding as isize;
            if src < 0 || src as usize >= t_in {
                continue;
            }
            let src = src as usize;
            let row = &x[src * c_in..(src + 1) * c_in];
            for (c, &v) in row.iter().enumerate() {
                cols[t * q + c * width + k] = v;
            }
        }
    }
    cols
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'t> {
        let rg = self.tape.needs(parents);
        self.tape.push(value, op, rg)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables recorded on different tapes"
        );
    }

    /// A gradient-free copy of this value.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    pub fn matmul(&self, b: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&b);
        let (av, bv) = (self.value(), b.value());
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), k, 1, bv.data(), n, 1, &mut out, false);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(self.id, b.id),
            &[self.id, b.id],
        ))
    }

    /// `self · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, b: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&b);
        let (av, bv) = (self.value(), b.value());
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(Error::shape("matmul_nt", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), k, 1, bv.data(), 1, k, &mut out, false);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNt(self.id, b.id),
            &[self.id, b.id],
        ))
    }

    fn binary(&self, b: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_tape(&b);
        let (av, bv) = (self.value(), b.value());
        av.zip_map(&bv, f).map_err(|_| Error::shape(name, av.shape(), bv.shape()))
    }

    pub fn add(&self, b: Var<'t>) -> Result<Var<'t>> {
        let v = self.binary(b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(self.id, b.id), &[self.id, b.id]))
    }

    pub fn sub(&self, b: Var<'t>) -> Result<Var<'t>> {
        let v = self.binary(b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(self.id, b.id), &[self.id, b.id]))
    }

    pub fn mul(&self, b: Var<'t>) -> Result<Var<'t>> {
        let v = self.binary(b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(self.id, b.id), &[self.id, b.id]))
    }

    /// Adds a length-`C` vector to every row of a `R×C` tensor.
    pub fn add_row(&self, b: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&b);
        let (av, bv) = (self.value(), b.value());
        let c = av.cols();
        if av.rank() != 2 || bv.numel() != c {
            return Err(Error::shape("add_row", av.shape(), bv.shape()));
        }
        let mut out = av.into_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(bv.data()).for_each(|(x, y)| *x += y);
        }
        let shape = self.shape();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::AddRow(self.id, b.id),
            &[self.id, b.id],
        ))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().scale(c);
        self.push(v, Op::Scale(self.id, c), &[self.id])
    }

    /// Multiplies row `i` by the constant `weights[i]` (masking).
    pub fn scale_rows(&self, weights: &[f64]) -> Result<Var<'t>> {
        let av = self.value();
        if weights.len() != av.rows() {
            return Err(Error::shape("scale_rows", av.shape(), &[weights.len()]));
        }
        let c = av.cols();
        let shape = av.shape().to_vec();
        let mut out = av.into_vec();
        for (row, &w) in out.chunks_mut(c).zip(weights) {
            row.iter_mut().for_each(|x| *x *= w);
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ScaleRows(self.id, weights.to_vec()),
            &[self.id],
        ))
    }

    /// Zeroes rows where `mask` is false.
    pub fn mask_rows(&self, mask: &[bool]) -> Result<Var<'t>> {
        let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        self.scale_rows(&w)
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let av = self.value();
        if av.rank() != 2 {
            return Err(Error::shape("transpose", av.shape(), &[]));
        }
        Ok(self.push(av.transpose(), Op::Transpose(self.id), &[self.id]))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(self.id), &[self.id]))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.push(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    fn unary(&self, kind: Unary) -> Var<'t> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sin => f64::sin,
            Unary::Square => |x| x * x,
            Unary::Silu => |x| x / (1.0 + (-x).exp()),
            Unary::Relu => |x| x.max(0.0),
        };
        let v = self.value().map(f);
        self.push(v, Op::Unary(self.id, kind), &[self.id])
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(Unary::Log)
    }

    pub fn sin(&self) -> Var<'t> {
        self.unary(Unary::Sin)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn silu(&self) -> Var<'t> {
        self.unary(Unary::Silu)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    /// Row-wise softmax. Columns with `key_mask[j] == false` get weight 0.
    pub fn softmax_rows(&self, key_mask: Option<&[bool]>) -> Result<Var<'t>> {
        let av = self.value();
        let cols = av.cols();
        if let Some(m) = key_mask {
            if m.len() != cols {
                return Err(Error::shape("softmax_rows", av.shape(), &[m.len()]));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::invalid("softmax mask has no valid entries"));
            }
        }
        let keep = |j: usize| key_mask.is_none_or(|m| m[j]);
        let mut out = vec![0.0; av.numel()];
        for (orow, row) in out.chunks_mut(cols).zip(av.data().chunks(cols)) {
            let max = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..cols {
                if keep(j) {
                    orow[j] = (row[j] - max).exp();
                    z += orow[j];
                }
            }
            orow.iter_mut().for_each(|v| *v /= z);
        }
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(self.id), &[self.id]))
    }

    /// Normalizes each row over its columns, then applies per-column gain and bias.
    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let xv = self.value();
        let cols = xv.cols();
        if xv.rank() != 2 || gain.value().numel() != cols || bias.value().numel() != cols {
            return Err(Error::shape("layer_norm", xv.shape(), &gain.shape()));
        }
        let gv = gain.value();
        let bv = bias.value();
        let rows = xv.rows();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(cols) {
            let m = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                out.push((row[j] - m) * r * gv.data()[j] + bv.data()[j]);
            }
            mean.push(m);
            rstd.push(r);
        }
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                mean,
                rstd,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// `x + sin²(αx)/(β+ε)` per column, with `α = exp(log_alpha)`, `β = exp(log_beta)`.
    pub fn snakebeta(&self, log_alpha: Var<'t>, log_beta: Var<'t>) -> Result<Var<'t>> {
        let xv = self.value();
        let cols = xv.cols();
        let la = log_alpha.value();
        let lb = log_beta.value();
        if la.numel() != cols || lb.numel() != cols {
            return Err(Error::shape("snakebeta", xv.shape(), la.shape()));
        }
        let alpha: Vec<f64> = la.data().iter().map(|v| v.exp()).collect();
        let beta: Vec<f64> = lb.data().iter().map(|v| v.exp()).collect();
        let out: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = i % cols;
                let s = (alpha[c] * x).sin();
                x + s * s / (beta[c] + SNAKE_EPS)
            })
            .collect();
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::SnakeBeta {
                x: self.id,
                log_alpha: log_alpha.id,
                log_beta: log_beta.id,
            },
            &[self.id, log_alpha.id, log_beta.id],
        ))
    }

    /// 1-D cross-correlation on a time-major `T×C_in` input with a
    /// `C_out×C_in×W` kernel, producing `T'×C_out`.
    pub fn conv1d(&self, kernel: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.same_tape(&kernel);
        let xv = self.value();
        let wv = kernel.value();
        if xv.rank() != 2 || wv.rank() != 3 || wv.shape()[1] != xv.shape()[1] {
            return Err(Error::shape("conv1d", xv.shape(), wv.shape()));
        }
        let (t_in, c_in) = (xv.shape()[0], xv.shape()[1]);
        let (c_out, width) = (wv.shape()[0], wv.shape()[2]);
        if width == 0 || stride == 0 {
            return Err(Error::invalid("conv1d needs width >= 1 and stride >= 1"));
        }
        let span = t_in + 2 * padding;
        if span < width {
            return Err(Error::invalid(format!(
                "conv1d output length is nonpositive (T={t_in}, padding={padding}, width={width})"
            )));
        }
        let t_out = (span - width) / stride + 1;
        let q = c_in * width;
        let cols = im2col(xv.data(), t_in, c_in, width, stride, padding, t_out);
        let mut out = vec![0.0; t_out * c_out];
        gemm(t_out, q, c_out, &cols, q, 1, wv.data(), 1, q, &mut out, false);
        Ok(self.push(
            Tensor::from_parts(vec![t_out, c_out], out),
            Op::Conv1d {
                x: self.id,
                w: kernel.id,
                stride,
                padding,
            },
            &[self.id, kernel.id],
        ))
    }

    /// Output row `r` is input row `idx[r]`, or zeros for `None`.
    pub fn gather_rows(&self, idx: Vec<Option<usize>>) -> Result<Var<'t>> {
        let av = self.value();
        let rows = av.rows();
        let cols = av.cols();
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("row index {bad} out of range for {rows} rows")));
        }
        let mut out = vec![0.0; idx.len() * cols];
        for (r, src) in idx.iter().enumerate() {
            if let Some(s) = *src {
                out[r * cols..(r + 1) * cols].copy_from_slice(av.row(s));
            }
        }
        let mut shape = av.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::invalid("gather_rows on a scalar"));
        }
        shape[0] = idx.len();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows(self.id, idx),
            &[self.id],
        ))
    }

    pub fn slice(&self, axis: Axis, start: usize, end: usize) -> Result<Var<'t>> {
        let av = self.value();
        let extent = match axis {
            Axis::Rows => av.rows(),
            Axis::Cols => {
                if av.rank() != 2 {
                    return Err(Error::shape("slice", av.shape(), &[]));
                }
                av.cols()
            }
        };
        if start > end || end > extent {
            return Err(Error::invalid(format!(
                "slice {start}..{end} out of range for extent {extent}"
            )));
        }
        let v = match axis {
            Axis::Rows => av.slice_rows(start, end),
            Axis::Cols => av.slice_cols(start, end),
        };
        Ok(self.push(
            v,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    /// Concatenates `parts` along `axis`.
    pub fn concat(parts: &[Var<'t>], axis: Axis) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let v = match axis {
            Axis::Rows => {
                let cols = values[0].cols();
                let tail = values[0].shape()[1..].to_vec();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in &values {
                    if p.shape()[1..] != tail[..] || p.cols() != cols {
                        return Err(Error::shape("concat", values[0].shape(), p.shape()));
                    }
                    data.extend_from_slice(p.data());
                    rows += p.rows();
                }
                let mut shape = vec![rows];
                shape.extend(tail);
                Tensor::from_parts(shape, data)
            }
            Axis::Cols => {
                let refs: Vec<&Tensor> = values.iter().collect();
                Tensor::concat_cols(&refs)?
            }
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.push(v, Op::Concat(ids.clone(), axis), &ids))
    }

    /// Rotary position embedding: rotates column pairs `(2i, 2i+1)` of row `t`
    /// by `positions[t]·10000^(-2i/D)`.
    pub fn rope(&self, positions: &[usize]) -> Result<Var<'t>> {
        let av = self.value();
        let d = av.cols();
        if av.rank() != 2 || d % 2 != 0 {
            return Err(Error::invalid(format!(
                "rope needs an even channel count, got shape {:?}",
                av.shape()
            )));
        }
        if positions.len() != av.rows() {
            return Err(Error::shape("rope", av.shape(), &[positions.len()]));
        }
        let mut out = av.clone().into_vec();
        for (t, &pos) in positions.iter().enumerate() {
            for i in 0..d / 2 {
                let (s, c) = rope_angle(pos, i, d).sin_cos();
                let x0 = av.data()[t * d + 2 * i];
                let x1 = av.data()[t * d + 2 * i + 1];
                out[t * d + 2 * i] = x0 * c - x1 * s;
                out[t * d + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
        Ok(self.push(
            Tensor::from_parts(av.shape().to_vec(), out),
            Op::Rope(self.id, positions.to_vec()),
            &[self.id],
        ))
    }
}
