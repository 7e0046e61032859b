//! Static computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built once (shapes are checked at construction), then
//! evaluated with [`Graph::forward`] and differentiated with
//! [`Graph::backward`]. Leaf values can be overwritten and the graph
//! re-evaluated, which is what the finite-difference oracle relies on.
//! Values and gradients are held in `f64` regardless of the `f32`
//! storage of the tensors that seeded them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Activation, NormKind, Tensor, PROB_FLOOR};

/// Relative disagreement between the `h` and `h/2` difference quotients
/// below which the finite-difference estimate is accepted.
const SETTLE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input { requires_grad: bool },
    Param,
    Linear { x: NodeId, weight: NodeId, bias: Option<NodeId> },
    BatchMatMul { a: NodeId, b: NodeId },
    TransposeLast2 { x: NodeId },
    Reshape { x: NodeId },
    AppendRow { x: NodeId, row: NodeId },
    AddConst { x: NodeId, constant: Vec<f64> },
    Scale { x: NodeId, factor: f64 },
    Normalize {
        x: NodeId,
        kind: NormKind,
        gain: NodeId,
        shift: Option<NodeId>,
        eps: f64,
    },
    Activate { x: NodeId, kind: Activation },
    Softmax { x: NodeId },
    SelectRow { x: NodeId, index: usize },
    CrossEntropy { probs: NodeId, labels: Vec<usize> },
    Sum { x: NodeId },
    SumSquares { x: NodeId },
}

impl Op {
    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input { .. } | Op::Param)
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    /// Per-row inverse scale cached by `Normalize`.
    aux: Vec<f64>,
}

impl Node {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub checked: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    grads: Vec<Option<Vec<f64>>>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> NodeId {
        if !op.is_leaf() {
            self.evaluated = false;
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            aux: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.shape_of(id)
    }

    pub fn input(&mut self, tensor: &Tensor, requires_grad: bool) -> NodeId {
        self.push(
            Op::Input { requires_grad },
            tensor.shape().to_vec(),
            tensor.to_f64(),
        )
    }

    pub fn input_f64(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("input", &shape, &[data.len()]));
        }
        Ok(self.push(Op::Input { requires_grad }, shape, data))
    }

    pub fn param(&mut self, name: &str, tensor: &Tensor) -> NodeId {
        let id = self.push(Op::Param, tensor.shape().to_vec(), tensor.to_f64());
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape_of(x).to_vec();
        let ws = self.shape_of(weight).to_vec();
        let (m, n) = match ws.as_slice() {
            [m, n] => (*m, *n),
            _ => return Err(Error::dim("linear", &xs, &ws)),
        };
        if xs.last() != Some(&m) {
            return Err(Error::dim("linear", &xs, &ws));
        }
        if let Some(b) = bias {
            if self.shape_of(b) != [n] {
                return Err(Error::dim("linear", &ws, self.shape_of(b)));
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Op::Linear { x, weight, bias }, shape, Vec::new()))
    }

    /// `(B, T, K) x (B, K, U) -> (B, T, U)`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        match (sa.as_slice(), sb.as_slice()) {
            ([ba, t, k], [bb, k2, u]) if ba == bb && k == k2 => {
                let shape = vec![*ba, *t, *u];
                Ok(self.push(Op::BatchMatMul { a, b }, shape, Vec::new()))
            }
            _ => Err(Error::dim("batch_matmul", &sa, &sb)),
        }
    }

    pub fn transpose_last2(&mut self, x: NodeId) -> Result<NodeId> {
        let mut shape = self.shape_of(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::dim("transpose_last2", &shape, &[]));
        }
        shape.swap(r - 1, r - 2);
        Ok(self.push(Op::TransposeLast2 { x }, shape, Vec::new()))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let from = self.shape_of(x);
        if from.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::dim("reshape", from, &shape));
        }
        Ok(self.push(Op::Reshape { x }, shape, Vec::new()))
    }

    /// Appends `row` (shape `[K]`) after the last position of `x` (`[B, T, K]`).
    pub fn append_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let xs = self.shape_of(x).to_vec();
        let rs = self.shape_of(row).to_vec();
        match (xs.as_slice(), rs.as_slice()) {
            ([b, t, k], [k2]) if k == k2 => {
                let shape = vec![*b, t + 1, *k];
                Ok(self.push(Op::AppendRow { x, row }, shape, Vec::new()))
            }
            _ => Err(Error::dim("append_row", &xs, &rs)),
        }
    }

    /// Adds a constant broadcast over the leading axes of `x`.
    pub fn add_const(&mut self, x: NodeId, constant: &Tensor) -> Result<NodeId> {
        let xs = self.shape_of(x).to_vec();
        let cs = constant.shape();
        if cs.len() > xs.len() || xs[xs.len() - cs.len()..] != *cs {
            return Err(Error::dim("add_const", &xs, cs));
        }
        Ok(self.push(
            Op::AddConst {
                x,
                constant: constant.to_f64(),
            },
            xs,
            Vec::new(),
        ))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Scale { x, factor }, shape, Vec::new())
    }

    pub fn normalize(
        &mut self,
        x: NodeId,
        kind: NormKind,
        gain: NodeId,
        shift: Option<NodeId>,
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.shape_of(x).to_vec();
        let m = xs.last().copied().unwrap_or(0);
        if m == 0 {
            return Err(Error::EmptyAxis { op: "normalize" });
        }
        if eps <= 0.0 {
            return Err(Error::Input(format!("normalize epsilon must be positive, got {eps}")));
        }
        if self.shape_of(gain) != [m] {
            return Err(Error::dim("normalize", &xs, self.shape_of(gain)));
        }
        if let Some(s) = shift {
            if self.shape_of(s) != [m] {
                return Err(Error::dim("normalize", &xs, self.shape_of(s)));
            }
        }
        Ok(self.push(
            Op::Normalize {
                x,
                kind,
                gain,
                shift,
                eps,
            },
            xs,
            Vec::new(),
        ))
    }

    pub fn activate(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Activate { x, kind }, shape, Vec::new())
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(x).to_vec();
        if shape.last().copied().unwrap_or(0) == 0 {
            return Err(Error::EmptyAxis { op: "softmax" });
        }
        Ok(self.push(Op::Softmax { x }, shape, Vec::new()))
    }

    /// `[B, T, K] -> [B, K]`, taking position `index` along `T`.
    pub fn select_row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xs = self.shape_of(x).to_vec();
        match xs.as_slice() {
            [b, t, k] => {
                if index >= *t {
                    return Err(Error::Index {
                        what: "sequence positions",
                        index,
                        len: *t,
                    });
                }
                let shape = vec![*b, *k];
                Ok(self.push(Op::SelectRow { x, index }, shape, Vec::new()))
            }
            _ => Err(Error::dim("select_row", &xs, &[])),
        }
    }

    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ps = self.shape_of(probs).to_vec();
        let (b, c) = match ps.as_slice() {
            [b, c] => (*b, *c),
            _ => return Err(Error::dim("cross_entropy", &ps, &[labels.len()])),
        };
        if b != labels.len() || b == 0 {
            return Err(Error::dim("cross_entropy", &ps, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                what: "class labels",
                index: bad,
                len: c,
            });
        }
        Ok(self.push(
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            Vec::new(),
            Vec::new(),
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum { x }, Vec::new(), Vec::new())
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumSquares { x }, Vec::new(), Vec::new())
    }

    /// Overwrites a leaf value; the graph must be re-run afterwards.
    pub fn set_leaf(&mut self, id: NodeId, data: &[f64]) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !node.op.is_leaf() {
            return Err(Error::State(format!("node {} is not a leaf", id.0)));
        }
        if node.value.len() != data.len() {
            return Err(Error::dim("set_leaf", &node.shape, &[data.len()]));
        }
        node.value.copy_from_slice(data);
        self.evaluated = false;
        self.grads.clear();
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> Result<&[f64]> {
        let node = &self.nodes[id.0];
        if !node.op.is_leaf() && !self.evaluated {
            return Err(Error::State("forward has not been run".into()));
        }
        Ok(&node.value)
    }

    pub fn tensor(&self, id: NodeId) -> Result<Tensor> {
        Ok(Tensor::from_f64(self.nodes[id.0].shape.clone(), self.value(id)?))
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id)?;
        if v.len() != 1 {
            return Err(Error::dim("scalar", self.shape_of(id), &[]));
        }
        Ok(v[0])
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].op.is_leaf() {
                continue;
            }
            let (value, aux) = self.eval_node(i);
            let node = &mut self.nodes[i];
            node.value = value;
            node.aux = aux;
        }
        self.evaluated = true;
        self.grads.clear();
        Ok(())
    }

    fn eval_node(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        let node = &self.nodes[i];
        let val = |id: NodeId| self.nodes[id.0].value.as_slice();
        let shp = |id: NodeId| self.nodes[id.0].shape.as_slice();
        let none = Vec::new();
        match &node.op {
            Op::Input { .. } | Op::Param => unreachable!(),
            Op::Linear { x, weight, bias } => {
                let ws = shp(*weight);
                let (m, n) = (ws[0], ws[1]);
                let rows = val(*x).len() / m;
                let out = kernels::linear(val(*x), rows, m, val(*weight), n, bias.map(val));
                (out, none)
            }
            Op::BatchMatMul { a, b } => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (bn, t, k, u) = (sa[0], sa[1], sa[2], sb[2]);
                let mut out = vec![0.0; bn * t * u];
                let (av, bv) = (val(*a), val(*b));
                for bi in 0..bn {
                    let ab = &av[bi * t * k..(bi + 1) * t * k];
                    let bb = &bv[bi * k * u..(bi + 1) * k * u];
                    let ob = kernels::linear(ab, t, k, bb, u, None);
                    out[bi * t * u..(bi + 1) * t * u].copy_from_slice(&ob);
                }
                (out, none)
            }
            Op::TransposeLast2 { x } => (transpose_last2(val(*x), shp(*x)), none),
            Op::Reshape { x } => (val(*x).to_vec(), none),
            Op::AppendRow { x, row } => {
                let s = shp(*x);
                let (b, t, k) = (s[0], s[1], s[2]);
                let xv = val(*x);
                let mut out = Vec::with_capacity(b * (t + 1) * k);
                for bi in 0..b {
                    out.extend_from_slice(&xv[bi * t * k..(bi + 1) * t * k]);
                    out.extend_from_slice(val(*row));
                }
                (out, none)
            }
            Op::AddConst { x, constant } => {
                let mut out = val(*x).to_vec();
                for chunk in out.chunks_mut(constant.len()) {
                    for (o, c) in chunk.iter_mut().zip(constant) {
                        *o += c;
                    }
                }
                (out, none)
            }
            Op::Scale { x, factor } => (val(*x).iter().map(|v| v * factor).collect(), none),
            Op::Normalize {
                x,
                kind,
                gain,
                shift,
                eps,
            } => {
                let m = *node.shape.last().unwrap();
                let xv = val(*x);
                kernels::normalize(xv, xv.len() / m, m, *kind, val(*gain), shift.map(val), *eps)
            }
            Op::Activate { x, kind } => (
                val(*x).iter().map(|&v| kernels::activate(v, *kind)).collect(),
                none,
            ),
            Op::Softmax { x } => (kernels::softmax(val(*x), *node.shape.last().unwrap()), none),
            Op::SelectRow { x, index } => {
                let s = shp(*x);
                let (b, t, k) = (s[0], s[1], s[2]);
                let xv = val(*x);
                let mut out = Vec::with_capacity(b * k);
                for bi in 0..b {
                    let start = (bi * t + index) * k;
                    out.extend_from_slice(&xv[start..start + k]);
                }
                (out, none)
            }
            Op::CrossEntropy { probs, labels } => {
                let c = shp(*probs)[1];
                (vec![kernels::cross_entropy(val(*probs), c, labels)], none)
            }
            Op::Sum { x } => (vec![val(*x).iter().sum()], none),
            Op::SumSquares { x } => (vec![val(*x).iter().map(|v| v * v).sum()], none),
        }
    }

    /// Back-propagates from a scalar node. Afterwards every parameter and
    /// every input created with `requires_grad` holds a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.evaluated {
            return Err(Error::State("backward called before forward".into()));
        }
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0, self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].op.is_leaf() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let wants = match node.op {
                Op::Param => true,
                Op::Input { requires_grad } => requires_grad,
                _ => false,
            };
            if wants && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |id: NodeId| self.nodes[id.0].value.as_slice();
        let shp = |id: NodeId| self.nodes[id.0].shape.as_slice();
        let mut acc = |id: NodeId, contribution: Vec<f64>| match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        };
        match &node.op {
            Op::Input { .. } | Op::Param => {}
            Op::Linear { x, weight, bias } => {
                let ws = shp(*weight);
                let (m, n) = (ws[0], ws[1]);
                let xv = val(*x);
                let wv = val(*weight);
                let rows = xv.len() / m;
                let mut dx = vec![0.0; rows * m];
                let mut dw = vec![0.0; m * n];
                let mut db = vec![0.0; n];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let xr = &xv[r * m..(r + 1) * m];
                    let dxr = &mut dx[r * m..(r + 1) * m];
                    for i in 0..m {
                        let wr = &wv[i * n..(i + 1) * n];
                        dxr[i] = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let xi = xr[i];
                        if xi != 0.0 {
                            for (d, gj) in dw[i * n..(i + 1) * n].iter_mut().zip(gr) {
                                *d += xi * gj;
                            }
                        }
                    }
                    for (d, gj) in db.iter_mut().zip(gr) {
                        *d += gj;
                    }
                }
                acc(*x, dx);
                acc(*weight, dw);
                if let Some(b) = bias {
                    acc(*b, db);
                }
            }
            Op::BatchMatMul { a, b } => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (bn, t, k, u) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (val(*a), val(*b));
                let mut da = vec![0.0; av.len()];
                let mut dbv = vec![0.0; bv.len()];
                for bi in 0..bn {
                    let ab = &av[bi * t * k..(bi + 1) * t * k];
                    let bb = &bv[bi * k * u..(bi + 1) * k * u];
                    let gb = &g[bi * t * u..(bi + 1) * t * u];
                    for r in 0..t {
                        for c in 0..u {
                            let gv = gb[r * u + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for j in 0..k {
                                da[bi * t * k + r * k + j] += gv * bb[j * u + c];
                                dbv[bi * k * u + j * u + c] += gv * ab[r * k + j];
                            }
                        }
                    }
                }
                acc(*a, da);
                acc(*b, dbv);
            }
            Op::TransposeLast2 { x } => acc(*x, transpose_last2(g, &node.shape)),
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::AppendRow { x, row } => {
                let s = shp(*x);
                let (b, t, k) = (s[0], s[1], s[2]);
                let mut dx = Vec::with_capacity(b * t * k);
                let mut drow = vec![0.0; k];
                for bi in 0..b {
                    let base = bi * (t + 1) * k;
                    dx.extend_from_slice(&g[base..base + t * k]);
                    for (d, gv) in drow.iter_mut().zip(&g[base + t * k..base + (t + 1) * k]) {
                        *d += gv;
                    }
                }
                acc(*x, dx);
                acc(*row, drow);
            }
            Op::AddConst { x, .. } => acc(*x, g.to_vec()),
            Op::Scale { x, factor } => acc(*x, g.iter().map(|v| v * factor).collect()),
            Op::Normalize {
                x,
                kind,
                gain,
                shift,
                ..
            } => {
                let m = *node.shape.last().unwrap();
                let xv = val(*x);
                let gv = val(*gain);
                let rows = xv.len() / m;
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; m];
                let mut dshift = vec![0.0; m];
                let mut xhat = vec![0.0; m];
                let mut dxhat = vec![0.0; m];
                for r in 0..rows {
                    let xr = &xv[r * m..(r + 1) * m];
                    let gr = &g[r * m..(r + 1) * m];
                    let inv = node.aux[r];
                    let mean = match kind {
                        NormKind::LayerNorm => xr.iter().sum::<f64>() / m as f64,
                        NormKind::RmsNorm => 0.0,
                    };
                    for j in 0..m {
                        xhat[j] = (xr[j] - mean) * inv;
                        dxhat[j] = gr[j] * gv[j];
                        dgain[j] += gr[j] * xhat[j];
                        dshift[j] += gr[j];
                    }
                    let mean_dxhat = dxhat.iter().sum::<f64>() / m as f64;
                    let mean_dot = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    let dxr = &mut dx[r * m..(r + 1) * m];
                    for j in 0..m {
                        dxr[j] = match kind {
                            NormKind::LayerNorm => inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dot),
                            NormKind::RmsNorm => inv * (dxhat[j] - xhat[j] * mean_dot),
                        };
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                if let Some(s) = shift {
                    acc(*s, dshift);
                }
            }
            Op::Activate { x, kind } => {
                let dx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| gv * kernels::activate_grad(v, *kind))
                    .collect();
                acc(*x, dx);
            }
            Op::Softmax { x } => {
                let c = *node.shape.last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((yr, gr), dr) in node.value.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, y), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (gv - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::SelectRow { x, index } => {
                let s = shp(*x);
                let (b, t, k) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; b * t * k];
                for bi in 0..b {
                    let start = (bi * t + index) * k;
                    dx[start..start + k].copy_from_slice(&g[bi * k..(bi + 1) * k]);
                }
                acc(*x, dx);
            }
            Op::CrossEntropy { probs, labels } => {
                let c = shp(*probs)[1];
                let pv = val(*probs);
                let scale = g[0] / labels.len() as f64;
                let mut dp = vec![0.0; pv.len()];
                for (r, &label) in labels.iter().enumerate() {
                    let p = pv[r * c + label];
                    if p > PROB_FLOOR {
                        dp[r * c + label] = -scale / p;
                    }
                }
                acc(*probs, dp);
            }
            Op::Sum { x } => acc(*x, vec![g[0]; self.nodes[x.0].numel()]),
            Op::SumSquares { x } => acc(*x, val(*x).iter().map(|v| 2.0 * v * g[0]).collect()),
        }
    }

    /// Sign pattern of every ReLU input, used to detect kink crossings.
    fn relu_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            if let Op::Activate {
                x,
                kind: Activation::Relu,
            } = node.op
            {
                pattern.extend(self.nodes[x.0].value.iter().map(|&v| v > 0.0));
            }
        }
        pattern
    }

    /// `(f(x + h e_idx) - f(x - h e_idx)) / 2h` and whether both probes kept
    /// the ReLU sign pattern.
    fn central_difference(
        &mut self,
        id: NodeId,
        original: &[f64],
        idx: usize,
        h: f64,
        loss: NodeId,
        base_pattern: &[bool],
    ) -> Result<(f64, bool)> {
        let mut probe = original.to_vec();
        probe[idx] = original[idx] + h;
        self.set_leaf(id, &probe)?;
        self.forward()?;
        let plus = self.scalar(loss)?;
        let plus_ok = self.relu_pattern() == base_pattern;
        probe[idx] = original[idx] - h;
        self.set_leaf(id, &probe)?;
        self.forward()?;
        let minus = self.scalar(loss)?;
        let minus_ok = self.relu_pattern() == base_pattern;
        Ok(((plus - minus) / (2.0 * h), plus_ok && minus_ok))
    }

    /// Compares analytic parameter gradients of `loss` against central
    /// differences. Returns the max of `|analytic - numeric| / max(1, |numeric|)`.
    ///
    /// Each entry is estimated at steps `h` and `h/2`. The step is shrunk by
    /// a factor of four (at most eight times) while a probe flips the sign
    /// of some ReLU input or the two estimates disagree, which happens where
    /// a normalization with near-zero variance makes the loss stiff.
    pub fn grad_check_oracle(&mut self, loss: NodeId, step: f64) -> Result<GradCheckReport> {
        let ids: Vec<(String, NodeId)> = self.params.iter().map(|(k, &v)| (k.clone(), v)).collect();
        self.grad_check_nodes(loss, step, &ids)
    }

    /// Same as [`Graph::grad_check_oracle`] but over arbitrary leaves
    /// (e.g. inputs created with `requires_grad`).
    pub fn grad_check_nodes(
        &mut self,
        loss: NodeId,
        step: f64,
        leaves: &[(String, NodeId)],
    ) -> Result<GradCheckReport> {
        self.forward()?;
        self.backward(loss)?;
        let analytic: Vec<Vec<f64>> = leaves
            .iter()
            .map(|(_, id)| {
                self.grad(*id)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::State(format!("leaf {} has no gradient", id.0)))
            })
            .collect::<Result<_>>()?;
        let base_pattern = self.relu_pattern();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_param: None,
            worst_index: 0,
            checked: 0,
        };
        for ((name, id), grad) in leaves.iter().zip(&analytic) {
            let original = self.nodes[id.0].value.clone();
            for idx in 0..original.len() {
                let mut h = step;
                let mut numeric = 0.0;
                for _ in 0..=8 {
                    let (wide, wide_ok) = self.central_difference(*id, &original, idx, h, loss, &base_pattern)?;
                    let (narrow, narrow_ok) =
                        self.central_difference(*id, &original, idx, h / 2.0, loss, &base_pattern)?;
                    // Richardson combination cancels the h^2 error term
                    numeric = (4.0 * narrow - wide) / 3.0;
                    let settled = (wide - narrow).abs() <= SETTLE_TOL * narrow.abs().max(1.0);
                    if wide_ok && narrow_ok && settled {
                        break;
                    }
                    h /= 4.0;
                }
                let err = (grad[idx] - numeric).abs() / numeric.abs().max(1.0);
                report.checked += 1;
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_param = Some(name.clone());
                    report.worst_index = idx;
                }
            }
            self.set_leaf(*id, &original)?;
        }
        self.forward()?;
        self.backward(loss)?;
        Ok(report)
    }
}

fn transpose_last2(v: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let (p, q) = (shape[r - 2], shape[r - 1]);
    let mut out = vec![0.0; v.len()];
    for (src, dst) in v.chunks(p * q).zip(out.chunks_mut(p * q)) {
        for i in 0..p {
            for j in 0..q {
                dst[j * p + i] = src[i * q + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(vec![2, 3]), true);
        let s = g.sum(x);
        g.forward().unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(vec![2]), true);
        let s = g.sum(x);
        assert!(matches!(g.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn half_squared_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.input(&random(&mut rng, vec![1, 5]), false);
        let w = g.param("w", &random(&mut rng, vec![5, 4]));
        let y = g.linear(x, w, None).unwrap();
        let sq = g.sum_squares(y);
        let loss = g.scale(sq, 0.5);
        let report = g.grad_check_oracle(loss, 1e-3).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn linear_only_graph_is_near_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.input(&random(&mut rng, vec![3, 4]), false);
        let w = g.param("w", &random(&mut rng, vec![4, 2]));
        let b = g.param("b", &random(&mut rng, vec![2]));
        let y = g.linear(x, w, Some(b)).unwrap();
        let loss = g.sum(y);
        let report = g.grad_check_oracle(loss, 1e-3).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn relu_graph_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let mut xt = random(&mut rng, vec![4, 3]);
        // keep every coordinate away from exactly zero
        for v in xt.data_mut() {
            if v.abs() < 1e-2 {
                *v += 0.05;
            }
        }
        let x = g.input(&xt, false);
        let w = g.param("w", &random(&mut rng, vec![3, 6]));
        let h = g.linear(x, w, None).unwrap();
        let a = g.activate(h, Activation::Relu);
        let w2 = g.param("w2", &random(&mut rng, vec![6, 2]));
        let o = g.linear(a, w2, None).unwrap();
        let p = g.softmax(o).unwrap();
        let loss = g.cross_entropy(p, &[0, 1, 1, 0]).unwrap();
        let report = g.grad_check_oracle(loss, 1e-3).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.input(&random(&mut rng, vec![2, 3, 4]), true);
        let row = g.param("row", &random(&mut rng, vec![4]));
        let gain = g.param("gain", &random(&mut rng, vec![4]));
        let shift = g.param("shift", &random(&mut rng, vec![4]));
        let app = g.append_row(x, row).unwrap();
        let pe = random(&mut rng, vec![4, 4]);
        let pos = g.add_const(app, &pe).unwrap();
        let n = g.normalize(pos, NormKind::LayerNorm, gain, Some(shift), 1e-5).unwrap();
        let t = g.transpose_last2(n).unwrap();
        let s = g.batch_matmul(n, t).unwrap();
        let s = g.scale(s, 0.5);
        let a = g.softmax(s).unwrap();
        let ctx = g.batch_matmul(a, n).unwrap();
        let sel = g.select_row(ctx, 3).unwrap();
        let sw = g.activate(sel, Activation::Swish);
        let gain2 = g.param("gain2", &random(&mut rng, vec![4]));
        let rms = g.normalize(sw, NormKind::RmsNorm, gain2, None, 1e-5).unwrap();
        let flat = g.reshape(rms, vec![8]).unwrap();
        let loss = g.sum_squares(flat);
        let report = g.grad_check_oracle(loss, 1e-3).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        let inputs = vec![("x".to_string(), x)];
        let report = g.grad_check_nodes(loss, 1e-3, &inputs).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn unused_params_get_zero_gradients() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(vec![1.0, 2.0]), false);
        let unused = g.param("unused", &Tensor::zeros(vec![3]));
        let s = g.sum(x);
        g.forward().unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn construction_rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(vec![2, 3]), false);
        let w = g.param("w", &Tensor::zeros(vec![4, 2]));
        assert!(matches!(g.linear(x, w, None), Err(Error::Dimension { .. })));
    }
}
