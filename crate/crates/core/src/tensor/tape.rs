use std::collections::BTreeMap;

use super::{dot, Tensor};
use crate::error::{Error, Result};

/// Variance floor inside layer normalisation.
const LN_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Caller-chosen identifier for a trainable parameter leaf.
pub type ParamId = usize;

/// Gradient of a scalar loss with respect to every parameter registered on
/// the tape. Parameters the loss does not depend on map to zeros.
pub type GradientMap = BTreeMap<ParamId, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Multiply,
    Concat,
    Relu,
    Tanh,
    Softmax,
    LayerNorm,
    Mean,
    Sum,
    L2Norm,
    L2Normalize,
    Scale,
    Transpose,
    Reshape,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    Add(Var, Var),
    Multiply(Var, Var),
    Concat(Vec<Var>),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm(Var),
    Mean(Var),
    Sum(Var),
    L2Norm(Var),
    L2Normalize(Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var, Vec<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Multiply(..) => OpKind::Multiply,
            Op::Concat(_) => OpKind::Concat,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm(_) => OpKind::LayerNorm,
            Op::Mean(_) => OpKind::Mean,
            Op::Sum(_) => OpKind::Sum,
            Op::L2Norm(_) => OpKind::L2Norm,
            Op::L2Normalize(_) => OpKind::L2Normalize,
            Op::Scale(..) => OpKind::Scale,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Multiply(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
            Op::Relu(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::LayerNorm(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::L2Norm(a)
            | Op::L2Normalize(a)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a, _) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    /// Per-op activations kept for the backward pass (row statistics).
    saved: Vec<f64>,
    requires_grad: bool,
}

/// Ordered record of operations. Nodes are appended in evaluation order, so
/// every node's inputs precede it and the record is already topologically
/// sorted.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Records a constant or input. Gradients flow into it only when the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.push(Op::Leaf { param: None }, t, Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Records a trainable parameter whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        let mut t = t.clone();
        t.set_requires_grad(true);
        self.push(Op::Leaf { param: Some(id) }, t, Vec::new(), true)
    }

    fn push(&mut self, op: Op, value: Tensor, saved: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            saved,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (value, saved) = self.evaluate(&op)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, value, saved, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    /// `a - b`, expressed as `a + (-1)·b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Multiply(a, b))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::Concat(parts.to_vec()))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Tanh(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softmax(a))
    }

    /// Normalises each last-axis slice to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.record(Op::LayerNorm(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    /// Euclidean norm of the whole tensor, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        self.record(Op::L2Norm(a))
    }

    /// Scales each last-axis slice to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.record(Op::L2Normalize(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.record(Op::Scale(a, factor))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.record(Op::Reshape(a, shape))
    }

    /// `x + 1·bias` for `x: r × c` and `bias: 1 × c`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let rows = self.value(x).dims2("add_bias")?.0;
        let ones = self.constant(Tensor::filled(&[rows, 1], 1.0));
        let spread = self.matmul(ones, bias)?;
        self.add(x, spread)
    }

    /// Re-evaluates every recorded node from the original leaves, producing
    /// a fresh, unconsumed tape.
    pub fn replay(&self) -> Result<Tape> {
        let mut out = Tape::new();
        for node in &self.nodes {
            match &node.op {
                Op::Leaf { .. } => {
                    out.push(node.op.clone(), node.value.clone(), Vec::new(), node.requires_grad);
                }
                op => {
                    out.record(op.clone())?;
                }
            }
        }
        Ok(out)
    }

    fn evaluate(&self, op: &Op) -> Result<(Tensor, Vec<f64>)> {
        let val = |v: &Var| -> Result<&Tensor> {
            self.nodes
                .get(v.0)
                .map(|n| &n.value)
                .ok_or_else(|| Error::Tape(format!("unknown node {}", v.0)))
        };
        let (out, saved, name) = match op {
            Op::Leaf { .. } => unreachable!("leaves are pushed directly"),
            Op::MatMul(a, b) => {
                let (a, b) = (val(a)?, val(b)?);
                let (m, k) = a.dims2("matmul")?;
                let (k2, n) = b.dims2("matmul")?;
                if k != k2 {
                    return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                let mut c = vec![0.0; m * n];
                matmul_into(a.data(), b.data(), &mut c, m, k, n);
                (Tensor::new(vec![m, n], c)?, Vec::new(), "matmul")
            }
            Op::Add(a, b) | Op::Multiply(a, b) => {
                let (a, b) = (val(a)?, val(b)?);
                let is_add = matches!(op, Op::Add(..));
                let name = if is_add { "add" } else { "multiply" };
                if a.shape() != b.shape() {
                    return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| if is_add { x + y } else { x * y })
                    .collect();
                (Tensor::new(a.shape().to_vec(), data)?, Vec::new(), name)
            }
            Op::Concat(parts) => {
                let first = val(parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)?;
                let lead = &first.shape()[..first.shape().len() - 1];
                let rows = first.rows();
                let mut width = 0;
                for p in parts {
                    let t = val(p)?;
                    if &t.shape()[..t.shape().len() - 1] != lead {
                        return Err(Error::shape(
                            "concat",
                            format!("{:?} vs {:?}", first.shape(), t.shape()),
                        ));
                    }
                    width += t.last_dim();
                }
                let mut data = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(val(p)?.row_slice(r));
                    }
                }
                let mut shape = lead.to_vec();
                shape.push(width);
                (Tensor::new(shape, data)?, Vec::new(), "concat")
            }
            Op::Relu(a) => (map(val(a)?, |x| x.max(0.0)), Vec::new(), "relu"),
            Op::Tanh(a) => (map(val(a)?, f64::tanh), Vec::new(), "tanh"),
            Op::Softmax(a) => {
                let a = val(a)?;
                let c = a.last_dim();
                let mut data = a.data().to_vec();
                for row in data.chunks_mut(c) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= total;
                    }
                }
                (Tensor::new(a.shape().to_vec(), data)?, Vec::new(), "softmax")
            }
            Op::LayerNorm(a) => {
                let a = val(a)?;
                let c = a.last_dim();
                let mut data = a.data().to_vec();
                let mut inv_std = Vec::with_capacity(a.rows());
                for row in data.chunks_mut(c) {
                    let mu = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
                    let s = 1.0 / (var + LN_EPS).sqrt();
                    for x in row.iter_mut() {
                        *x = (*x - mu) * s;
                    }
                    inv_std.push(s);
                }
                (Tensor::new(a.shape().to_vec(), data)?, inv_std, "layer_norm")
            }
            Op::Mean(a) => {
                let a = val(a)?;
                let m = a.data().iter().sum::<f64>() / a.len() as f64;
                (Tensor::scalar(m), Vec::new(), "mean")
            }
            Op::Sum(a) => (Tensor::scalar(val(a)?.data().iter().sum()), Vec::new(), "sum"),
            Op::L2Norm(a) => {
                let n = super::norm(val(a)?.data());
                (Tensor::scalar(n), Vec::new(), "l2_norm")
            }
            Op::L2Normalize(a) => {
                let a = val(a)?;
                let c = a.last_dim();
                let mut data = a.data().to_vec();
                let mut norms = Vec::with_capacity(a.rows());
                for row in data.chunks_mut(c) {
                    let n = super::norm(row);
                    if n == 0.0 {
                        return Err(Error::NonFinite("l2_normalize of a zero vector"));
                    }
                    for x in row.iter_mut() {
                        *x /= n;
                    }
                    norms.push(n);
                }
                (Tensor::new(a.shape().to_vec(), data)?, norms, "l2_normalize")
            }
            Op::Scale(a, f) => (map(val(a)?, |x| x * f), Vec::new(), "scale"),
            Op::Transpose(a) => {
                let a = val(a)?;
                let (r, c) = a.dims2("transpose")?;
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        data[j * r + i] = a.data()[i * c + j];
                    }
                }
                (Tensor::new(vec![c, r], data)?, Vec::new(), "transpose")
            }
            Op::Reshape(a, shape) => {
                let a = val(a)?;
                let t = Tensor::new(shape.clone(), a.data().to_vec())
                    .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", a.shape())))?;
                (t, Vec::new(), "reshape")
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok((out, saved))
    }

    /// Propagates gradients from the scalar `loss` back to every parameter
    /// leaf. A tape can be differentiated once; use [`Tape::replay`] to
    /// obtain a fresh copy.
    pub fn backward(&mut self, loss: Var) -> Result<GradientMap> {
        if self.consumed {
            return Err(Error::Tape("tape already consumed by backward".into()));
        }
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Tape(format!("unknown node {}", loss.0)))?;
        if loss_node.value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                grads[idx] = Some(g);
                continue;
            }
            for (input, contribution) in self.input_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let mut out = GradientMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                let shape = node.value.shape().to_vec();
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .map(|g| Tensor::new(shape.clone(), g).expect("gradient shape"))
                    .unwrap_or_else(|| Tensor::zeros(&shape));
                match out.get_mut(&id) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        out.insert(id, g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn input_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let v = |x: &Var| &self.nodes[x.0].value;
        match &node.op {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (v(a), v(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] = dot(grow, &tb.data()[p * n..(p + 1) * n]);
                        }
                    }
                    out.push((*a, ga));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[p * n..(p + 1) * n];
                            for (d, gv) in dst.iter_mut().zip(grow) {
                                *d += aip * gv;
                            }
                        }
                    }
                    out.push((*b, gb));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Multiply(a, b) => {
                let ga = g.iter().zip(v(b).data()).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(v(a).data()).map(|(g, x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Concat(parts) => {
                let width = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let w = v(p).last_dim();
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * width + offset..r * width + offset + w]);
                    }
                    out.push((*p, gp));
                    offset += w;
                }
                out
            }
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(v(a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Tanh(a) => {
                let ga = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                vec![(*a, ga)]
            }
            Op::Softmax(a) => {
                let c = node.value.last_dim();
                let mut ga = vec![0.0; g.len()];
                for ((dst, y), gr) in ga.chunks_mut(c).zip(node.value.data().chunks(c)).zip(g.chunks(c)) {
                    let inner = dot(y, gr);
                    for j in 0..c {
                        dst[j] = y[j] * (gr[j] - inner);
                    }
                }
                vec![(*a, ga)]
            }
            Op::LayerNorm(a) => {
                let c = node.value.last_dim();
                let mut ga = vec![0.0; g.len()];
                for (r, ((dst, y), gr)) in ga
                    .chunks_mut(c)
                    .zip(node.value.data().chunks(c))
                    .zip(g.chunks(c))
                    .enumerate()
                {
                    let s = node.saved[r];
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gy = dot(gr, y) / c as f64;
                    for j in 0..c {
                        dst[j] = s * (gr[j] - mean_g - y[j] * mean_gy);
                    }
                }
                vec![(*a, ga)]
            }
            Op::Mean(a) => {
                let n = v(a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; v(a).len()])],
            Op::L2Norm(a) => {
                let n = node.value.data()[0];
                // Subgradient 0 at the origin.
                let ga = if n == 0.0 {
                    vec![0.0; v(a).len()]
                } else {
                    v(a).data().iter().map(|x| g[0] * x / n).collect()
                };
                vec![(*a, ga)]
            }
            Op::L2Normalize(a) => {
                let c = node.value.last_dim();
                let mut ga = vec![0.0; g.len()];
                for (r, ((dst, y), gr)) in ga
                    .chunks_mut(c)
                    .zip(node.value.data().chunks(c))
                    .zip(g.chunks(c))
                    .enumerate()
                {
                    let n = node.saved[r];
                    let inner = dot(gr, y);
                    for j in 0..c {
                        dst[j] = (gr[j] - y[j] * inner) / n;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|x| x * f).collect())],
            Op::Transpose(a) => {
                // Output is c × r; map back to r × c.
                let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                let mut ga = vec![0.0; g.len()];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*a, ga)]
            }
            Op::Reshape(a, _) => vec![(*a, g.to_vec())],
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

/// `c += a · b` for row-major `a: m × k`, `b: k × n`.
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}
