use super::broadcast::{broadcast_shape, reduce_into, IndexMap};
use super::{matmul_into, transpose, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Neg,
    Square,
    Sqrt,
    Exp,
    Sin,
    Cos,
    Tanh,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Exp => "exp",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Tanh => "tanh",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Exp => x.exp(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Tanh => x.tanh(),
        }
    }

    /// d out / d x given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Exp => y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        map_a: IndexMap,
        map_b: IndexMap,
    },
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Slice { x: Var, outer: usize, len: usize, inner: usize, start: usize, end: usize },
    Broadcast { x: Var, map: IndexMap },
    Reshape(Var),
    Transpose { x: Var, rows: usize, cols: usize },
    Gather { table: Var, rows: Vec<usize>, width: usize },
    DepthwiseConv1d { x: Var, kernel: Var, batch: usize, len: usize, channels: usize, ksize: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every gradient-requiring leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.slots.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.slots.get_mut(var.0).and_then(|g| g.take())
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NumericFault { op })
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn slot(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies a recorded value out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf; it receives a gradient iff it requires one.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad;
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: t.data.clone(),
            op: if needs { Op::Leaf } else { Op::Constant },
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Constant, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(t))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out_shape = broadcast_shape(kind.name(), sa, sb)?;
        let map_a = IndexMap::new(sa, &out_shape);
        let map_b = IndexMap::new(sb, &out_shape);
        let n: usize = out_shape.iter().product();
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let value: Vec<f64> = match (&map_a, &map_b) {
            (IndexMap::Same, IndexMap::Same) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            (IndexMap::Same, IndexMap::Cyclic(p)) => {
                let mut out = Vec::with_capacity(n);
                for chunk in va.chunks(*p) {
                    out.extend(chunk.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            _ => {
                let ia = map_a.indices(n);
                let ib = map_b.indices(n);
                ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect()
            }
        };
        check_finite(kind.name(), &value)?;
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(
            out_shape,
            value,
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let node = &self.nodes[x.0];
        let value: Vec<f64> = node.value.iter().map(|&v| kind.apply(v)).collect();
        check_finite(kind.name(), &value)?;
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        Ok(self.push(shape, value, Op::Unary(kind, x), needs))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Cos, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let node = &self.nodes[x.0];
        let value: Vec<f64> = node.value.iter().map(|&v| v * s).collect();
        check_finite("scale", &value)?;
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        Ok(self.push(shape, value, Op::Scale(x, s), needs))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let node = &self.nodes[x.0];
        let value: Vec<f64> = node.value.iter().map(|&v| v + s).collect();
        check_finite("add_scalar", &value)?;
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        Ok(self.push(shape, value, Op::AddScalar(x), needs))
    }

    /// 2-D matrix product `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut value, m, k, n);
        check_finite("matmul", &value)?;
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(vec![m, n], value, Op::MatMul { a, b, m, k, n }, needs))
    }

    /// Sum of all elements as a scalar (shape `[]`).
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let node = &self.nodes[x.0];
        let s: f64 = node.value.iter().sum();
        check_finite("sum", &[s])?;
        let needs = node.needs_grad;
        Ok(self.push(vec![], vec![s], Op::Sum(x), needs))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let node = &self.nodes[x.0];
        if node.value.is_empty() {
            return Err(TensorError::Contract("mean of an empty tensor".into()));
        }
        let s: f64 = node.value.iter().sum::<f64>() / node.value.len() as f64;
        check_finite("mean", &[s])?;
        let needs = node.needs_grad;
        Ok(self.push(vec![], vec![s], Op::Mean(x), needs))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let node = &self.nodes[x.0];
        if axis >= node.shape.len() {
            return Err(TensorError::Contract(format!(
                "sum_axis: axis {axis} out of range for shape {:?}",
                node.shape
            )));
        }
        let (outer, len, inner) = split_axis(&node.shape, axis);
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &node.value[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut value[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = node.shape.clone();
        shape.remove(axis);
        let needs = node.needs_grad;
        Ok(self.push(shape, value, Op::SumAxis { x, outer, len, inner }, needs))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.nodes[x.0].shape.get(axis).ok_or_else(|| {
            TensorError::Contract(format!("mean_axis: axis {axis} out of range"))
        })?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(TensorError::Contract(format!(
                "concat: axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut parts = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &v in xs {
            let s = &self.nodes[v.0].shape;
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            parts.push((v, s[axis]));
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(v, len) in &parts {
                let src = &self.nodes[v.0].value;
                value.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = xs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(shape, value, Op::Concat { parts, outer, inner }, needs))
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let node = &self.nodes[x.0];
        if axis >= node.shape.len() || start > end || end > node.shape[axis] {
            return Err(TensorError::Contract(format!(
                "slice {start}..{end} on axis {axis} of shape {:?}",
                node.shape
            )));
        }
        let (outer, len, inner) = split_axis(&node.shape, axis);
        let w = end - start;
        let mut value = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            value.extend_from_slice(&node.value[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = node.shape.clone();
        shape[axis] = w;
        let needs = node.needs_grad;
        Ok(self.push(
            shape,
            value,
            Op::Slice {
                x,
                outer,
                len,
                inner,
                start,
                end,
            },
            needs,
        ))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let node = &self.nodes[x.0];
        let out = broadcast_shape("broadcast_to", &node.shape, shape)?;
        if out != shape {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: node.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let map = IndexMap::new(&node.shape, shape);
        let n: usize = shape.iter().product();
        let value: Vec<f64> = map.indices(n).into_iter().map(|i| node.value[i]).collect();
        let needs = node.needs_grad;
        Ok(self.push(shape.to_vec(), value, Op::Broadcast { x, map }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let node = &self.nodes[x.0];
        let n: usize = shape.iter().product();
        if n != node.value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: node.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let (value, needs) = (node.value.clone(), node.needs_grad);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let node = &self.nodes[x.0];
        if node.shape.len() != 2 {
            return Err(TensorError::Contract(format!(
                "transpose expects a matrix, got shape {:?}",
                node.shape
            )));
        }
        let (rows, cols) = (node.shape[0], node.shape[1]);
        let value = transpose(&node.value, rows, cols);
        let needs = node.needs_grad;
        Ok(self.push(vec![cols, rows], value, Op::Transpose { x, rows, cols }, needs))
    }

    /// Row lookup into a `[vocab × width]` table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let node = &self.nodes[table.0];
        if node.shape.len() != 2 {
            return Err(TensorError::Contract("gather_rows expects a matrix table".into()));
        }
        let (vocab, width) = (node.shape[0], node.shape[1]);
        let mut value = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= vocab {
                return Err(TensorError::Contract(format!("row {r} outside table of {vocab} rows")));
            }
            value.extend_from_slice(&node.value[r * width..(r + 1) * width]);
        }
        let needs = node.needs_grad;
        Ok(self.push(
            vec![rows.len(), width],
            value,
            Op::Gather {
                table,
                rows: rows.to_vec(),
                width,
            },
            needs,
        ))
    }

    /// Per-channel 1-D cross-correlation with zero "same" padding.
    ///
    /// `x` is `[batch × length × channels]`, `kernel` is `[channels × ksize]`;
    /// tap `j` reads position `l + j - (ksize - 1) / 2`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (sx, sk) = (&self.nodes[x.0].shape, &self.nodes[kernel.0].shape);
        if sx.len() != 3 || sk.len() != 2 || sx[2] != sk[0] || sk[1] == 0 || sx[1] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv1d",
                lhs: sx.clone(),
                rhs: sk.clone(),
            });
        }
        let (batch, len, channels, ksize) = (sx[0], sx[1], sx[2], sk[1]);
        let left = (ksize - 1) / 2;
        let (xv, kv) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        let mut value = vec![0.0; batch * len * channels];
        for b in 0..batch {
            for l in 0..len {
                let out = &mut value[(b * len + l) * channels..(b * len + l + 1) * channels];
                for j in 0..ksize {
                    let src = l as isize + j as isize - left as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let xrow = &xv[(b * len + src as usize) * channels..][..channels];
                    for (c, o) in out.iter_mut().enumerate() {
                        *o += kv[c * ksize + j] * xrow[c];
                    }
                }
            }
        }
        check_finite("depthwise_conv1d", &value)?;
        let needs = self.nodes[x.0].needs_grad || self.nodes[kernel.0].needs_grad;
        Ok(self.push(
            vec![batch, len, channels],
            value,
            Op::DepthwiseConv1d {
                x,
                kernel,
                batch,
                len,
                channels,
                ksize,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Clears the tape.
    ///
    /// Every leaf that requires a gradient gets an entry, zero-filled when it
    /// does not influence the loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::Contract("backward on an empty tape".into()));
        }
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if ln.needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                check_finite("backward", &g)?;
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let slots = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Leaf => Some(grads[i].take().unwrap_or_else(|| vec![0.0; n.value.len()])),
                _ => None,
            })
            .collect();
        self.nodes.clear();
        Ok(Gradients { slots })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let len_of = |v: Var| nodes[v.0].value.len();
        let node = &nodes[i];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            } => {
                let (a, b) = (*a, *b);
                let n = g.len();
                match kind {
                    Binary::Add | Binary::Sub => {
                        if needs(a) {
                            reduce_into(map_a, g, slot(grads, a, len_of(a)), 1.0);
                        }
                        if needs(b) {
                            let sign = if *kind == Binary::Add { 1.0 } else { -1.0 };
                            reduce_into(map_b, g, slot(grads, b, len_of(b)), sign);
                        }
                    }
                    Binary::Mul | Binary::Div => {
                        let ia = map_a.indices(n);
                        let ib = map_b.indices(n);
                        let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                        if needs(a) {
                            let local: Vec<f64> = (0..n)
                                .map(|p| match kind {
                                    Binary::Mul => g[p] * vb[ib[p]],
                                    _ => g[p] / vb[ib[p]],
                                })
                                .collect();
                            reduce_into(map_a, &local, slot(grads, a, len_of(a)), 1.0);
                        }
                        if needs(b) {
                            let local: Vec<f64> = (0..n)
                                .map(|p| match kind {
                                    Binary::Mul => g[p] * va[ia[p]],
                                    _ => -g[p] * va[ia[p]] / (vb[ib[p]] * vb[ib[p]]),
                                })
                                .collect();
                            reduce_into(map_b, &local, slot(grads, b, len_of(b)), 1.0);
                        }
                    }
                }
            }
            Op::Unary(kind, x) => {
                let xv = &nodes[x.0].value;
                let dst = slot(grads, *x, xv.len());
                for p in 0..g.len() {
                    dst[p] += g[p] * kind.derivative(xv[p], node.value[p]);
                }
            }
            Op::Scale(x, s) => {
                let dst = slot(grads, *x, g.len());
                dst.iter_mut().zip(g).for_each(|(d, gv)| *d += s * gv);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let dst = slot(grads, *x, g.len());
                dst.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if needs(a) {
                    let bt = transpose(&nodes[b.0].value, k, n);
                    matmul_into(g, &bt, slot(grads, a, m * k), m, n, k);
                }
                if needs(b) {
                    let av = &nodes[a.0].value;
                    let dst = slot(grads, b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let s = av[r * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            let drow = &mut dst[p * n..(p + 1) * n];
                            drow.iter_mut().zip(grow).for_each(|(d, gv)| *d += s * gv);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let dst = slot(grads, *x, len_of(*x));
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = len_of(*x);
                let s = g[0] / n as f64;
                let dst = slot(grads, *x, n);
                dst.iter_mut().for_each(|d| *d += s);
            }
            Op::SumAxis { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let dst = slot(grads, *x, outer * len * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let d = &mut dst[(o * len + l) * inner..(o * len + l + 1) * inner];
                        d.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(v, len) in parts {
                    if needs(v) {
                        let dst = slot(grads, v, outer * len * inner);
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let d = &mut dst[o * len * inner..(o + 1) * len * inner];
                            d.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice {
                x,
                outer,
                len,
                inner,
                start,
                end,
            } => {
                let w = end - start;
                let dst = slot(grads, *x, outer * len * inner);
                for o in 0..*outer {
                    let src = &g[o * w * inner..(o + 1) * w * inner];
                    let d = &mut dst[(o * len + start) * inner..(o * len + end) * inner];
                    d.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            Op::Broadcast { x, map } => {
                reduce_into(map, g, slot(grads, *x, len_of(*x)), 1.0);
            }
            Op::Transpose { x, rows, cols } => {
                let gt = transpose(g, *cols, *rows);
                let dst = slot(grads, *x, rows * cols);
                dst.iter_mut().zip(&gt).for_each(|(a, b)| *a += b);
            }
            Op::Gather { table, rows, width } => {
                let dst = slot(grads, *table, len_of(*table));
                for (p, &r) in rows.iter().enumerate() {
                    let src = &g[p * width..(p + 1) * width];
                    let d = &mut dst[r * width..(r + 1) * width];
                    d.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            Op::DepthwiseConv1d {
                x,
                kernel,
                batch,
                len,
                channels,
                ksize,
            } => {
                let (batch, len, channels, ksize) = (*batch, *len, *channels, *ksize);
                let left = (ksize - 1) / 2;
                let (xv, kv) = (&nodes[x.0].value, &nodes[kernel.0].value);
                let mut gx = needs(*x).then(|| vec![0.0; xv.len()]);
                let mut gk = needs(*kernel).then(|| vec![0.0; kv.len()]);
                for b in 0..batch {
                    for l in 0..len {
                        let grow = &g[(b * len + l) * channels..][..channels];
                        for j in 0..ksize {
                            let src = l as isize + j as isize - left as isize;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            let base = (b * len + src as usize) * channels;
                            for c in 0..channels {
                                if let Some(gx) = gx.as_mut() {
                                    gx[base + c] += kv[c * ksize + j] * grow[c];
                                }
                                if let Some(gk) = gk.as_mut() {
                                    gk[c * ksize + j] += xv[base + c] * grow[c];
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    let dst = slot(grads, *x, gx.len());
                    dst.iter_mut().zip(&gx).for_each(|(a, b)| *a += b);
                }
                if let Some(gk) = gk {
                    let dst = slot(grads, *kernel, gk.len());
                    dst.iter_mut().zip(&gk).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(tape: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        let t = Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_requires_grad(true);
        tape.leaf(&t)
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(&[1.0, 2.0]));
        let b = tape.constant(Tensor::vector(&[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..9).map(|v| v as f64 * 1.5 - 2.0).collect();
        let i3 = tape.constant(Tensor::identity(3));
        let a = tape.constant(Tensor::matrix(3, 3, data.clone()).unwrap());
        let p = tape.matmul(i3, a).unwrap();
        assert_eq!(tape.value(p), data.as_slice());
    }

    #[test]
    fn mean_of_squares() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[3.0, 4.0]));
        let s = tape.square(x).unwrap();
        let m = tape.mean(s).unwrap();
        assert_eq!(tape.scalar(m), 12.5);
    }

    #[test]
    fn shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
        let msg = tape.matmul(a, a).unwrap_err().to_string();
        assert!(msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn non_finite_is_a_fault() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(&[1.0, 0.0]));
        let b = tape.constant(Tensor::vector(&[0.0, 0.0]));
        assert!(matches!(tape.div(a, b), Err(TensorError::NumericFault { op: "div" })));
        let big = tape.constant(Tensor::vector(&[800.0]));
        assert!(tape.exp(big).is_err());
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = var(&mut tape, &[3], &[1.0, 2.0, 3.0]);
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
        assert!(tape.is_empty());
    }

    #[test]
    fn grad_of_mean() {
        let mut tape = Tape::new();
        let x = var(&mut tape, &[4], &[1.0, -2.0, 0.5, 7.0]);
        let loss = tape.mean(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_contracts() {
        let mut tape = Tape::new();
        let x = var(&mut tape, &[2], &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
        let mut empty = Tape::new();
        assert!(empty.backward(Var(0)).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = var(&mut tape, &[2], &[1.0, 2.0]);
        let y = var(&mut tape, &[3], &[1.0, 2.0, 3.0]);
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(y).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn constants_record_nothing_differentiable() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(&[1.0]));
        let b = tape.square(a).unwrap();
        assert!(!tape.requires_grad(b));
    }

    #[test]
    fn concat_and_slice_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3]);
        assert_eq!(tape.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tape.slice(c, 1, 1, 3).unwrap();
        assert_eq!(tape.value(s), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn broadcast_row_add() {
        let mut tape = Tape::new();
        let a = var(&mut tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = var(&mut tape, &[2], &[10.0, 20.0]);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0, 22.0, 13.0, 24.0]);
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap(), &[2.0, 2.0]);
    }
}
