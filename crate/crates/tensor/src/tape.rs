use std::borrow::Cow;
use std::sync::Arc;

use crate::error::TensorError;
use crate::kernels::{gelu, gelu_grad, gemm, sigmoid};
use crate::tensor::{broadcast_shape, strides, Tensor};
use crate::Result;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Sqrt,
    Exp,
    Tanh,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// How a broadcast input maps onto the flat output index.
#[derive(Clone, Debug)]
enum BIndex {
    Same,
    Scalar,
    /// Input equals the trailing axes of the output: `i % len`.
    Suffix(usize),
    Map(Arc<[usize]>),
}

impl BIndex {
    fn plan(out: &[usize], input: &[usize]) -> BIndex {
        let in_numel: usize = input.iter().product();
        if input == out {
            return BIndex::Same;
        }
        if in_numel == 1 {
            return BIndex::Scalar;
        }
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return BIndex::Suffix(in_numel);
        }
        let rank = out.len();
        let in_strides = strides(input);
        let offset = rank - input.len();
        let eff: Vec<usize> = (0..rank)
            .map(|i| {
                if i < offset || input[i - offset] == 1 {
                    0
                } else {
                    in_strides[i - offset]
                }
            })
            .collect();
        let numel: usize = out.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut counter = vec![0usize; rank];
        let mut pos = 0usize;
        for _ in 0..numel {
            map.push(pos);
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                pos += eff[ax];
                if counter[ax] < out[ax] {
                    break;
                }
                pos -= eff[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        BIndex::Map(map.into())
    }

    fn expand<'a>(&self, data: &'a [f64], numel: usize) -> Cow<'a, [f64]> {
        match self {
            BIndex::Same => Cow::Borrowed(data),
            BIndex::Scalar => Cow::Owned(vec![data[0]; numel]),
            BIndex::Suffix(len) => Cow::Owned((0..numel).map(|i| data[i % len]).collect()),
            BIndex::Map(map) => Cow::Owned(map.iter().map(|&j| data[j]).collect()),
        }
    }

    /// Adds `contrib` (output-shaped) into `acc` (input-shaped).
    fn reduce_into(&self, contrib: &[f64], acc: &mut [f64]) {
        match self {
            BIndex::Same => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            BIndex::Scalar => acc[0] += contrib.iter().sum::<f64>(),
            BIndex::Suffix(len) => {
                for chunk in contrib.chunks(*len) {
                    acc.iter_mut().zip(chunk).for_each(|(a, c)| *a += c);
                }
            }
            BIndex::Map(map) => {
                for (&j, c) in map.iter().zip(contrib) {
                    acc[j] += c;
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        ai: BIndex,
        bi: BIndex,
    },
    Unary {
        kind: Unary,
        a: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Offset {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum {
        a: Var,
    },
    SumAxis {
        a: Var,
        axis: usize,
    },
    Reshape {
        a: Var,
    },
    Gather {
        a: Var,
        index: Arc<[usize]>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    FillDiagonal {
        a: Var,
    },
    BceWithLogits {
        logits: Var,
        target: Arc<Tensor>,
    },
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    finite: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Execution-ordered record of tensor operations.
///
/// Records are appended as operations run, so the node list is always a
/// valid topological order. A tape is single-threaded; build one per
/// forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which no leaf requires a gradient; used for inference.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: impl Into<Arc<Tensor>>, requires_grad: bool) -> Var {
        let value = value.into();
        let finite = value.is_finite();
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            finite,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; zeros when nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Tensor::new(node.value.shape().to_vec(), data).expect("grad matches value shape")
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let finite = value.is_finite();
        let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].finite);
        if !finite && inputs_finite && !matches!(op, Op::FillDiagonal { .. }) {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            finite,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- linear algebra -------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `b` may be a plain matrix shared across all leading axes of `a`, or
    /// carry the same leading axes as `a` (batched product).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a * b^T` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let plan = MatMulPlan::new(self.shape(a), self.shape(b), ta, tb)?;
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        if plan.batched {
            let (sa, sb, sc) = (plan.m * plan.k, plan.k * plan.n, plan.m * plan.n);
            for i in 0..plan.batch {
                gemm(
                    plan.m,
                    plan.k,
                    plan.n,
                    &av.data()[i * sa..(i + 1) * sa],
                    ta,
                    &bv.data()[i * sb..(i + 1) * sb],
                    tb,
                    &mut out[i * sc..(i + 1) * sc],
                    0.0,
                );
            }
        } else {
            gemm(
                plan.batch * plan.m,
                plan.k,
                plan.n,
                av.data(),
                ta,
                bv.data(),
                tb,
                &mut out,
                0.0,
            );
        }
        let value = Tensor::new(plan.out_shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    // ----- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let numel: usize = out_shape.iter().product();
        let ai = BIndex::plan(&out_shape, self.shape(a));
        let bi = BIndex::plan(&out_shape, self.shape(b));
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let xa = ai.expand(av.data(), numel);
        let xb = bi.expand(bv.data(), numel);
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data: Vec<f64> = xa.iter().zip(xb.iter()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(out_shape, data)?;
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        self.push(name, value, Op::Binary { kind, a, b, ai, bi }, &[a, b])
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

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |x| x.max(0.0),
            Unary::Gelu => gelu,
            Unary::Sigmoid => sigmoid,
            Unary::Sqrt => f64::sqrt,
            Unary::Exp => f64::exp,
            Unary::Tanh => f64::tanh,
        };
        let value = self.value(a).map(f);
        let name = match kind {
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Sigmoid => "sigmoid",
            Unary::Sqrt => "sqrt",
            Unary::Exp => "exp",
            Unary::Tanh => "tanh",
        };
        self.push(name, value, Op::Unary { kind, a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push("scale", value, Op::Scale { a, factor }, &[a])
    }

    pub fn offset(&mut self, a: Var, amount: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + amount);
        self.push("offset", value, Op::Offset { a }, &[a])
    }

    // ----- normalization --------------------------------------------------

    /// Numerically stabilized softmax along `axis`. `-inf` entries map to 0.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::dim(format!("softmax axis {axis} on {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value_arc(a);
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::DegenerateSlice);
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("softmax", value, Op::Softmax { a, axis }, &[a])
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| TensorError::dim("layer_norm on scalar"))?;
        if self.value(gamma).numel() != width || self.value(beta).numel() != width {
            return Err(TensorError::dim(format!(
                "layer_norm affine params must have {width} elements"
            )));
        }
        if eps <= 0.0 {
            return Err(TensorError::Contract("layer_norm eps must be positive".into()));
        }
        let xv = self.value_arc(x);
        let gv = self.value_arc(gamma);
        let bv = self.value_arc(beta);
        let rows = xv.numel() / width;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..width {
                let h = (row[j] - mean) * s;
                xhat[r * width + j] = h;
                out[r * width + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum { a }, &[a])
            .expect("sum of finite values")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::dim(format!("sum axis {axis} on {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value_arc(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let value = Tensor::new(out_shape, out)?;
        self.push("sum_axis", value, Op::SumAxis { a, axis }, &[a])
    }

    // ----- layout ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// `out[i] = a[index[i]]` over flat buffers, shaped as `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let x = self.value_arc(a);
        let n = x.numel();
        if let Some(&bad) = index.iter().find(|&&j| j >= n) {
            return Err(TensorError::dim(format!("gather index {bad} out of {n}")));
        }
        let data = index.iter().map(|&j| x.data()[j]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push("gather", value, Op::Gather { a, index }, &[a])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(TensorError::dim(format!("bad permutation {axes:?} for {shape:?}")));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let eff: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
        let numel: usize = shape.iter().product();
        let mut index = Vec::with_capacity(numel);
        let mut counter = vec![0usize; rank];
        let mut pos = 0usize;
        for _ in 0..numel {
            index.push(pos);
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                pos += eff[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                pos -= eff[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        self.gather(a, index.into(), &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(TensorError::dim("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::dim(format!(
                "slice [{start}, {}) along axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            index.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(a, index.into(), &out_shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| TensorError::dim("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::dim(format!("concat axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::dim(format!("concat of {first:?} with {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let value = Tensor::new(out_shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Sets the diagonal of the trailing square matrices to `value`.
    ///
    /// The diagonal receives no gradient. `value` may be `-inf`.
    pub fn fill_diagonal(&mut self, a: Var, value: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        if rank < 2 || shape[rank - 1] != shape[rank - 2] {
            return Err(TensorError::dim(format!("fill_diagonal on {shape:?}")));
        }
        let n = shape[rank - 1];
        let mut out = self.value(a).clone();
        for block in out.data_mut().chunks_mut(n * n) {
            for i in 0..n {
                block[i * n + i] = value;
            }
        }
        self.push("fill_diagonal", out, Op::FillDiagonal { a }, &[a])
    }

    // ----- losses ---------------------------------------------------------

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`,
    /// evaluated in the overflow-free logit form.
    pub fn bce_with_logits(&mut self, logits: Var, target: Arc<Tensor>) -> Result<Var> {
        let x = self.value_arc(logits);
        if x.shape() != target.shape() {
            return Err(TensorError::dim(format!(
                "bce logits {:?} vs target {:?}",
                x.shape(),
                target.shape()
            )));
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / x.numel() as f64);
        self.push("bce_with_logits", value, Op::BceWithLogits { logits, target }, &[logits])
    }

    // ----- reverse pass ---------------------------------------------------

    /// Propagates d(loss)/d(.) to every leaf that requires a gradient.
    ///
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let n = loss.0 + 1;
        let needs: Vec<bool> = self.nodes[..n].iter().map(|nd| nd.requires_grad).collect();
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let node = &self.nodes[i];
            let mut sink = Sink {
                adj: &mut adj,
                needs: &needs,
                nodes: &self.nodes,
            };
            backward_op(node, &g, &mut sink)?;
        }
        Ok(())
    }
}

struct Sink<'a> {
    adj: &'a mut [Option<Vec<f64>>],
    needs: &'a [bool],
    nodes: &'a [Node],
}

impl Sink<'_> {
    fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn buf(&mut self, v: Var) -> &mut [f64] {
        let len = self.nodes[v.0].value.numel();
        self.adj[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }
}

fn backward_op(node: &Node, g: &[f64], sink: &mut Sink<'_>) -> Result<()> {
    match &node.op {
        Op::Leaf => unreachable!("leaves handled by caller"),
        Op::MatMul { a, b, ta, tb } => {
            let (a, b, ta, tb) = (*a, *b, *ta, *tb);
            let av = Arc::clone(&sink.nodes[a.0].value);
            let bv = Arc::clone(&sink.nodes[b.0].value);
            let plan = MatMulPlan::new(av.shape(), bv.shape(), ta, tb)?;
            let want_a = sink.wants(a);
            let want_b = sink.wants(b);
            if plan.batched {
                let (sa, sb, sc) = (plan.m * plan.k, plan.k * plan.n, plan.m * plan.n);
                for i in 0..plan.batch {
                    let gi = &g[i * sc..(i + 1) * sc];
                    let ai = &av.data()[i * sa..(i + 1) * sa];
                    let bi = &bv.data()[i * sb..(i + 1) * sb];
                    if want_a {
                        let ga = &mut sink.buf(a)[i * sa..(i + 1) * sa];
                        matmul_grad_a(plan.m, plan.k, plan.n, bi, ta, tb, gi, ga);
                    }
                    if want_b {
                        let gb = &mut sink.buf(b)[i * sb..(i + 1) * sb];
                        matmul_grad_b(plan.m, plan.k, plan.n, ai, ta, tb, gi, gb);
                    }
                }
            } else {
                let m = plan.batch * plan.m;
                if want_a {
                    matmul_grad_a(m, plan.k, plan.n, bv.data(), ta, tb, g, sink.buf(a));
                }
                if want_b {
                    matmul_grad_b(m, plan.k, plan.n, av.data(), ta, tb, g, sink.buf(b));
                }
            }
        }
        Op::Binary { kind, a, b, ai, bi } => {
            let (a, b) = (*a, *b);
            let n = g.len();
            let av = Arc::clone(&sink.nodes[a.0].value);
            let bv = Arc::clone(&sink.nodes[b.0].value);
            if sink.wants(a) {
                let contrib: Cow<[f64]> = match kind {
                    Binary::Add | Binary::Sub => Cow::Borrowed(g),
                    Binary::Mul => {
                        let xb = bi.expand(bv.data(), n);
                        Cow::Owned(g.iter().zip(xb.iter()).map(|(g, y)| g * y).collect())
                    }
                    Binary::Div => {
                        let xb = bi.expand(bv.data(), n);
                        Cow::Owned(g.iter().zip(xb.iter()).map(|(g, y)| g / y).collect())
                    }
                };
                ai.reduce_into(&contrib, sink.buf(a));
            }
            if sink.wants(b) {
                let contrib: Cow<[f64]> = match kind {
                    Binary::Add => Cow::Borrowed(g),
                    Binary::Sub => Cow::Owned(g.iter().map(|g| -g).collect()),
                    Binary::Mul => {
                        let xa = ai.expand(av.data(), n);
                        Cow::Owned(g.iter().zip(xa.iter()).map(|(g, x)| g * x).collect())
                    }
                    Binary::Div => {
                        let xa = ai.expand(av.data(), n);
                        let xb = bi.expand(bv.data(), n);
                        Cow::Owned(
                            g.iter()
                                .zip(xa.iter().zip(xb.iter()))
                                .map(|(g, (x, y))| -g * x / (y * y))
                                .collect(),
                        )
                    }
                };
                bi.reduce_into(&contrib, sink.buf(b));
            }
        }
        Op::Unary { kind, a } => {
            let a = *a;
            if sink.wants(a) {
                let x = Arc::clone(&sink.nodes[a.0].value);
                let y = &node.value;
                let acc = sink.buf(a);
                let (xd, yd) = (x.data(), y.data());
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Relu => {
                            if xd[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Gelu => gelu_grad(xd[i]),
                        Unary::Sigmoid => yd[i] * (1.0 - yd[i]),
                        Unary::Sqrt => 0.5 / yd[i],
                        Unary::Exp => yd[i],
                        Unary::Tanh => 1.0 - yd[i] * yd[i],
                    };
                    acc[i] += g[i] * d;
                }
            }
        }
        Op::Scale { a, factor } => {
            if sink.wants(*a) {
                let f = *factor;
                sink.buf(*a).iter_mut().zip(g).for_each(|(acc, g)| *acc += f * g);
            }
        }
        Op::Offset { a } | Op::Reshape { a } => {
            if sink.wants(*a) {
                sink.buf(*a).iter_mut().zip(g).for_each(|(acc, g)| *acc += g);
            }
        }
        Op::Softmax { a, axis } => {
            if sink.wants(*a) {
                let y = &node.value;
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let yd = y.data();
                let acc = sink.buf(*a);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * yd[at(j)]).sum();
                        for j in 0..len {
                            acc[at(j)] += yd[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let width = sink.val(*gamma).numel();
            let rows = rstd.len();
            if sink.wants(*gamma) {
                let acc = sink.buf(*gamma);
                for r in 0..rows {
                    for j in 0..width {
                        acc[j] += g[r * width + j] * xhat[r * width + j];
                    }
                }
            }
            if sink.wants(*beta) {
                let acc = sink.buf(*beta);
                for r in 0..rows {
                    for j in 0..width {
                        acc[j] += g[r * width + j];
                    }
                }
            }
            if sink.wants(*x) {
                let gv = Arc::clone(&sink.nodes[gamma.0].value);
                let acc = sink.buf(*x);
                let mut gh = vec![0.0; width];
                for r in 0..rows {
                    let row = r * width..(r + 1) * width;
                    let h = &xhat[row.clone()];
                    for j in 0..width {
                        gh[j] = g[r * width + j] * gv.data()[j];
                    }
                    let mean_gh = gh.iter().sum::<f64>() / width as f64;
                    let mean_ghh = gh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                    for j in 0..width {
                        acc[r * width + j] += rstd[r] * (gh[j] - mean_gh - h[j] * mean_ghh);
                    }
                }
            }
        }
        Op::Sum { a } => {
            if sink.wants(*a) {
                let g0 = g[0];
                sink.buf(*a).iter_mut().for_each(|acc| *acc += g0);
            }
        }
        Op::SumAxis { a, axis } => {
            if sink.wants(*a) {
                let shape = sink.val(*a).shape().to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let acc = sink.buf(*a);
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut acc[(o * len + j) * inner..(o * len + j + 1) * inner];
                        dst.iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
        Op::Gather { a, index } => {
            if sink.wants(*a) {
                let acc = sink.buf(*a);
                for (&j, gi) in index.iter().zip(g) {
                    acc[j] += gi;
                }
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = sink.val(p).shape()[*axis];
                if sink.wants(p) {
                    let acc = sink.buf(p);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        acc[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                            .for_each(|(d, s)| *d += s);
                    }
                }
                offset += len;
            }
        }
        Op::FillDiagonal { a } => {
            if sink.wants(*a) {
                let n = *node.value.shape().last().expect("rank >= 2");
                let acc = sink.buf(*a);
                for (bi, block) in g.chunks(n * n).enumerate() {
                    for (j, gv) in block.iter().enumerate() {
                        if j / n != j % n {
                            acc[bi * n * n + j] += gv;
                        }
                    }
                }
            }
        }
        Op::BceWithLogits { logits, target } => {
            if sink.wants(*logits) {
                let x = Arc::clone(&sink.nodes[logits.0].value);
                let scale = g[0] / x.numel() as f64;
                let acc = sink.buf(*logits);
                for ((acc, &z), &y) in acc.iter_mut().zip(x.data()).zip(target.data()) {
                    *acc += scale * (sigmoid(z) - y);
                }
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn matmul_grad_a(m: usize, k: usize, n: usize, b: &[f64], ta: bool, tb: bool, g: &[f64], ga: &mut [f64]) {
    if !ta {
        // dA = dC * op(B)^T
        gemm(m, n, k, g, false, b, !tb, ga, 1.0);
    } else {
        // A stored k x m: dA = op(B) * dC^T
        gemm(k, n, m, b, tb, g, true, ga, 1.0);
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_grad_b(m: usize, k: usize, n: usize, a: &[f64], ta: bool, tb: bool, g: &[f64], gb: &mut [f64]) {
    if !tb {
        // dB = op(A)^T * dC
        gemm(k, m, n, a, !ta, g, false, gb, 1.0);
    } else {
        // B stored n x k: dB = dC^T * op(A)
        gemm(n, m, k, g, true, a, ta, gb, 1.0);
    }
}

struct MatMulPlan {
    batch: usize,
    batched: bool,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(TensorError::dim(format!("matmul needs rank >= 2, got {a:?} and {b:?}")));
        }
        let (ra, ca) = (a[a.len() - 2], a[a.len() - 1]);
        let (rb, cb) = (b[b.len() - 2], b[b.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return Err(TensorError::dim(format!(
                "matmul inner extents differ: {a:?} x {b:?} (ta={ta}, tb={tb})"
            )));
        }
        let lead = &a[..a.len() - 2];
        let batch: usize = lead.iter().product();
        let batched = b.len() > 2;
        if batched && &b[..b.len() - 2] != lead {
            return Err(TensorError::dim(format!("matmul batch axes differ: {a:?} x {b:?}")));
        }
        if !batched && ta && !lead.is_empty() {
            return Err(TensorError::dim("transposed batched lhs needs a batched rhs"));
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatMulPlan {
            batch,
            batched,
            m,
            k,
            n,
            out_shape,
        })
    }
}
