//! Define-by-run reverse-mode tape.
//!
//! Every differentiable op records a node holding its output value and the
//! ids of its inputs; input ids are always smaller than the node's own id,
//! so the list is topologically ordered by construction. [`Tape::backward`]
//! sweeps the list in reverse, accumulating exact gradients for every node
//! that (transitively) depends on a parameter.
//!
//! A tape is rebuilt per forward pass and owned by one logical worker; the
//! kernels are sequential with fixed reduction order, so identical inputs
//! produce bit-identical tapes and gradients regardless of how many worker
//! threads run other tapes concurrently.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { x: usize, bias: usize },
    Scale { x: usize, factor: S },
    Transpose { x: usize },
    SoftmaxRows { x: usize },
    Gelu { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: S },
    Dropout { x: usize, factor: Vec<S> },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    Row { x: usize, index: usize },
    ScaleByEntry { x: usize, w: usize, index: usize },
    Sum { x: usize },
    Reshape { x: usize },
    CrossEntropy { logits: usize, class_index: usize },
}

#[derive(Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    needs_grad: bool,
}

/// Per-node gradient accumulators produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    flops: u64,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Estimated floating-point op count of everything recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Record a constant input; gradients do not flow into it.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false, "leaf")
    }

    /// Record a learnable parameter; `backward` produces its gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true, "param")
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool, opname: &str) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite value produced by {opname} (node {})",
            self.nodes.len()
        );
        let _ = opname;
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// `A[p×q] · B[q×r] -> C[p×r]`; backward `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::Dim {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (p, q, r) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_kernel(ta.data(), tb.data(), p, q, r);
        self.flops += 2 * (p * q * r) as u64;
        let value = Tensor::from_vec(vec![p, r], out)?;
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::Matmul { a: a.0, b: b.0 }, needs, "matmul"))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Dim {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<S> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        self.flops += ta.numel() as u64;
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, needs, "add"))
    }

    /// Broadcast a rank-1 bias over the rows of a matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if tx.rank() != 2 || tb.rank() != 1 || tx.cols() != tb.numel() {
            return Err(Error::Dim {
                op: "add_row",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let cols = tx.cols();
        let data: Vec<S> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % cols])
            .collect();
        self.flops += tx.numel() as u64;
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let needs = self.needs(&[x.0, bias.0]);
        Ok(self.push(
            value,
            Op::AddRow {
                x: x.0,
                bias: bias.0,
            },
            needs,
            "add_row",
        ))
    }

    /// Multiply every entry by a compile-time-known constant.
    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let tx = &self.nodes[x.0].value;
        let data: Vec<S> = tx.data().iter().map(|&v| v * factor).collect();
        self.flops += tx.numel() as u64;
        let value = Tensor::from_vec(tx.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(&[x.0]);
        self.push(value, Op::Scale { x: x.0, factor }, needs, "scale")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 {
            return Err(Error::contract(format!(
                "transpose expects a matrix, got shape {:?}",
                tx.shape()
            )));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let value = Tensor::from_vec(vec![c, r], transpose_kernel(tx.data(), r, c))?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::Transpose { x: x.0 }, needs, "transpose"))
    }

    /// Numerically stable row-wise softmax (per-row max subtraction).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() > 2 {
            return Err(Error::contract(format!(
                "softmax_rows expects rank <= 2, got shape {:?}",
                tx.shape()
            )));
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let value = Tensor::from_vec(
            tx.shape().to_vec(),
            softmax_rows_kernel(tx.data(), rows, cols),
        )?;
        self.flops += 5 * tx.numel() as u64;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::SoftmaxRows { x: x.0 }, needs, "softmax_rows"))
    }

    /// Exact-erf GELU: `x * Phi(x)` with `Phi` the standard normal CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let data: Vec<S> = tx.data().iter().map(|&v| gelu_scalar(v)).collect();
        self.flops += 8 * tx.numel() as u64;
        let value = Tensor::from_vec(tx.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(&[x.0]);
        self.push(value, Op::Gelu { x: x.0 }, needs, "gelu")
    }

    /// Last-axis layer normalization followed by the `gamma, beta` affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let d = tx.cols();
        if tx.rank() > 2 || tg.rank() != 1 || tg.numel() != d || tb.rank() != 1 || tb.numel() != d {
            return Err(Error::Dim {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        if d < 2 {
            return Err(Error::contract(
                "layer_norm requires a normalized axis of at least 2",
            ));
        }
        if eps <= S::zero() {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let rows = tx.numel() / d;
        let value = Tensor::from_vec(
            tx.shape().to_vec(),
            layer_norm_kernel(tx.data(), tg.data(), tb.data(), rows, d, eps),
        )?;
        self.flops += 8 * tx.numel() as u64;
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            needs,
            "layer_norm",
        ))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// `1/(1-p)`. Identity in eval mode and at `p = 0` (no node recorded).
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!(
                "dropout rate must satisfy 0 <= p < 1, got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let tx = &self.nodes[x.0].value;
        let keep_scale = S::from_f64(1.0 / (1.0 - p));
        let factor: Vec<S> = (0..tx.numel())
            .map(|_| {
                if rng.next_f64() < p {
                    S::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<S> = tx
            .data()
            .iter()
            .zip(&factor)
            .map(|(&v, &f)| v * f)
            .collect();
        self.flops += tx.numel() as u64;
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::Dropout { x: x.0, factor }, needs, "dropout"))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 || start + len > tx.cols() || len == 0 {
            return Err(Error::contract(format!(
                "slice_cols {start}..{} out of range for shape {:?}",
                start + len,
                tx.shape()
            )));
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&tx.data()[i * cols + start..i * cols + start + len]);
        }
        let value = Tensor::from_vec(vec![rows, len], data)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            value,
            Op::SliceCols {
                x: x.0,
                start,
                len,
            },
            needs,
            "slice_cols",
        ))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols needs at least one part"));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total_cols = 0;
        for v in parts {
            let t = &self.nodes[v.0].value;
            if t.rank() != 2 || t.rows() != rows {
                return Err(Error::Dim {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            total_cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for i in 0..rows {
            for v in parts {
                let t = &self.nodes[v.0].value;
                let c = t.cols();
                data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::from_vec(vec![rows, total_cols], data)?;
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(value, Op::ConcatCols { parts: ids }, needs, "concat_cols"))
    }

    /// Stack matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows needs at least one part"));
        }
        let cols = self.nodes[parts[0].0].value.cols();
        let mut total_rows = 0;
        let mut data = Vec::new();
        for v in parts {
            let t = &self.nodes[v.0].value;
            if t.rank() != 2 || t.cols() != cols {
                return Err(Error::Dim {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            total_rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(vec![total_rows, cols], data)?;
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(value, Op::ConcatRows { parts: ids }, needs, "concat_rows"))
    }

    /// One row of a matrix, kept rank-2 (`1 x cols`).
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 || index >= tx.rows() {
            return Err(Error::contract(format!(
                "row {index} out of range for shape {:?}",
                tx.shape()
            )));
        }
        let cols = tx.cols();
        let data = tx.data()[index * cols..(index + 1) * cols].to_vec();
        let value = Tensor::from_vec(vec![1, cols], data)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::Row { x: x.0, index }, needs, "row"))
    }

    /// `x * w[index]` where `w` is a rank-1 parameter; both factors get
    /// gradients. This is the primitive behind adaptive fusion.
    pub fn scale_by_entry(&mut self, x: Var, w: Var, index: usize) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if tw.rank() != 1 || index >= tw.numel() {
            return Err(Error::contract(format!(
                "scale_by_entry index {index} out of range for shape {:?}",
                tw.shape()
            )));
        }
        let factor = tw.data()[index];
        let data: Vec<S> = tx.data().iter().map(|&v| v * factor).collect();
        self.flops += tx.numel() as u64;
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let needs = self.needs(&[x.0, w.0]);
        Ok(self.push(
            value,
            Op::ScaleByEntry {
                x: x.0,
                w: w.0,
                index,
            },
            needs,
            "scale_by_entry",
        ))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let mut total = S::zero();
        for &v in tx.data() {
            total += v;
        }
        self.flops += tx.numel() as u64;
        let needs = self.needs(&[x.0]);
        self.push(Tensor::scalar(total), Op::Sum { x: x.0 }, needs, "sum")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != tx.numel() {
            return Err(Error::Dim {
                op: "reshape",
                lhs: tx.shape().to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor::from_vec(shape, tx.data().to_vec())?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::Reshape { x: x.0 }, needs, "reshape"))
    }

    /// `-log softmax(logits)[class_index]` via log-sum-exp; `class_index`
    /// is 0-based.
    pub fn cross_entropy(&mut self, logits: Var, class_index: usize) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        if tl.rank() > 2 || tl.rows() != 1 {
            return Err(Error::contract(format!(
                "cross_entropy expects a single logit vector, got shape {:?}",
                tl.shape()
            )));
        }
        let k = tl.numel();
        if class_index >= k {
            return Err(Error::data(format!(
                "label index {class_index} out of range for {k} classes"
            )));
        }
        let loss = cross_entropy_scalar(tl.data(), class_index);
        self.flops += 4 * k as u64;
        let needs = self.needs(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                class_index,
            },
            needs,
            "cross_entropy",
        ))
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient per
    /// node that participates in the loss; shapes match the node values.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            debug_assert_eq!(g.shape(), self.nodes[id].value.shape());
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (p, q, r) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[*a].needs_grad {
                    let da = matmul_bt_kernel(g.data(), tb.data(), p, q, r);
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let db = matmul_at_kernel(ta.data(), g.data(), p, q, r);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                if self.nodes[*a].needs_grad {
                    self.accumulate(grads, *a, g.data());
                }
                if self.nodes[*b].needs_grad {
                    self.accumulate(grads, *b, g.data());
                }
            }
            Op::AddRow { x, bias } => {
                if self.nodes[*x].needs_grad {
                    self.accumulate(grads, *x, g.data());
                }
                if self.nodes[*bias].needs_grad {
                    let cols = self.nodes[*bias].value.numel();
                    let mut db = vec![S::zero(); cols];
                    for (i, &gv) in g.data().iter().enumerate() {
                        db[i % cols] += gv;
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::Scale { x, factor } => {
                if self.nodes[*x].needs_grad {
                    let dx: Vec<S> = g.data().iter().map(|&gv| gv * *factor).collect();
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Transpose { x } => {
                if self.nodes[*x].needs_grad {
                    let (r, c) = (g.rows(), g.cols());
                    let dx = transpose_kernel(g.data(), r, c);
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::SoftmaxRows { x } => {
                if self.nodes[*x].needs_grad {
                    let y = &self.nodes[id].value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut dx = vec![S::zero(); y.numel()];
                    for i in 0..rows {
                        let yr = &y.data()[i * cols..(i + 1) * cols];
                        let gr = &g.data()[i * cols..(i + 1) * cols];
                        let mut dot = S::zero();
                        for (&yv, &gv) in yr.iter().zip(gr) {
                            dot += yv * gv;
                        }
                        for (j, d) in dx[i * cols..(i + 1) * cols].iter_mut().enumerate() {
                            *d = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Gelu { x } => {
                if self.nodes[*x].needs_grad {
                    let tx = &self.nodes[*x].value;
                    let dx: Vec<S> = tx
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| gv * gelu_derivative(v))
                        .collect();
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                self.layer_norm_backward(id, *x, *gamma, *beta, *eps, g, grads);
            }
            Op::Dropout { x, factor } => {
                if self.nodes[*x].needs_grad {
                    let dx: Vec<S> = g
                        .data()
                        .iter()
                        .zip(factor)
                        .map(|(&gv, &f)| gv * f)
                        .collect();
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.nodes[*x].needs_grad {
                    let tx = &self.nodes[*x].value;
                    let (rows, cols) = (tx.rows(), tx.cols());
                    let mut dx = vec![S::zero(); tx.numel()];
                    for i in 0..rows {
                        for j in 0..*len {
                            dx[i * cols + start + j] = g.data()[i * len + j];
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::ConcatCols { parts } => {
                let rows = g.rows();
                let total_cols = g.cols();
                let mut offset = 0;
                for &pid in parts {
                    let c = self.nodes[pid].value.cols();
                    if self.nodes[pid].needs_grad {
                        let mut dp = vec![S::zero(); rows * c];
                        for i in 0..rows {
                            dp[i * c..(i + 1) * c].copy_from_slice(
                                &g.data()[i * total_cols + offset..i * total_cols + offset + c],
                            );
                        }
                        self.accumulate(grads, pid, &dp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let cols = g.cols();
                let mut offset = 0;
                for &pid in parts {
                    let r = self.nodes[pid].value.rows();
                    if self.nodes[pid].needs_grad {
                        let dp = g.data()[offset * cols..(offset + r) * cols].to_vec();
                        self.accumulate(grads, pid, &dp);
                    }
                    offset += r;
                }
            }
            Op::Row { x, index } => {
                if self.nodes[*x].needs_grad {
                    let tx = &self.nodes[*x].value;
                    let cols = tx.cols();
                    let mut dx = vec![S::zero(); tx.numel()];
                    dx[index * cols..(index + 1) * cols].copy_from_slice(g.data());
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::ScaleByEntry { x, w, index } => {
                let factor = self.nodes[*w].value.data()[*index];
                if self.nodes[*x].needs_grad {
                    let dx: Vec<S> = g.data().iter().map(|&gv| gv * factor).collect();
                    self.accumulate(grads, *x, &dx);
                }
                if self.nodes[*w].needs_grad {
                    let tx = &self.nodes[*x].value;
                    let mut dw = vec![S::zero(); self.nodes[*w].value.numel()];
                    let mut dot = S::zero();
                    for (&gv, &xv) in g.data().iter().zip(tx.data()) {
                        dot += gv * xv;
                    }
                    dw[*index] = dot;
                    self.accumulate(grads, *w, &dw);
                }
            }
            Op::Sum { x } => {
                if self.nodes[*x].needs_grad {
                    let gv = g.data()[0];
                    let dx = vec![gv; self.nodes[*x].value.numel()];
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Reshape { x } => {
                if self.nodes[*x].needs_grad {
                    self.accumulate(grads, *x, g.data());
                }
            }
            Op::CrossEntropy {
                logits,
                class_index,
            } => {
                if self.nodes[*logits].needs_grad {
                    let tl = &self.nodes[*logits].value;
                    let probs = softmax_rows_kernel(tl.data(), 1, tl.numel());
                    let gv = g.data()[0];
                    let dx: Vec<S> = probs
                        .iter()
                        .enumerate()
                        .map(|(j, &pj)| {
                            let target = if j == *class_index { S::one() } else { S::zero() };
                            (pj - target) * gv
                        })
                        .collect();
                    self.accumulate(grads, *logits, &dx);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        id: usize,
        x: usize,
        gamma: usize,
        beta: usize,
        eps: S,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let tx = &self.nodes[x].value;
        let tg = &self.nodes[gamma].value;
        let d = tx.cols();
        let rows = tx.numel() / d;
        let inv_d = S::one() / S::from_f64(d as f64);
        let _ = id;

        let mut dx = vec![S::zero(); tx.numel()];
        let mut dgamma = vec![S::zero(); d];
        let mut dbeta = vec![S::zero(); d];

        for i in 0..rows {
            let xr = &tx.data()[i * d..(i + 1) * d];
            let gr = &g.data()[i * d..(i + 1) * d];

            let mut mean = S::zero();
            for &v in xr {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = S::zero();
            for &v in xr {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let inv_std = (var + eps).sqrt().recip();

            // dxhat = g * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
            let mut mean_dxhat = S::zero();
            let mut mean_dxhat_xhat = S::zero();
            let mut xhat = vec![S::zero(); d];
            let mut dxhat = vec![S::zero(); d];
            for j in 0..d {
                xhat[j] = (xr[j] - mean) * inv_std;
                dxhat[j] = gr[j] * tg.data()[j];
                mean_dxhat += dxhat[j];
                mean_dxhat_xhat += dxhat[j] * xhat[j];
                dgamma[j] += gr[j] * xhat[j];
                dbeta[j] += gr[j];
            }
            mean_dxhat = mean_dxhat * inv_d;
            mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
            for j in 0..d {
                dx[i * d + j] = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            }
        }

        if self.nodes[x].needs_grad {
            self.accumulate(grads, x, &dx);
        }
        if self.nodes[gamma].needs_grad {
            self.accumulate(grads, gamma, &dgamma);
        }
        if self.nodes[beta].needs_grad {
            self.accumulate(grads, beta, &dbeta);
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], id: usize, contribution: &[S]) {
        let slot = &mut grads[id];
        match slot {
            Some(acc) => {
                for (a, &c) in acc.data_mut().iter_mut().zip(contribution) {
                    *a += c;
                }
            }
            None => {
                let shape = self.nodes[id].value.shape().to_vec();
                *slot = Some(
                    Tensor::from_vec(shape, contribution.to_vec())
                        .expect("gradient shape matches value shape"),
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels. Reduction order is fixed (ascending index) so results are
// bit-reproducible and independent of worker-thread count.
// ---------------------------------------------------------------------------

fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], p: usize, q: usize, r: usize) -> Vec<S> {
    let mut c = vec![S::zero(); p * r];
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let c_row = &mut c[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * r..(k + 1) * r];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
    c
}

/// `dA = dC · Bᵀ`
fn matmul_bt_kernel<S: Scalar>(dc: &[S], b: &[S], p: usize, q: usize, r: usize) -> Vec<S> {
    let mut da = vec![S::zero(); p * q];
    for i in 0..p {
        let dc_row = &dc[i * r..(i + 1) * r];
        for k in 0..q {
            let b_row = &b[k * r..(k + 1) * r];
            let mut s = S::zero();
            for (&dv, &bv) in dc_row.iter().zip(b_row) {
                s += dv * bv;
            }
            da[i * q + k] = s;
        }
    }
    da
}

/// `dB = Aᵀ · dC`
fn matmul_at_kernel<S: Scalar>(a: &[S], dc: &[S], p: usize, q: usize, r: usize) -> Vec<S> {
    let mut db = vec![S::zero(); q * r];
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let dc_row = &dc[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            let db_row = &mut db[k * r..(k + 1) * r];
            for (dv, &gv) in db_row.iter_mut().zip(dc_row) {
                *dv += aik * gv;
            }
        }
    }
    db
}

fn transpose_kernel<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn layer_norm_kernel<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    rows: usize,
    d: usize,
    eps: S,
) -> Vec<S> {
    let inv_d = S::one() / S::from_f64(d as f64);
    let mut out = vec![S::zero(); x.len()];
    for i in 0..rows {
        let xr = &x[i * d..(i + 1) * d];
        let o = &mut out[i * d..(i + 1) * d];
        let mut mean = S::zero();
        for &v in xr {
            mean += v;
        }
        mean = mean * inv_d;
        let mut var = S::zero();
        for &v in xr {
            let c = v - mean;
            var += c * c;
        }
        var = var * inv_d;
        let inv_std = (var + eps).sqrt().recip();
        for j in 0..d {
            o[j] = gamma[j] * ((xr[j] - mean) * inv_std) + beta[j];
        }
    }
    out
}

pub(crate) fn softmax_rows_kernel<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let o = &mut out[i * cols..(i + 1) * cols];
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m {
                m = v;
            }
        }
        let mut sum = S::zero();
        for (ov, &v) in o.iter_mut().zip(row) {
            let e = (v - m).exp();
            *ov = e;
            sum += e;
        }
        for ov in o.iter_mut() {
            *ov = *ov / sum;
        }
    }
    out
}

pub(crate) fn gelu_scalar<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let t = (x * S::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf();
    x * (half * (S::one() + t))
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let phi = half * (S::one() + (x * S::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let inv_sqrt_2pi = S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
    phi + x * pdf
}

/// `-log softmax(logits)[class]` via log-sum-exp.
pub(crate) fn cross_entropy_scalar<S: Scalar>(logits: &[S], class: usize) -> S {
    let mut m = logits[0];
    for &v in &logits[1..] {
        if v > m {
            m = v;
        }
    }
    let mut sum = S::zero();
    for &v in logits {
        sum += (v - m).exp();
    }
    sum.ln() + m - logits[class]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tensor2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::matrix(rows)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(tensor2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = tape.leaf(tensor2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let c = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selector_row() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor2(&[vec![1.0, 0.0]]));
        let b = tape.leaf(tensor2(&[vec![5.0], vec![7.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 1]);
        assert_eq!(tape.value(c).data(), &[5.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::from_seed(11);
        let a_data: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b_data: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let a = Tensor::from_vec(vec![3, 4], a_data).unwrap();
        let b = Tensor::from_vec(vec![4, 2], b_data).unwrap();

        // independent per-entry oracle
        let mut expect = vec![0.0f64; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at2(i, k) * b.at2(k, j);
                }
                expect[i * 2 + j] = s;
            }
        }

        let mut tape = Tape::new();
        let va = tape.leaf(a);
        let vb = tape.leaf(b);
        let c = tape.matmul(va, vb).unwrap();
        for (got, want) in tape.value(c).data().iter().zip(&expect) {
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn softmax_uniform_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[0.0f64, 0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        for &v in tape.value(y).data() {
            assert_relative_eq!(v, 1.0 / 3.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        for c in [-40.0f64, 0.0, 3.5, 1e4] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(&[c, c + std::f64::consts::LN_2]));
            let y = tape.softmax_rows(x).unwrap();
            assert_relative_eq!(tape.value(y).data()[0], 1.0 / 3.0, max_relative = 1e-9);
            assert_relative_eq!(tape.value(y).data()[1], 2.0 / 3.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn softmax_frozen_values() {
        // high-precision exp/sum oracle: e^1, e^2, e^3 normalized
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1.0f64, 2.0, 3.0]));
        let y = tape.softmax_rows(x).unwrap();
        let got = tape.value(y).data();
        assert!((got[0] - 0.09003).abs() < 1e-5);
        assert!((got[1] - 0.24473).abs() < 1e-5);
        assert!((got[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn gelu_reference_points() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[0.0f64, 1.0, -10.0]));
        let y = tape.gelu(x);
        let got = tape.value(y).data();
        assert_eq!(got[0], 0.0);
        assert!((got[1] - 0.84134).abs() < 1e-5);
        assert!(got[2].abs() < 1e-8);
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[3.0f64; 5]));
        let gamma = tape.leaf(Tensor::vector(&[1.0; 5]));
        let beta = tape.leaf(Tensor::vector(&[0.0; 5]));
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_symmetric_pair() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1.0f64, -1.0]));
        let gamma = tape.leaf(Tensor::vector(&[1.0, 1.0]));
        let beta = tape.leaf(Tensor::vector(&[0.0, 0.0]));
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let got = tape.value(y).data();
        assert_relative_eq!(got[0], 1.0, max_relative = 1e-4);
        assert_relative_eq!(got[1], -1.0, max_relative = 1e-4);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = Rng::from_seed(5);
        let xs: Vec<f64> = (0..8).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let gs: Vec<f64> = (0..8).map(|_| rng.uniform(0.5, 1.5)).collect();
        let bs: Vec<f64> = (0..8).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let eps = 1e-5;

        let mean: f64 = xs.iter().sum::<f64>() / 8.0;
        let var: f64 = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        let expect: Vec<f64> = xs
            .iter()
            .zip(gs.iter().zip(&bs))
            .map(|(&x, (&g, &b))| g * (x - mean) / (var + eps).sqrt() + b)
            .collect();

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&xs));
        let gamma = tape.leaf(Tensor::vector(&gs));
        let beta = tape.leaf(Tensor::vector(&bs));
        let y = tape.layer_norm(x, gamma, beta, eps).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&expect) {
            assert_relative_eq!(got, want, epsilon = 1e-6);
        }
    }

    #[test]
    fn dropout_degenerate_and_eval_are_identity() {
        let mut tape = Tape::new();
        let mut rng = Rng::from_seed(0);
        let x = tape.leaf(Tensor::vector(&[1.0f64, 2.0, 3.0]));
        let y = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(x, y);
        let z = tape.dropout(x, 0.1, false, &mut rng).unwrap();
        assert_eq!(x, z);
    }

    #[test]
    fn dropout_sample_mean_near_one() {
        let mut tape = Tape::new();
        let mut rng = Rng::from_seed(99);
        let n = 1_000_000;
        let x = tape.leaf(Tensor::filled(vec![n], 1.0f64));
        let y = tape.dropout(x, 0.1, true, &mut rng).unwrap();
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let mut tape = Tape::new();
        let mut rng = Rng::from_seed(0);
        let x = tape.leaf(Tensor::vector(&[1.0f64]));
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn backward_linear_map_broadcasts_input() {
        // loss = sum(W·x) => dW[i][k] = x[k]
        let mut tape = Tape::new();
        let w = tape.param(tensor2(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.0, -0.5]]));
        let x = tape.leaf(tensor2(&[vec![3.0], vec![5.0], vec![7.0]]));
        let prod = tape.matmul(w, x).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let dw = grads.get(w).unwrap();
        assert_eq!(dw.data(), &[3.0, 5.0, 7.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn backward_cross_entropy_is_probs_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::vector(&[0.2f64, -1.0, 0.7, 0.1]));
        let loss = tape.cross_entropy(logits, 2).unwrap();
        let grads = tape.backward(loss).unwrap();
        let probs = softmax_rows_kernel(&[0.2f64, -1.0, 0.7, 0.1], 1, 4);
        let dl = grads.get(logits).unwrap();
        for j in 0..4 {
            let expect = probs[j] - if j == 2 { 1.0 } else { 0.0 };
            assert_relative_eq!(dl.data()[j], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0f64, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn backward_sum_of_params_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![3, 2], vec![0.1f64; 6]).unwrap());
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0f64; 6]);
    }

    #[test]
    fn backward_handles_aliased_inputs() {
        // loss = theta * theta via matmul(theta, theta): d/dtheta = 2*theta
        let mut tape = Tape::new();
        let theta = tape.param(tensor2(&[vec![3.0]]));
        let sq = tape.matmul(theta, theta).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(theta).unwrap().data(), &[6.0]);
    }

    #[test]
    fn identical_runs_produce_identical_tapes_and_grads() {
        let run = || {
            let mut rng = Rng::from_seed(7);
            let mut tape = Tape::new();
            let data: Vec<f32> = (0..12).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            let w = tape.param(Tensor::from_vec(vec![3, 4], data).unwrap());
            let x = tape.leaf(Tensor::filled(vec![4, 2], 0.3f32));
            let y = tape.matmul(w, x).unwrap();
            let sm = tape.softmax_rows(y).unwrap();
            let d = tape.dropout(sm, 0.2, true, &mut rng).unwrap();
            let loss = tape.sum(d);
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).data().to_vec(),
                grads.get(w).unwrap().data().to_vec(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn slice_concat_roundtrip_and_grads() {
        let mut tape = Tape::new();
        let x = tape.param(tensor2(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]));
        let left = tape.slice_cols(x, 0, 2).unwrap();
        let right = tape.slice_cols(x, 2, 2).unwrap();
        let back = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
        let loss = tape.sum(back);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0f64; 8]);
    }

    #[test]
    fn scale_by_entry_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(tensor2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let w = tape.param(Tensor::vector(&[0.5f64, 2.0]));
        let y = tape.scale_by_entry(x, w, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0f64; 4]);
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 10.0]);
    }
}
