//! Reverse-mode tape.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward rule. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients additively; leaf gradients are read back with
//! [`Tape::grad`] or folded into a [`DiffTensor`] with
//! [`Tape::accumulate_into`].

use super::{gemm, DiffTensor, Real, Rng};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable op defined outside this module.
///
/// The tape stores the output value; `backward` receives zeroed buffers
/// shaped like each input and must add the input gradients into them.
pub trait CustomOp<F: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&[F]], output: &[F], out_grad: &[F], input_grads: &mut [Vec<F>]);
}

enum Op<F: Real> {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    Add(Var, Var),
    Scale(Var, F),
    AddConst(Var),
    MulConst(Var, Vec<F>),
    Reshape(Var),
    Sum(Var),
    Softmax {
        x: Var,
        n: usize,
    },
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        d: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_id: usize,
        probs: Vec<F>,
        count: usize,
        v: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        d: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<F>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<F>>,
    },
}

struct Node<F: Real> {
    shape: Vec<usize>,
    value: Vec<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

// GELU tanh-approximation constants.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a = *a + *b;
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, requires_grad: bool, op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> DiffTensor<F> {
        let n = &self.nodes[v.0];
        DiffTensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient after [`Tape::backward`]; `None` if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `tensor`'s accumulator.
    pub fn accumulate_into(&self, v: Var, tensor: &mut DiffTensor<F>) {
        if let Some(g) = self.grad(v) {
            tensor.accumulate_grad(g);
        }
    }

    /// Registers a tensor as a leaf. Trainable tensors become differentiable.
    pub fn leaf(&mut self, t: &DiffTensor<F>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            t.is_trainable(),
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<F>) -> Result<Var> {
        let t = DiffTensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    /// `x·w + b` over the last axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 || ws[0] != last_dim(&xs) {
            return Err(Error::Shape {
                op: "affine",
                left: xs,
                right: ws,
            });
        }
        let (d_in, d_out) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::Shape {
                    op: "affine bias",
                    left: ws,
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let rows = self.value(x).len() / d_in.max(1);
        let mut out = vec![F::zero(); rows * d_out];
        gemm(
            rows,
            d_in,
            d_out,
            self.value(x),
            false,
            self.value(w),
            false,
            F::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_exact_mut(d_out.max(1)) {
                add_into(row, bv);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Affine {
                x,
                w,
                b,
                rows,
                d_in,
                d_out,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).iter().map(|x| *x * c).collect();
        self.push(self.shape(a).to_vec(), out, self.rg(a), Op::Scale(a, c))
    }

    /// Adds a constant tensor of the same shape (gradient passes through).
    pub fn add_const(&mut self, a: Var, c: &[F]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "add_const",
                left: self.shape(a).to_vec(),
                right: vec![c.len()],
            });
        }
        let out = self.value(a).iter().zip(c).map(|(x, y)| *x + *y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, self.rg(a), Op::AddConst(a)))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<F>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "mul_const",
                left: self.shape(a).to_vec(),
                right: vec![c.len()],
            });
        }
        let out = self.value(a).iter().zip(&c).map(|(x, y)| *x * *y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, self.rg(a), Op::MulConst(a, c)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, self.rg(a), Op::Reshape(a)))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(Vec::new(), vec![s], self.rg(a), Op::Sum(a))
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = last_dim(&shape);
        if n == 0 {
            return Err(Error::Shape {
                op: "softmax",
                left: shape,
                right: vec![1],
            });
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(shape, out, self.rg(x), Op::Softmax { x, n }))
    }

    /// Tanh-approximation GELU: `0.5·x·(1 + tanh(sqrt(2/pi)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = F::from_f64_lossy(GELU_C);
        let a = F::from_f64_lossy(GELU_A);
        let half = F::from_f64_lossy(0.5);
        let out = self
            .value(x)
            .iter()
            .map(|&v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        self.push(self.shape(x).to_vec(), out, self.rg(x), Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(F::zero())).collect();
        self.push(self.shape(x).to_vec(), out, self.rg(x), Op::Relu(x))
    }

    /// Standardizes each last-axis row, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                left: shape,
                right: self.shape(gain).to_vec(),
            });
        }
        // Row statistics are computed in f64 whatever `F` is; in f32 the
        // backward cancellation is otherwise amplified by up to 1/sqrt(eps).
        let inv_d = 1.0 / d as f64;
        let eps = eps.to_f64_lossy();
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xs.len() / d;
        let mut out = vec![F::zero(); xs.len()];
        let mut xhat = vec![0.0f64; xs.len()];
        let mut rstd = vec![0.0f64; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.to_f64_lossy()).sum::<f64>() * inv_d;
            let var = row
                .iter()
                .map(|v| (v.to_f64_lossy() - mean).powi(2))
                .sum::<f64>()
                * inv_d;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j].to_f64_lossy() - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = F::from_f64_lossy(h) * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                rstd,
            },
        ))
    }

    /// Inverted dropout. Identity (the same node) when not training or when
    /// `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| {
                if rng.uniform() < rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(a, m)| *a * *m)
            .collect();
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            self.rg(x),
            Op::Dropout { x, mask },
        ))
    }

    /// Mean negative log-likelihood over rows whose target is not `ignore_id`.
    /// Zero (with zero gradient) when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = last_dim(&shape);
        let rows = self.value(logits).len() / v.max(1);
        if rows != targets.len() || v == 0 {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: shape,
                right: vec![targets.len()],
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_id {
                continue;
            }
            if t >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let row = &mut probs[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<F>().ln();
            total += (lse - row[t]).to_f64_lossy();
            count += 1;
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        let loss = if count == 0 {
            F::zero()
        } else {
            F::from_f64_lossy(total / count as f64)
        };
        Ok(self.push(
            Vec::new(),
            vec![loss],
            self.rg(logits),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_id,
                probs,
                count,
                v,
            },
        ))
    }

    /// Row gather `table[ids]`; output shape is `ids_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape {
                op: "embedding",
                left: ts,
                right: ids_shape.to_vec(),
            });
        }
        let (rows, d) = (ts[0], ts[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        Ok(self.push(
            shape,
            out,
            self.rg(table),
            Op::Gather {
                table,
                ids: ids.to_vec(),
                d,
            },
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[B, S, D]` with `D` split into `heads` contiguous
    /// chunks. `bias` is an optional additive `[S, S, heads]` score bias
    /// (query, key, head). `allowed` is a `[B, S, S]` mask; every query row
    /// must allow at least one key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        allowed: &[bool],
        heads: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || self.shape(k) != shape || self.shape(v) != shape {
            return Err(Error::Shape {
                op: "attention",
                left: shape,
                right: self.shape(k).to_vec(),
            });
        }
        let (batch, seq, dm) = (shape[0], shape[1], shape[2]);
        if heads == 0 || dm % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dm} not divisible by {heads} heads"
            )));
        }
        if allowed.len() != batch * seq * seq {
            return Err(Error::Shape {
                op: "attention mask",
                left: vec![batch, seq, seq],
                right: vec![allowed.len()],
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [seq, seq, heads] {
                return Err(Error::Shape {
                    op: "attention bias",
                    left: vec![seq, seq, heads],
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let dh = dm / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let bv = bias.map(|b| self.value(b));
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        let mut out = vec![F::zero(); batch * seq * dm];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * dm + h * dh..][..dh];
                    let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mrow = &allowed[(b * seq + i) * seq..][..seq];
                    let mut mx = F::neg_infinity();
                    for j in 0..seq {
                        if !mrow[j] {
                            continue;
                        }
                        let kj = &kv[(b * seq + j) * dm + h * dh..][..dh];
                        let mut s = F::zero();
                        for t in 0..dh {
                            s = s + qi[t] * kj[t];
                        }
                        s = s * scale;
                        if let Some(bv) = bv {
                            s = s + bv[(i * seq + j) * heads + h];
                        }
                        prow[j] = s;
                        mx = mx.max(s);
                    }
                    if mx == F::neg_infinity() {
                        return Err(Error::Config(format!(
                            "attention row {i} of batch {b} has no visible key"
                        )));
                    }
                    let mut z = F::zero();
                    for j in 0..seq {
                        if mrow[j] {
                            prow[j] = (prow[j] - mx).exp();
                            z = z + prow[j];
                        }
                    }
                    let oi = &mut out[(b * seq + i) * dm + h * dh..][..dh];
                    for j in 0..seq {
                        if !mrow[j] {
                            continue;
                        }
                        prow[j] = prow[j] / z;
                        let p = prow[j];
                        let vj = &vv[(b * seq + j) * dm + h * dh..][..dh];
                        for t in 0..dh {
                            oi[t] = oi[t] + p * vj[t];
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                bias,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Appends an externally defined op. Inputs must be distinct nodes.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<F>,
        op: Box<dyn CustomOp<F>>,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Shape {
                op: op.name(),
                left: shape,
                right: vec![value.len()],
            });
        }
        for (i, a) in inputs.iter().enumerate() {
            if inputs[..i].contains(a) {
                return Err(Error::Config(format!(
                    "{}: repeated input node {}",
                    op.name(),
                    a.0
                )));
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    /// Back-propagates from a single-element node. Gradients from any earlier
    /// call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: self.nodes[loss.0].shape.clone(),
                right: Vec::new(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backward_node(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z = z + *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

fn slot<'a, F: Real>(
    nodes: &[Node<F>],
    grads: &'a mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
}

fn backward_node<F: Real>(nodes: &[Node<F>], grads: &mut [Option<Vec<F>>], i: usize, g: &[F]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        &Op::Affine {
            x,
            w,
            b,
            rows,
            d_in,
            d_out,
        } => {
            if let Some(dx) = slot(nodes, grads, x) {
                gemm(rows, d_out, d_in, g, false, &nodes[w.0].value, true, F::one(), dx);
            }
            if let Some(dw) = slot(nodes, grads, w) {
                gemm(d_in, rows, d_out, &nodes[x.0].value, true, g, false, F::one(), dw);
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, b) {
                    for row in g.chunks_exact(d_out.max(1)) {
                        add_into(db, row);
                    }
                }
            }
        }
        &Op::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, b) {
                add_into(db, g);
            }
        }
        &Op::Scale(a, c) => {
            if let Some(da) = slot(nodes, grads, a) {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d = *d + *gv * c;
                }
            }
        }
        &Op::AddConst(a) | &Op::Reshape(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g);
            }
        }
        Op::MulConst(a, c) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gv), cv) in da.iter_mut().zip(g).zip(c) {
                    *d = *d + *gv * *cv;
                }
            }
        }
        &Op::Sum(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                for d in da.iter_mut() {
                    *d = *d + g[0];
                }
            }
        }
        &Op::Softmax { x, n } => {
            if let Some(dx) = slot(nodes, grads, x) {
                for ((y, gr), d) in node
                    .value
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(dx.chunks_exact_mut(n))
                {
                    let dot: F = y.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for j in 0..n {
                        d[j] = d[j] + y[j] * (gr[j] - dot);
                    }
                }
            }
        }
        &Op::Gelu(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                let c = F::from_f64_lossy(GELU_C);
                let a = F::from_f64_lossy(GELU_A);
                let half = F::from_f64_lossy(0.5);
                let three = F::from_f64_lossy(3.0);
                for ((d, &v), gv) in dx.iter_mut().zip(&nodes[x.0].value).zip(g) {
                    let t = (c * (v + a * v * v * v)).tanh();
                    let dt = c * (F::one() + three * a * v * v);
                    let deriv = half * (F::one() + t) + half * v * (F::one() - t * t) * dt;
                    *d = *d + *gv * deriv;
                }
            }
        }
        &Op::Relu(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                for ((d, &v), gv) in dx.iter_mut().zip(&nodes[x.0].value).zip(g) {
                    if v > F::zero() {
                        *d = *d + *gv;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            d,
            xhat,
            rstd,
        } => {
            let d = *d;
            let gv = &nodes[gain.0].value;
            if let Some(dg) = slot(nodes, grads, *gain) {
                for (row_g, row_h) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        dg[j] = dg[j] + row_g[j] * F::from_f64_lossy(row_h[j]);
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for row_g in g.chunks_exact(d) {
                    add_into(db, row_g);
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let inv_d = 1.0 / d as f64;
                let mut dh = vec![0.0f64; d];
                for (r, ((row_g, row_h), row_dx)) in g
                    .chunks_exact(d)
                    .zip(xhat.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        dh[j] = row_g[j].to_f64_lossy() * gv[j].to_f64_lossy();
                        m1 += dh[j];
                        m2 += dh[j] * row_h[j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        row_dx[j] = row_dx[j]
                            + F::from_f64_lossy(rstd[r] * (dh[j] - m1 - row_h[j] * m2));
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d = *d + *gv * *m;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            ignore_id,
            probs,
            count,
            v,
        } => {
            if *count == 0 {
                return;
            }
            if let Some(dl) = slot(nodes, grads, *logits) {
                let s = g[0] / F::from_usize(*count).unwrap();
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore_id {
                        continue;
                    }
                    let prow = &probs[r * v..(r + 1) * v];
                    let drow = &mut dl[r * v..(r + 1) * v];
                    for j in 0..*v {
                        drow[j] = drow[j] + s * prow[j];
                    }
                    drow[t] = drow[t] - s;
                }
            }
        }
        Op::Gather { table, ids, d } => {
            if let Some(dt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            bias,
            batch,
            seq,
            heads,
            probs,
        } => {
            let (batch, seq, heads) = (*batch, *seq, *heads);
            let dm = node.shape[2];
            let dh = dm / heads;
            let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let mut dq = vec![F::zero(); qv.len()];
            let mut dk = vec![F::zero(); kv.len()];
            let mut dv = vec![F::zero(); vv.len()];
            let mut dbias = vec![F::zero(); seq * seq * heads];
            let mut dp = vec![F::zero(); seq];
            for b in 0..batch {
                for h in 0..heads {
                    for i in 0..seq {
                        let prow = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                        let gi = &g[(b * seq + i) * dm + h * dh..][..dh];
                        let mut dot = F::zero();
                        for j in 0..seq {
                            if prow[j] == F::zero() {
                                dp[j] = F::zero();
                                continue;
                            }
                            let off = (b * seq + j) * dm + h * dh;
                            let vj = &vv[off..off + dh];
                            let mut s = F::zero();
                            for t in 0..dh {
                                s = s + gi[t] * vj[t];
                                dv[off + t] = dv[off + t] + prow[j] * gi[t];
                            }
                            dp[j] = s;
                            dot = dot + prow[j] * s;
                        }
                        let qoff = (b * seq + i) * dm + h * dh;
                        for j in 0..seq {
                            if prow[j] == F::zero() {
                                continue;
                            }
                            let ds = prow[j] * (dp[j] - dot);
                            dbias[(i * seq + j) * heads + h] = dbias[(i * seq + j) * heads + h] + ds;
                            let koff = (b * seq + j) * dm + h * dh;
                            let dss = ds * scale;
                            for t in 0..dh {
                                dq[qoff + t] = dq[qoff + t] + dss * kv[koff + t];
                                dk[koff + t] = dk[koff + t] + dss * qv[qoff + t];
                            }
                        }
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *q) {
                add_into(s, &dq);
            }
            if let Some(s) = slot(nodes, grads, *k) {
                add_into(s, &dk);
            }
            if let Some(s) = slot(nodes, grads, *v) {
                add_into(s, &dv);
            }
            if let Some(bias) = bias {
                if let Some(s) = slot(nodes, grads, *bias) {
                    add_into(s, &dbias);
                }
            }
        }
        Op::Custom { inputs, op } => {
            let values: Vec<&[F]> = inputs.iter().map(|v| nodes[v.0].value.as_slice()).collect();
            let mut locals: Vec<Vec<F>> = values.iter().map(|v| vec![F::zero(); v.len()]).collect();
            op.backward(&values, &node.value, g, &mut locals);
            for (v, local) in inputs.iter().zip(&locals) {
                if let Some(s) = slot(nodes, grads, *v) {
                    add_into(s, local);
                }
            }
        }
    }
}
