//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation reads
//! existing nodes and pushes a new one, so node order is already a
//! topological order and [`Tape::backward`] is a single reverse sweep that
//! visits each recorded op once.
//!
//! ```
//! use noble::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels::{gemm, gemm_acc, gemm_nt, gemm_tn};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const RMSNORM_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    LeakyRelu,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Unary {
    pub fn eval<F: Real>(self, x: F) -> F {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::LeakyRelu => {
                if x > F::zero() {
                    x
                } else {
                    x * F::of(LEAKY_RELU_SLOPE)
                }
            }
            Unary::Gelu => {
                let u = F::of(GELU_C) * (x + F::of(GELU_K) * x * x * x);
                F::of(0.5) * x * (F::one() + u.tanh())
            }
        }
    }

    pub fn derivative<F: Real>(self, x: F) -> F {
        match self {
            Unary::Tanh => {
                let t = x.tanh();
                F::one() - t * t
            }
            Unary::LeakyRelu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::of(LEAKY_RELU_SLOPE)
                }
            }
            Unary::Gelu => {
                let c = F::of(GELU_C);
                let k = F::of(GELU_K);
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (F::one() + F::of(3.0) * k * x * x);
                F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * du
            }
        }
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: F },
    Unary { a: Var, kind: Unary },
    Map { a: Var, deriv: Vec<F> },
    CosineMap { x: Var, omega: Var, phi: Var, sin: Vec<F> },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Vec<F> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<F> },
    Rope { x: Var, cos: Vec<F>, sin: Vec<F>, dims: [usize; 4] },
    CausalAttention { q: Var, k: Var, v: Var, probs: Vec<F>, dims: [usize; 4] },
    SplitHeads { x: Var, dims: [usize; 4] },
    MergeHeads { x: Var, dims: [usize; 4] },
    Embedding { table: Var, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Operation recorder and gradient store for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
    flops: u64,
}

/// `b` broadcasts into `a` when it equals a trailing slice of `a`'s shape.
fn is_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && &a[a.len() - b.len()..] == b
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations counted so far, forward and backward.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears all gradients so that backward may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn make(&self, shape: Vec<usize>, data: Vec<F>) -> Tensor<F> {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    /// `a[..., k] · b[k, n]`, leading axes of `a` act as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", left: sa, right: sb });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let out = gemm(self.data(a), self.data(b), m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.make(shape, out), rg, Op::MatMul { a, b, m, k, n }))
    }

    /// `a[..., k] · b[n, k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[1] {
            return Err(Error::ShapeMismatch { op: "matmul_nt", left: sa, right: sb });
        }
        let k = sb[1];
        let n = sb[0];
        let m = self.value(a).numel() / k;
        let out = gemm_nt(self.data(a), self.data(b), m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.make(shape, out), rg, Op::MatMulNt { a, b, m, k, n }))
    }

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sa, sb) {
            Ok((a, b))
        } else if is_suffix(sb, sa) {
            Ok((b, a))
        } else {
            Err(Error::ShapeMismatch { op, left: sa.to_vec(), right: sb.to_vec() })
        }
    }

    /// Elementwise sum; the smaller operand broadcasts over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("add", a, b)?;
        let nb = self.value(b).numel();
        let bd = self.data(b);
        let out: Vec<F> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % nb])
            .collect();
        self.flops += out.len() as u64;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.make(shape, out), rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, F::of(-1.0));
        self.add(a, nb)
    }

    /// Elementwise product; the smaller operand broadcasts over leading axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("mul", a, b)?;
        let nb = self.value(b).numel();
        let bd = self.data(b);
        let out: Vec<F> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % nb])
            .collect();
        self.flops += out.len() as u64;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.make(shape, out), rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out: Vec<F> = self.data(a).iter().map(|&x| x * c).collect();
        self.flops += out.len() as u64;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(self.make(shape, out), rg, Op::Scale { a, c })
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let out: Vec<F> = self.data(a).iter().map(|&x| kind.eval(x)).collect();
        self.flops += 8 * out.len() as u64;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(self.make(shape, out), rg, Op::Unary { a, kind })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::LeakyRelu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map(&mut self, a: Var, f: impl Fn(F) -> F, df: impl Fn(F) -> F) -> Var {
        let x = self.data(a);
        let out: Vec<F> = x.iter().map(|&v| f(v)).collect();
        let deriv: Vec<F> = x.iter().map(|&v| df(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(self.make(shape, out), rg, Op::Map { a, deriv })
    }

    /// `cos(ω ⊙ x + φ)` with `ω`, `φ` broadcast along the last axis of `x`.
    pub fn cosine_map(&mut self, x: Var, omega: Var, phi: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [omega, phi] {
            let sp = self.shape(p);
            if sp.len() != 1 || sp[0] != d {
                return Err(Error::ShapeMismatch {
                    op: "cosine_map",
                    left: self.shape(x).to_vec(),
                    right: sp.to_vec(),
                });
            }
        }
        let (w, ph) = (self.data(omega), self.data(phi));
        let xs = self.data(x);
        let mut out = Vec::with_capacity(xs.len());
        let mut sin = Vec::with_capacity(xs.len());
        for (i, &v) in xs.iter().enumerate() {
            let arg = w[i % d] * v + ph[i % d];
            out.push(arg.cos());
            sin.push(arg.sin());
        }
        self.flops += 10 * out.len() as u64;
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, omega, phi]);
        Ok(self.push(self.make(shape, out), rg, Op::CosineMap { x, omega, phi, sin }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<F>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.data(a).iter().copied().sum::<F>() / F::of(n as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Mean { a })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::Reshape { a }))
    }

    /// Mean of `-log softmax(logits)[target]` over all rows of `logits[..., v]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits).last_dim();
        let rows = self.value(logits).numel() / v;
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some((index, &target)) = targets.iter().enumerate().find(|(_, &t)| t >= v) {
            return Err(Error::TargetOutOfRange { index, target, classes: v });
        }
        let z = self.data(logits);
        let mut probs = vec![F::zero(); z.len()];
        let mut total = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &z[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[r * v + j] = e;
                s = s + e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / s;
            }
            total = total + (max + s.ln() - row[t]);
        }
        self.flops += 6 * z.len() as u64;
        let loss = total / F::of(rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCe { logits, targets: targets.to_vec(), probs },
        ))
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ gain` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] {
            return Err(Error::ShapeMismatch {
                op: "rmsnorm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let rows = xs.len() / d;
        let eps = F::of(RMSNORM_EPS);
        let mut out = vec![F::zero(); xs.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let ms = row.iter().map(|&v| v * v).sum::<F>() / F::of(d as f64);
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..d {
                out[r * d + j] = row[j] * inv * g[j];
            }
        }
        self.flops += 4 * xs.len() as u64;
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain]);
        Ok(self.push(self.make(shape, out), rg, Op::RmsNorm { x, gain, inv_rms }))
    }

    fn dims4(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op,
                msg: format!("expected [batch, heads, time, head_dim], got {s:?}"),
            });
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Rotary position embedding on `x[b, h, t, hd]`: pair `(2i, 2i+1)` at
    /// position `p` rotates by `p · base^(-2i/hd)`.
    pub fn rope(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let dims = self.dims4("rope", x)?;
        let [b, h, t, hd] = dims;
        if hd % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "rope",
                msg: format!("head_dim must be even, got {hd}"),
            });
        }
        if positions.len() != t {
            return Err(Error::ShapeMismatch {
                op: "rope",
                left: self.shape(x).to_vec(),
                right: vec![positions.len()],
            });
        }
        let half = hd / 2;
        let mut cos = Vec::with_capacity(t * half);
        let mut sin = Vec::with_capacity(t * half);
        for &p in positions {
            for i in 0..half {
                let theta = ROPE_BASE.powf(-((2 * i) as f64) / hd as f64);
                let ang = p as f64 * theta;
                cos.push(F::of(ang.cos()));
                sin.push(F::of(ang.sin()));
            }
        }
        let xs = self.data(x);
        let mut out = vec![F::zero(); xs.len()];
        for bh in 0..b * h {
            for ti in 0..t {
                let base = (bh * t + ti) * hd;
                for i in 0..half {
                    let (c, s) = (cos[ti * half + i], sin[ti * half + i]);
                    let (x0, x1) = (xs[base + 2 * i], xs[base + 2 * i + 1]);
                    out[base + 2 * i] = x0 * c - x1 * s;
                    out[base + 2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
        self.flops += 3 * xs.len() as u64;
        let rg = self.rg(&[x]);
        Ok(self.push(self.make(dims.to_vec(), out), rg, Op::Rope { x, cos, sin, dims }))
    }

    /// `softmax(q kᵀ / sqrt(hd) + mask) v` with a causal mask, on `[b, h, t, hd]`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let dims = self.dims4("causal_attention", q)?;
        for other in [k, v] {
            if self.shape(other) != dims {
                return Err(Error::ShapeMismatch {
                    op: "causal_attention",
                    left: dims.to_vec(),
                    right: self.shape(other).to_vec(),
                });
            }
        }
        let [b, h, t, hd] = dims;
        let scale = F::one() / F::of(hd as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![F::zero(); b * h * t * t];
        let mut out = vec![F::zero(); qd.len()];
        for bh in 0..b * h {
            let off = bh * t * hd;
            for i in 0..t {
                let qi = &qd[off + i * hd..off + (i + 1) * hd];
                let prow = &mut probs[(bh * t + i) * t..(bh * t + i + 1) * t];
                let mut max = F::neg_infinity();
                for j in 0..=i {
                    let kj = &kd[off + j * hd..off + (j + 1) * hd];
                    let s = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<F>() * scale;
                    prow[j] = s;
                    max = max.max(s);
                }
                let mut z = F::zero();
                for p in prow.iter_mut().take(i + 1) {
                    *p = (*p - max).exp();
                    z = z + *p;
                }
                let orow = &mut out[off + i * hd..off + (i + 1) * hd];
                for j in 0..=i {
                    prow[j] = prow[j] / z;
                    let vj = &vd[off + j * hd..off + (j + 1) * hd];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o = *o + prow[j] * vv;
                    }
                }
            }
        }
        self.flops += 2 * (b * h * t * t * hd) as u64;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            self.make(dims.to_vec(), out),
            rg,
            Op::CausalAttention { q, k, v, probs, dims },
        ))
    }

    /// `[b, t, h·hd] → [b, h, t, hd]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::InvalidShape {
                op: "split_heads",
                msg: format!("cannot split {s:?} into {heads} heads"),
            });
        }
        let dims = [s[0], heads, s[1], s[2] / heads];
        let out = permute_0213(self.data(x), [s[0], s[1], heads, s[2] / heads]);
        let rg = self.rg(&[x]);
        Ok(self.push(self.make(dims.to_vec(), out), rg, Op::SplitHeads { x, dims }))
    }

    /// `[b, h, t, hd] → [b, t, h·hd]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims4("merge_heads", x)?;
        let [b, h, t, hd] = dims;
        let out = permute_0213(self.data(x), dims);
        let rg = self.rg(&[x]);
        Ok(self.push(self.make(vec![b, t, h * hd], out), rg, Op::MergeHeads { x, dims }))
    }

    /// Row gather from `table[vocab, d]`; output shape is `shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || shape.iter().product::<usize>() != ids.len() {
            return Err(Error::ShapeMismatch { op: "embedding", left: st, right: shape.to_vec() });
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some((index, &id)) = ids.iter().enumerate().find(|(_, &i)| i >= vocab) {
            return Err(Error::TokenOutOfRange { index, id, vocab });
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let mut oshape = shape.to_vec();
        oshape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(self.make(oshape, out), rg, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Populates gradients of every `requires_grad` ancestor of `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, delta) in contribs {
                self.accumulate(v, delta);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<F>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a = *a + d;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    fn node_backward(&mut self, i: usize, g: &[F]) -> Vec<(Var, Vec<F>)> {
        let mut out = Vec::new();
        let mut extra_flops = 0u64;
        let node = &self.nodes[i];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if want(a) {
                    out.push((a, gemm_nt(g, self.data(b), m, n, k)));
                    extra_flops += 2 * (m * k * n) as u64;
                }
                if want(b) {
                    out.push((b, gemm_tn(self.data(a), g, m, k, n)));
                    extra_flops += 2 * (m * k * n) as u64;
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if want(a) {
                    out.push((a, gemm(g, self.data(b), m, n, k)));
                    extra_flops += 2 * (m * k * n) as u64;
                }
                if want(b) {
                    out.push((b, gemm_tn(g, self.data(a), m, n, k)));
                    extra_flops += 2 * (m * k * n) as u64;
                }
            }
            &Op::Add { a, b } => {
                if want(a) {
                    out.push((a, g.to_vec()));
                }
                if want(b) {
                    out.push((b, fold_leading(g, self.value(b).numel())));
                }
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.data(a), self.data(b));
                let nb = bd.len();
                if want(a) {
                    out.push((a, g.iter().enumerate().map(|(j, &gv)| gv * bd[j % nb]).collect()));
                }
                if want(b) {
                    let prod: Vec<F> = g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect();
                    out.push((b, fold_leading(&prod, nb)));
                }
            }
            &Op::Scale { a, c } => out.push((a, g.iter().map(|&gv| gv * c).collect())),
            &Op::Unary { a, kind } => {
                let x = self.data(a);
                out.push((a, g.iter().zip(x).map(|(&gv, &xv)| gv * kind.derivative(xv)).collect()));
            }
            Op::Map { a, deriv } => {
                out.push((*a, g.iter().zip(deriv).map(|(&gv, &d)| gv * d).collect()));
            }
            Op::CosineMap { x, omega, phi, sin } => {
                let (x, omega, phi) = (*x, *omega, *phi);
                let d = self.value(omega).numel();
                let w = self.data(omega);
                let xs = self.data(x);
                // d/d(arg) of cos(arg) is -sin(arg)
                let darg: Vec<F> = g.iter().zip(sin).map(|(&gv, &s)| -gv * s).collect();
                if want(x) {
                    out.push((x, darg.iter().enumerate().map(|(j, &da)| da * w[j % d]).collect()));
                }
                if want(omega) {
                    let mut gw = vec![F::zero(); d];
                    for (j, (&da, &xv)) in darg.iter().zip(xs).enumerate() {
                        gw[j % d] = gw[j % d] + da * xv;
                    }
                    out.push((omega, gw));
                }
                if want(phi) {
                    out.push((phi, fold_leading(&darg, d)));
                }
            }
            &Op::Sum { a } => {
                out.push((a, vec![g[0]; self.value(a).numel()]));
            }
            &Op::Mean { a } => {
                let n = self.value(a).numel();
                out.push((a, vec![g[0] / F::of(n as f64); n]));
            }
            &Op::Reshape { a } => out.push((a, g.to_vec())),
            Op::SoftmaxCe { logits, targets, probs } => {
                let v = self.value(*logits).last_dim();
                let scale = g[0] / F::of(targets.len() as f64);
                let mut d: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * v + t] = d[r * v + t] - scale;
                }
                out.push((*logits, d));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let xs = self.data(x);
                let gn = self.data(gain);
                let dim = gn.len();
                if want(x) {
                    let mut dx = vec![F::zero(); xs.len()];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = &xs[r * dim..(r + 1) * dim];
                        let grow = &g[r * dim..(r + 1) * dim];
                        let dot = (0..dim).map(|j| grow[j] * gn[j] * row[j]).sum::<F>();
                        let c = inv * inv * inv * dot / F::of(dim as f64);
                        for j in 0..dim {
                            dx[r * dim + j] = inv * gn[j] * grow[j] - row[j] * c;
                        }
                    }
                    out.push((x, dx));
                }
                if want(gain) {
                    let mut dg = vec![F::zero(); dim];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..dim {
                            dg[j] = dg[j] + g[r * dim + j] * xs[r * dim + j] * inv;
                        }
                    }
                    out.push((gain, dg));
                }
            }
            Op::Rope { x, cos, sin, dims } => {
                let [b, h, t, hd] = *dims;
                let half = hd / 2;
                let mut dx = vec![F::zero(); g.len()];
                for bh in 0..b * h {
                    for ti in 0..t {
                        let base = (bh * t + ti) * hd;
                        for i in 0..half {
                            let (c, s) = (cos[ti * half + i], sin[ti * half + i]);
                            let (g0, g1) = (g[base + 2 * i], g[base + 2 * i + 1]);
                            dx[base + 2 * i] = g0 * c + g1 * s;
                            dx[base + 2 * i + 1] = -g0 * s + g1 * c;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::CausalAttention { q, k, v, probs, dims } => {
                let (q, k, v) = (*q, *k, *v);
                let [b, h, t, hd] = *dims;
                let scale = F::one() / F::of(hd as f64).sqrt();
                let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
                let mut dq = vec![F::zero(); qd.len()];
                let mut dk = vec![F::zero(); kd.len()];
                let mut dv = vec![F::zero(); vd.len()];
                let mut dp = vec![F::zero(); t];
                for bh in 0..b * h {
                    let off = bh * t * hd;
                    for i in 0..t {
                        let prow = &probs[(bh * t + i) * t..(bh * t + i + 1) * t];
                        let gi = &g[off + i * hd..off + (i + 1) * hd];
                        let mut dot = F::zero();
                        for j in 0..=i {
                            let vj = &vd[off + j * hd..off + (j + 1) * hd];
                            dp[j] = gi.iter().zip(vj).map(|(&a, &c)| a * c).sum::<F>();
                            dot = dot + dp[j] * prow[j];
                            let dvj = &mut dv[off + j * hd..off + (j + 1) * hd];
                            for (o, &gv) in dvj.iter_mut().zip(gi) {
                                *o = *o + prow[j] * gv;
                            }
                        }
                        for j in 0..=i {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            for c in 0..hd {
                                dq[off + i * hd + c] = dq[off + i * hd + c] + ds * kd[off + j * hd + c];
                                dk[off + j * hd + c] = dk[off + j * hd + c] + ds * qd[off + i * hd + c];
                            }
                        }
                    }
                }
                extra_flops += 4 * (b * h * t * t * hd) as u64;
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if want(var) {
                        out.push((var, d));
                    }
                }
            }
            &Op::SplitHeads { x, dims } => {
                out.push((x, permute_0213(g, dims)));
            }
            &Op::MergeHeads { x, dims } => {
                let [b, h, t, hd] = dims;
                out.push((x, permute_0213(g, [b, t, h, hd])));
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                let mut dt = vec![F::zero(); self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + g[r * d + j];
                    }
                }
                out.push((*table, dt));
            }
        }
        self.flops += extra_flops + g.len() as u64;
        out
    }
}

/// Sums a `[rep, n]` buffer over its leading axis.
fn fold_leading<F: Real>(g: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n];
    for chunk in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    out
}

/// Swaps axes 1 and 2 of a row-major `[a, b, c, d]` buffer.
fn permute_0213<F: Real>(x: &[F], [a, b, c, d]: [usize; 4]) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            for l in 0..c {
                let src = ((i * b + j) * c + l) * d;
                let dst = ((i * c + l) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

/// `out += a · b`, exported for reference computations.
pub fn matmul_into<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    gemm_acc(a, b, out, m, k, n);
}
