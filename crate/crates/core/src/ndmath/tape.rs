//! Reverse-mode differentiation over a linear record of forward ops.

use super::kernels::{self, AttnGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    MatmulNt(usize, usize),
    Sum(usize),
    Mean(usize),
    Abs(usize),
    Square(usize),
    Relu(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<f64>,
    },
    Gather {
        x: usize,
        idx: Vec<usize>,
    },
    Concat(Vec<usize>),
    Reshape(usize),
    TransposeLast2(usize),
    Conv {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Upsample2(usize),
    /// Per-channel scale of a `[B, C, T]` input; holds the scales.
    ChannelAffine(usize, Vec<T>),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        segments: Vec<usize>,
        key_mask: Option<Vec<bool>>,
        probs: Vec<Vec<T>>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    StopGrad,
    StraightThrough(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// participate in the loss.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Const,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), name, f)?;
        Ok(self.push(out, op(a.0, b.0), &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// Adds a vector along the last axis (`bias.shape == [cols]`), or per
    /// channel for rank-3 `[batch, channels, len]` inputs when
    /// `bias.shape == [channels]` and the last axis differs.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.rank() != 1 || bv.len() != xv.cols() {
            return Err(Error::Dimension {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(out, Op::AddBias(x.0, bias.0), &[x.0, bias.0]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let st = T::of(s);
        let out = self.value(x).map(|v| v * st);
        self.push(out, Op::Scale(x.0, s), &[x.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Matmul(a.0, b.0), &[a.0, b.0]))
    }

    /// `a · bᵀ` for `a: [.., k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.cols() != bv.shape()[1] {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[0]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nt(m, k, n, av.data(), bv.data(), &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(out, Op::MatmulNt(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_acc();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean_acc();
        self.push(Tensor::scalar(T::of(s)), Op::Mean(x.0), &[x.0])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs(x.0), &[x.0])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x.0), &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x.0), &[x.0])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::gelu(self.value(x))?;
        Ok(self.push(out, Op::Gelu(x.0), &[x.0]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x.0), &[x.0]))
    }

    /// Normalises the last axis, then applies `gamma * x̂ + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.check_finite("layernorm")?;
        let c = xv.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [c] || b.shape() != [c] {
            return Err(Error::Dimension {
                op: "layernorm",
                left: xv.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let (xhat, rstd) = kernels::layernorm_rows(xv.data(), c);
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(c) {
            for ((o, &gv), &bv) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// Row gather over the flattened leading axes; also serves as embedding
    /// lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(idx)?;
        Ok(self.push(
            out,
            Op::Gather {
                x: x.0,
                idx: idx.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Stacks 2-D parts with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: self.shape(parts[0]),
                    right: pv.shape().to_vec(),
                });
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out = Tensor::from_parts(vec![rows, c], data);
        Ok(self.push(out, Op::Concat(ids.clone()), &ids))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x.0), &[x.0]))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose_last2()?;
        Ok(self.push(out, Op::TransposeLast2(x.0), &[x.0]))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv1d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(
            out,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
            &[x.0, w.0, b.0],
        ))
    }

    /// Nearest-neighbour ×2 upsampling along the last axis.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() *= 2;
        let data: Vec<T> = xv.data().iter().flat_map(|&v| [v, v]).collect();
        self.push(Tensor::from_parts(shape, data), Op::Upsample2(x.0), &[x.0])
    }

    /// `y[b, c, t] = x[b, c, t] · scale[c] + shift[c]` with constant
    /// `scale` and `shift`.
    pub fn channel_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() != 3 || shape[1] != scale.len() || shape[1] != shift.len() {
            return Err(Error::Dimension {
                op: "channel_affine",
                left: shape,
                right: vec![scale.len(), shift.len()],
            });
        }
        let t = shape[2];
        let data: Vec<T> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / t) % scale.len();
                v * scale[c] + shift[c]
            })
            .collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::ChannelAffine(x.0, scale.to_vec()), &[x.0]))
    }

    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[usize],
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        kernels::check_attention(qv, kv, vv, heads, segments, key_mask)?;
        for t in [qv, kv, vv] {
            t.check_finite("attention")?;
        }
        let geom = AttnGeom {
            heads,
            width: qv.cols(),
            segments,
            key_mask,
        };
        let (out, probs) = geom.forward(qv.data(), kv.data(), vv.data());
        let out = Tensor::from_parts(qv.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                segments: segments.to_vec(),
                key_mask: key_mask.map(<[bool]>::to_vec),
                probs,
            },
            &[q.0, k.0, v.0],
        ))
    }

    /// Mean negative log-likelihood over the rows whose target is `Some`.
    ///
    /// Returns a scalar zero when no row is supervised.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let k = lv.cols();
        if targets.len() != lv.rows() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(Error::Token(format!("target {bad} outside {k} classes")));
        }
        lv.check_finite("cross_entropy")?;
        let probs = kernels::softmax_rows(lv.data(), k);
        let count = targets.iter().flatten().count();
        let mut nll = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                nll -= probs[r * k + t].to_acc().max(f64::MIN_POSITIVE).ln();
            }
        }
        let loss = if count > 0 { nll / count as f64 } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits.0],
        ))
    }

    /// Forward identity; contributes no gradient to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.nodes.push(Node {
            value: out,
            op: Op::StopGrad,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Forward value is exactly `value`; the backward pass routes the
    /// incoming gradient to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, value: Tensor<T>) -> Result<Var> {
        self.value(x).same_shape(&value, "straight_through")?;
        Ok(self.push(value, Op::StraightThrough(x.0), &[x.0]))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                left: lv.shape().to_vec(),
                right: vec![1],
            });
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = slots[id].take() else { continue };
            self.backprop_node(id, &g, &mut slots);
            slots[id] = Some(g);
        }
        Ok(Grads { slots })
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let val = |i: usize| &nodes[i].value;
        let wants = |i: usize| nodes[i].needs_grad;
        macro_rules! acc {
            ($i:expr) => {{
                let i = $i;
                if slots[i].is_none() {
                    slots[i] = Some(Tensor::zeros(nodes[i].value.shape()));
                }
                slots[i].as_mut().unwrap().data_mut()
            }};
        }
        let gd = g.data();
        match &nodes[id].op {
            Op::Leaf | Op::Const | Op::StopGrad => {}
            Op::Add(a, b) => {
                for &i in [a, b] {
                    if wants(i) {
                        axpy(acc!(i), gd, T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    axpy(acc!(*a), gd, T::one());
                }
                if wants(*b) {
                    axpy(acc!(*b), gd, -T::one());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b).data();
                    for ((d, &gv), &o) in acc!(*a).iter_mut().zip(gd).zip(bv) {
                        *d += gv * o;
                    }
                }
                if wants(*b) {
                    let av = val(*a).data();
                    for ((d, &gv), &o) in acc!(*b).iter_mut().zip(gd).zip(av) {
                        *d += gv * o;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    axpy(acc!(*x), gd, T::one());
                }
                if wants(*b) {
                    let c = val(*b).len();
                    let mut sums = vec![0.0f64; c];
                    for row in gd.chunks_exact(c) {
                        for (s, v) in sums.iter_mut().zip(row) {
                            *s += v.to_acc();
                        }
                    }
                    for (d, s) in acc!(*b).iter_mut().zip(sums) {
                        *d += T::of(s);
                    }
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    axpy(acc!(*x), gd, T::of(*s));
                }
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                if wants(*a) {
                    kernels::gemm_nt(m, n, k, gd, bv.data(), acc!(*a));
                }
                if wants(*b) {
                    kernels::gemm_tn(m, k, n, av.data(), gd, acc!(*b));
                }
            }
            Op::MatmulNt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[0]);
                if wants(*a) {
                    kernels::gemm(m, n, k, gd, bv.data(), acc!(*a));
                }
                if wants(*b) {
                    kernels::gemm_tn(m, n, k, gd, av.data(), acc!(*b));
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let g0 = gd[0];
                    acc!(*x).iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = val(*x).len() as f64;
                    let g0 = T::of(gd[0].to_acc() / n);
                    acc!(*x).iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Abs(x) => {
                if wants(*x) {
                    let xv = val(*x).data();
                    for ((d, &gv), &v) in acc!(*x).iter_mut().zip(gd).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        } else if v < T::zero() {
                            *d -= gv;
                        }
                    }
                }
            }
            Op::Square(x) => {
                if wants(*x) {
                    let xv = val(*x).data();
                    let two = T::of(2.0);
                    for ((d, &gv), &v) in acc!(*x).iter_mut().zip(gd).zip(xv) {
                        *d += two * v * gv;
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = val(*x).data();
                    for ((d, &gv), &v) in acc!(*x).iter_mut().zip(gd).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = val(*x).data();
                    for ((d, &gv), &v) in acc!(*x).iter_mut().zip(gd).zip(xv) {
                        *d += T::of(gv.to_acc() * kernels::gelu_grad_scalar(v.to_acc()));
                    }
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let y = nodes[id].value.data();
                    kernels::softmax_backward(y, gd, val(*x).cols(), acc!(*x));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = val(*x).cols();
                let gv = val(*gamma).data();
                if wants(*gamma) || wants(*beta) {
                    let mut dg = vec![0.0f64; c];
                    let mut db = vec![0.0f64; c];
                    for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dg[j] += grow[j].to_acc() * hrow[j].to_acc();
                            db[j] += grow[j].to_acc();
                        }
                    }
                    if wants(*gamma) {
                        for (d, s) in acc!(*gamma).iter_mut().zip(dg) {
                            *d += T::of(s);
                        }
                    }
                    if wants(*beta) {
                        for (d, s) in acc!(*beta).iter_mut().zip(db) {
                            *d += T::of(s);
                        }
                    }
                }
                if wants(*x) {
                    let dx = acc!(*x);
                    for (r, ((grow, hrow), drow)) in gd
                        .chunks_exact(c)
                        .zip(xhat.chunks_exact(c))
                        .zip(dx.chunks_exact_mut(c))
                        .enumerate()
                    {
                        let dxhat: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a.to_acc() * b.to_acc()).collect();
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(hrow).map(|(a, h)| a * h.to_acc()).sum::<f64>() / c as f64;
                        for j in 0..c {
                            drow[j] += T::of(rstd[r] * (dxhat[j] - m1 - hrow[j].to_acc() * m2));
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                if wants(*x) {
                    let c = val(*x).cols();
                    let dx = acc!(*x);
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut dx[i * c..(i + 1) * c], &gd[r * c..(r + 1) * c], T::one());
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        axpy(acc!(p), &gd[off..off + n], T::one());
                    }
                    off += n;
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    axpy(acc!(*x), gd, T::one());
                }
            }
            Op::TransposeLast2(x) => {
                if wants(*x) {
                    let gt = g.transpose_last2().expect("rank-3 gradient");
                    axpy(acc!(*x), gt.data(), T::one());
                }
            }
            Op::Conv { x, w, b, stride, pad } => {
                let geom = kernels::conv_geom(val(*x), val(*w), val(*b), *stride, *pad).expect("recorded conv");
                let (xv, wv) = (val(*x).data(), val(*w).data());
                let mut dx = wants(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = wants(*w).then(|| vec![T::zero(); wv.len()]);
                let mut db = wants(*b).then(|| vec![T::zero(); geom.cout]);
                geom.backward(xv, wv, gd, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                for (i, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(d) = d {
                        axpy(acc!(i), &d, T::one());
                    }
                }
            }
            Op::Upsample2(x) => {
                if wants(*x) {
                    for (d, pair) in acc!(*x).iter_mut().zip(gd.chunks_exact(2)) {
                        *d += pair[0] + pair[1];
                    }
                }
            }
            Op::ChannelAffine(x, scale) => {
                if wants(*x) {
                    let t = *val(*x).shape().last().unwrap();
                    for (i, (d, &g)) in acc!(*x).iter_mut().zip(gd).enumerate() {
                        *d += g * scale[(i / t) % scale.len()];
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                key_mask,
                probs,
            } => {
                let geom = AttnGeom {
                    heads: *heads,
                    width: val(*q).cols(),
                    segments,
                    key_mask: key_mask.as_deref(),
                };
                let n = val(*q).len();
                let mut dq = vec![T::zero(); n];
                let mut dk = vec![T::zero(); n];
                let mut dv = vec![T::zero(); n];
                geom.backward(val(*q).data(), val(*k).data(), val(*v).data(), probs, gd, &mut dq, &mut dk, &mut dv);
                for (i, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(i) {
                        axpy(acc!(i), &d, T::one());
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if wants(*logits) && *count > 0 {
                    let k = val(*logits).cols();
                    let scale = gd[0].to_acc() / *count as f64;
                    let dl = acc!(*logits);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..k {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                dl[r * k + j] += T::of((probs[r * k + j].to_acc() - onehot) * scale);
                            }
                        }
                    }
                }
            }
            Op::StraightThrough(x) => {
                if wants(*x) {
                    axpy(acc!(*x), gd, T::one());
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}
