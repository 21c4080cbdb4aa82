//! Forward and backward kernels over raw row-major slices.
//!
//! The tape calls into these; the public wrappers at the bottom expose the
//! forward passes as plain array functions.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut s = lanes.iter().fold(T::zero(), |acc, &v| acc + v);
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        softmax_into(xr, or);
    }
    out
}

/// Stable softmax in 64 bits; `-inf` entries get zero mass.
pub(crate) fn softmax_into<T: Scalar>(x: &[T], out: &mut [T]) {
    let mx = x.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_acc()));
    if mx == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let mut z = 0.0;
    let e: Vec<f64> = x
        .iter()
        .map(|v| {
            let e = (v.to_acc() - mx).exp();
            z += e;
            e
        })
        .collect();
    for (o, e) in out.iter_mut().zip(e) {
        *o = T::of(e / z);
    }
}

/// Backward of row-wise softmax given its output `y`.
pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], cols: usize, dx: &mut [T]) {
    for ((yr, gr), dr) in y.chunks_exact(cols).zip(dy.chunks_exact(cols)).zip(dx.chunks_exact_mut(cols)) {
        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_acc() * b.to_acc()).sum();
        for ((d, &yv), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *d += T::of(yv.to_acc() * (g.to_acc() - s));
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Layer normalisation statistics per row: (normalised values, 1/σ per row).
pub(crate) fn layernorm_rows<T: Scalar>(x: &[T], cols: usize) -> (Vec<T>, Vec<f64>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / cols);
    for (xr, hr) in x.chunks_exact(cols).zip(xhat.chunks_exact_mut(cols)) {
        let mean = xr.iter().map(|v| v.to_acc()).sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v.to_acc() - mean).powi(2)).sum::<f64>() / cols as f64;
        let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for (h, &v) in hr.iter_mut().zip(xr) {
            *h = T::of((v.to_acc() - mean) * r);
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Output extent of a strided, zero-padded convolution.
pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_len: usize,
}

impl ConvGeom {
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (k, tout) = (self.kernel, self.out_len);
        for c in 0..self.cin {
            let xr = &x[c * self.len..(c + 1) * self.len];
            for kk in 0..k {
                let row = &mut cols[(c * k + kk) * tout..(c * k + kk + 1) * tout];
                for (t, slot) in row.iter_mut().enumerate() {
                    let src = (t * self.stride + kk) as isize - self.pad as isize;
                    *slot = if src >= 0 && (src as usize) < self.len {
                        xr[src as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let (k, tout) = (self.kernel, self.out_len);
        for c in 0..self.cin {
            let dxr = &mut dx[c * self.len..(c + 1) * self.len];
            for kk in 0..k {
                let row = &cols[(c * k + kk) * tout..(c * k + kk + 1) * tout];
                for (t, &g) in row.iter().enumerate() {
                    let src = (t * self.stride + kk) as isize - self.pad as isize;
                    if src >= 0 && (src as usize) < self.len {
                        dxr[src as usize] += g;
                    }
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
        let ck = self.cin * self.kernel;
        let mut out = vec![T::zero(); self.batch * self.cout * self.out_len];
        let mut cols = vec![T::zero(); ck * self.out_len];
        for bi in 0..self.batch {
            let xb = &x[bi * self.cin * self.len..(bi + 1) * self.cin * self.len];
            self.im2col(xb, &mut cols);
            let ob = &mut out[bi * self.cout * self.out_len..(bi + 1) * self.cout * self.out_len];
            for (co, row) in ob.chunks_exact_mut(self.out_len).enumerate() {
                row.iter_mut().for_each(|v| *v = b[co]);
            }
            gemm(self.cout, ck, self.out_len, w, &cols, ob);
        }
        out
    }

    pub fn backward<T: Scalar>(
        &self,
        x: &[T],
        w: &[T],
        dout: &[T],
        dx: Option<&mut [T]>,
        dw: Option<&mut [T]>,
        db: Option<&mut [T]>,
    ) {
        let ck = self.cin * self.kernel;
        let mut cols = vec![T::zero(); ck * self.out_len];
        let mut dcols = vec![T::zero(); ck * self.out_len];
        let (mut dx, mut dw, mut db) = (dx, dw, db);
        for bi in 0..self.batch {
            let xb = &x[bi * self.cin * self.len..(bi + 1) * self.cin * self.len];
            let gb = &dout[bi * self.cout * self.out_len..(bi + 1) * self.cout * self.out_len];
            if let Some(db) = db.as_deref_mut() {
                for (co, row) in gb.chunks_exact(self.out_len).enumerate() {
                    db[co] += T::of(row.iter().map(|v| v.to_acc()).sum());
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                self.im2col(xb, &mut cols);
                gemm_nt(self.cout, self.out_len, ck, gb, &cols, dw);
            }
            if let Some(dx) = dx.as_deref_mut() {
                dcols.iter_mut().for_each(|v| *v = T::zero());
                gemm_tn(self.cout, ck, self.out_len, w, gb, &mut dcols);
                let dxb = &mut dx[bi * self.cin * self.len..(bi + 1) * self.cin * self.len];
                self.col2im(&dcols, dxb);
            }
        }
    }
}

/// Multi-head scaled dot-product attention over independent row segments.
pub(crate) struct AttnGeom<'a> {
    pub heads: usize,
    pub width: usize,
    pub segments: &'a [usize],
    pub key_mask: Option<&'a [bool]>,
}

impl AttnGeom<'_> {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Returns the output and the attention probabilities, one
    /// `len×len` block per (segment, head).
    pub fn forward<T: Scalar>(&self, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Vec<Vec<T>>) {
        let (c, dh) = (self.width, self.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![T::zero(); q.len()];
        let mut probs = Vec::with_capacity(self.segments.len() * self.heads);
        let mut start = 0;
        for &len in self.segments {
            for h in 0..self.heads {
                let mut p = vec![T::zero(); len * len];
                let mut scores = vec![T::zero(); len];
                for i in 0..len {
                    let qi = &q[(start + i) * c + h * dh..(start + i) * c + (h + 1) * dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let masked = self.key_mask.map(|m| !m[start + j]).unwrap_or(false);
                        *s = if masked {
                            T::neg_infinity()
                        } else {
                            let kj = &k[(start + j) * c + h * dh..(start + j) * c + (h + 1) * dh];
                            T::of(dot(qi, kj).to_acc() * scale)
                        };
                    }
                    softmax_into(&scores, &mut p[i * len..(i + 1) * len]);
                    let orow = &mut out[(start + i) * c + h * dh..(start + i) * c + (h + 1) * dh];
                    for j in 0..len {
                        let pij = p[i * len + j];
                        if pij == T::zero() {
                            continue;
                        }
                        let vj = &v[(start + j) * c + h * dh..(start + j) * c + (h + 1) * dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o = *o + pij * vv;
                        }
                    }
                }
                probs.push(p);
            }
            start += len;
        }
        (out, probs)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        q: &[T],
        k: &[T],
        v: &[T],
        probs: &[Vec<T>],
        dout: &[T],
        dq: &mut [T],
        dk: &mut [T],
        dv: &mut [T],
    ) {
        let (c, dh) = (self.width, self.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut start = 0;
        let mut block = 0;
        for &len in self.segments {
            for h in 0..self.heads {
                let p = &probs[block];
                block += 1;
                let sl = |r: usize| (start + r) * c + h * dh..(start + r) * c + (h + 1) * dh;
                let mut dp = vec![0.0f64; len];
                for i in 0..len {
                    let go = &dout[sl(i)];
                    for j in 0..len {
                        dp[j] = dot(go, &v[sl(j)]).to_acc();
                    }
                    let s: f64 = (0..len).map(|j| p[i * len + j].to_acc() * dp[j]).sum();
                    for j in 0..len {
                        let pij = p[i * len + j].to_acc();
                        if pij == 0.0 {
                            continue;
                        }
                        let ds = T::of(pij * (dp[j] - s) * scale);
                        let pt = T::of(pij);
                        let (ri, rj) = (sl(i), sl(j));
                        for t in 0..dh {
                            dq[ri.start + t] += ds * k[rj.start + t];
                            dk[rj.start + t] += ds * q[ri.start + t];
                            dv[rj.start + t] += pt * dout[ri.start + t];
                        }
                    }
                }
            }
            start += len;
        }
    }
}

// ---- public forward wrappers -------------------------------------------

fn dim_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Matrix product; leading axes of `a` are flattened into rows.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if b.rank() != 2 || a.cols() != b.shape()[0] {
        return Err(dim_err("matmul", a, b));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), b.data(), &mut out);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, out))
}

pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_finite("softmax")?;
    Ok(Tensor::from_parts(x.shape().to_vec(), softmax_rows(x.data(), x.cols())))
}

/// Layer normalisation over the last axis, without affine terms.
pub fn layernorm<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_finite("layernorm")?;
    Ok(Tensor::from_parts(x.shape().to_vec(), layernorm_rows(x.data(), x.cols()).0))
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_finite("gelu")?;
    Ok(x.map(|v| T::of(gelu_scalar(v.to_acc()))))
}

/// `x: [batch, c_in, len]`, `w: [c_out, c_in, kernel]`, `b: [c_out]`.
pub fn conv1d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let geom = conv_geom(x, w, b, stride, pad)?;
    x.check_finite("conv1d")?;
    let out = geom.forward(x.data(), w.data(), b.data());
    Ok(Tensor::from_parts(vec![geom.batch, geom.cout, geom.out_len], out))
}

pub(crate) fn conv_geom<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.rank() != 3 || w.rank() != 3 || w.shape()[1] != x.shape()[1] || b.shape() != [w.shape()[0]] {
        return Err(dim_err("conv1d", x, w));
    }
    let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kernel) = (w.shape()[0], w.shape()[2]);
    let out_len = conv1d_out_len(len, kernel, stride, pad).ok_or_else(|| dim_err("conv1d", x, w))?;
    Ok(ConvGeom {
        batch,
        cin,
        cout,
        len,
        kernel,
        stride,
        pad,
        out_len,
    })
}

/// Multi-head attention over `[rows, width]` projections.
///
/// `segments` partitions the rows into independent sequences; a `false` in
/// `key_mask` removes that row from every query's key set.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    segments: &[usize],
    key_mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    check_attention(q, k, v, heads, segments, key_mask)?;
    for t in [q, k, v] {
        t.check_finite("attention")?;
    }
    let geom = AttnGeom {
        heads,
        width: q.cols(),
        segments,
        key_mask,
    };
    let (out, _) = geom.forward(q.data(), k.data(), v.data());
    Ok(Tensor::from_parts(q.shape().to_vec(), out))
}

pub(crate) fn check_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    segments: &[usize],
    key_mask: Option<&[bool]>,
) -> Result<()> {
    q.same_shape(k, "attention")?;
    q.same_shape(v, "attention")?;
    if q.rank() != 2 || heads == 0 || q.cols() % heads != 0 || segments.iter().sum::<usize>() != q.rows() {
        return Err(Error::Dimension {
            op: "attention",
            left: q.shape().to_vec(),
            right: vec![heads, segments.iter().sum()],
        });
    }
    if let Some(m) = key_mask {
        if m.len() != q.rows() {
            return Err(Error::Dimension {
                op: "attention mask",
                left: q.shape().to_vec(),
                right: vec![m.len()],
            });
        }
    }
    Ok(())
}
