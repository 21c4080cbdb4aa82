//! Residual vector quantization with EMA-learned codebooks.

use crate::error::{Error, Result};
use crate::ndmath::{Rng, Scalar, Tape, Tensor, Var};

/// Floor on EMA counts when dividing sums into code vectors.
const COUNT_EPS: f64 = 1e-5;

/// One quantization layer: `K` code vectors of width `d` plus EMA statistics.
#[derive(Clone, Debug)]
pub struct Codebook<T> {
    pub codes: Tensor<T>,
    pub ema_count: Vec<f64>,
    pub ema_sum: Tensor<T>,
    /// Assignment counts since the last [`Codebook::reset_usage`].
    pub usage: Vec<u64>,
    pub initialized: bool,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(size: usize, dim: usize, rng: &mut Rng) -> Self {
        let data = (0..size * dim).map(|_| T::of(rng.normal())).collect();
        let codes = Tensor::new(vec![size, dim], data).expect("positive codebook extents");
        Self {
            ema_sum: codes.clone(),
            codes,
            ema_count: vec![1.0; size],
            usage: vec![0; size],
            initialized: false,
        }
    }

    pub fn from_codes(codes: Tensor<T>) -> Self {
        let size = codes.shape()[0];
        Self {
            ema_sum: codes.clone(),
            codes,
            ema_count: vec![1.0; size],
            usage: vec![0; size],
            initialized: true,
        }
    }

    pub fn size(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn code(&self, k: usize) -> &[T] {
        self.codes.row(k)
    }

    /// Seeds every code with a row drawn uniformly from `vectors`.
    pub fn init_from(&mut self, vectors: &Tensor<T>, rng: &mut Rng) {
        for k in 0..self.size() {
            let src = vectors.row(rng.below(vectors.rows())).to_vec();
            self.codes.row_mut(k).copy_from_slice(&src);
            self.ema_sum.row_mut(k).copy_from_slice(&src);
            self.ema_count[k] = 1.0;
        }
        self.initialized = true;
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    /// Fraction of codes assigned at least once since the last usage reset.
    pub fn usage_fraction(&self) -> f64 {
        self.usage.iter().filter(|&&u| u > 0).count() as f64 / self.size() as f64
    }

    /// Perplexity of the usage histogram.
    pub fn perplexity(&self) -> f64 {
        let total: u64 = self.usage.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let h: f64 = self
            .usage
            .iter()
            .filter(|&&u| u > 0)
            .map(|&u| {
                let p = u as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        h.exp()
    }
}

/// Nearest code by Euclidean distance, computed in 64 bits; ties go to the
/// lowest index.
pub fn nearest_code<'a, T: Scalar>(vector: &[T], book: &'a Codebook<T>) -> Result<(usize, &'a [T])> {
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("nearest_code"));
    }
    if vector.len() != book.dim() {
        return Err(Error::Dimension {
            op: "nearest_code",
            left: vec![vector.len()],
            right: book.codes.shape().to_vec(),
        });
    }
    let mut best = (0usize, f64::INFINITY);
    for k in 0..book.size() {
        let d: f64 = vector
            .iter()
            .zip(book.code(k))
            .map(|(a, b)| {
                let e = a.to_acc() - b.to_acc();
                e * e
            })
            .sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok((best.0, book.code(best.0)))
}

/// Base layer plus residual layers, sharing one code width.
#[derive(Clone, Debug)]
pub struct RvqStack<T> {
    pub layers: Vec<Codebook<T>>,
    pub dropout_q: f64,
}

impl<T: Scalar> RvqStack<T> {
    pub fn new(sizes: &[usize], dim: usize, dropout_q: f64, rng: &mut Rng) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) || dim == 0 {
            return Err(Error::Config("RVQ needs at least one non-empty layer".into()));
        }
        if !(0.0..=1.0).contains(&dropout_q) {
            return Err(Error::Config(format!("dropout q = {dropout_q} outside [0, 1]")));
        }
        Ok(Self {
            layers: sizes.iter().map(|&k| Codebook::new(k, dim, rng)).collect(),
            dropout_q,
        })
    }

    /// `V + 1`.
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    pub fn is_initialized(&self) -> bool {
        self.layers.iter().all(|l| l.initialized)
    }
}

/// Output of [`residual_quantize`] over `active_layers` layers.
#[derive(Clone, Debug)]
pub struct QuantizeResult<T> {
    /// `active_layers` rows of `n` indices.
    pub token_rows: Vec<Vec<usize>>,
    /// Selected code vectors per active layer, each `[n, d]`.
    pub code_rows: Vec<Tensor<T>>,
    /// `r^0 ..= r^active_layers`, each `[n, d]`.
    pub residuals: Vec<Tensor<T>>,
    pub active_layers: usize,
}

impl<T: Scalar> QuantizeResult<T> {
    /// `Σ_v b^v`, summed base layer first.
    pub fn code_sum(&self) -> Tensor<T> {
        sum_codes(&self.code_rows)
    }
}

pub(crate) fn sum_codes<T: Scalar>(rows: &[Tensor<T>]) -> Tensor<T> {
    let mut acc = rows[0].clone();
    for r in &rows[1..] {
        acc.add_assign(r);
    }
    acc
}

/// Recursive residual quantization: `b^v = Q(r^v)`, `r^{v+1} = r^v - b^v`.
pub fn residual_quantize<T: Scalar>(latents: &Tensor<T>, stack: &RvqStack<T>, active_layers: usize) -> Result<QuantizeResult<T>> {
    if active_layers == 0 || active_layers > stack.num_layers() {
        return Err(Error::Config(format!(
            "active layer count {active_layers} outside [1, {}]",
            stack.num_layers()
        )));
    }
    if latents.rank() != 2 || latents.cols() != stack.dim() {
        return Err(Error::Dimension {
            op: "residual_quantize",
            left: latents.shape().to_vec(),
            right: vec![stack.dim()],
        });
    }
    let n = latents.rows();
    let mut residuals = vec![latents.clone()];
    let mut token_rows = Vec::with_capacity(active_layers);
    let mut code_rows = Vec::with_capacity(active_layers);
    for book in &stack.layers[..active_layers] {
        let r = residuals.last().unwrap();
        let mut tokens = Vec::with_capacity(n);
        let mut codes = Vec::with_capacity(r.len());
        for i in 0..n {
            let (k, c) = nearest_code(r.row(i), book)?;
            tokens.push(k);
            codes.extend_from_slice(c);
        }
        let b = Tensor::new(r.shape().to_vec(), codes)?;
        let next = r.zip_map(&b, "residual", |x, y| x - y)?;
        token_rows.push(tokens);
        code_rows.push(b);
        residuals.push(next);
    }
    Ok(QuantizeResult {
        token_rows,
        code_rows,
        residuals,
        active_layers,
    })
}

/// Looks up and sums the first `layers` rows of code indices.
pub fn lookup_sum<T: Scalar>(token_rows: &[Vec<usize>], stack: &RvqStack<T>, layers: usize) -> Result<Tensor<T>> {
    if layers == 0 || layers > token_rows.len() || layers > stack.num_layers() {
        return Err(Error::Config(format!("cannot sum {layers} of {} token rows", token_rows.len())));
    }
    let mut rows = Vec::with_capacity(layers);
    for (v, ids) in token_rows[..layers].iter().enumerate() {
        let book = &stack.layers[v];
        if let Some(&bad) = ids.iter().find(|&&t| t >= book.size()) {
            return Err(Error::Token(format!("id {bad} outside layer {v} codebook of {}", book.size())));
        }
        rows.push(book.codes.gather_rows(ids)?);
    }
    Ok(sum_codes(&rows))
}

/// Number of leading layers kept this step: all of them with probability
/// `1 - q`, otherwise uniform over `1..=V+1`.
pub fn draw_dropout_layers<T: Scalar>(stack: &RvqStack<T>, rng: &mut Rng) -> usize {
    let total = stack.num_layers();
    if rng.uniform() < stack.dropout_q {
        1 + rng.below(total)
    } else {
        total
    }
}

/// `Σ_v mean((r^v - sg[b^v])²)` over the active layers; only `latents`
/// receives gradient.
pub fn commitment_loss<T: Scalar>(tape: &mut Tape<T>, latents: Var, result: &QuantizeResult<T>) -> Result<Var> {
    let mut residual = latents;
    let mut total: Option<Var> = None;
    for b in &result.code_rows {
        let code = tape.constant(b.clone());
        let diff = tape.sub(residual, code)?;
        let sq = tape.square(diff);
        let term = tape.mean(sq);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
        residual = diff;
    }
    Ok(total.expect("at least one active layer"))
}

/// Quantized latents whose forward value is `Σ b^v` and whose gradient
/// passes to `latents` unchanged.
pub fn straight_through<T: Scalar>(tape: &mut Tape<T>, latents: Var, result: &QuantizeResult<T>) -> Result<Var> {
    tape.straight_through(latents, result.code_sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaConfig {
    pub decay: f64,
    pub reset_threshold: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            decay: 0.99,
            reset_threshold: 1.0,
        }
    }
}

/// Assigned residual vectors for one layer.
pub struct LayerBatch<'a, T> {
    pub residuals: &'a Tensor<T>,
    pub indices: &'a [usize],
}

/// EMA codebook update with dead-code reset, layer `v` taking `batches[v]`.
/// Layers beyond `batches.len()` are untouched.
pub fn ema_update<T: Scalar>(stack: &mut RvqStack<T>, batches: &[LayerBatch<'_, T>], cfg: EmaConfig, rng: &mut Rng) -> Result<()> {
    if !(cfg.decay > 0.0 && cfg.decay < 1.0) {
        return Err(Error::Config(format!("EMA decay {} outside (0, 1)", cfg.decay)));
    }
    for (book, batch) in stack.layers.iter_mut().zip(batches) {
        let m = batch.indices.len();
        if m == 0 {
            continue;
        }
        let (k, d) = (book.size(), book.dim());
        if batch.residuals.rows() != m || batch.residuals.cols() != d {
            return Err(Error::Dimension {
                op: "ema_update",
                left: batch.residuals.shape().to_vec(),
                right: vec![m, d],
            });
        }
        let mut counts = vec![0.0f64; k];
        let mut sums = vec![0.0f64; k * d];
        for (i, &idx) in batch.indices.iter().enumerate() {
            counts[idx] += 1.0;
            book.usage[idx] += 1;
            for (s, v) in sums[idx * d..(idx + 1) * d].iter_mut().zip(batch.residuals.row(i)) {
                *s += v.to_acc();
            }
        }
        let lam = cfg.decay;
        for c in 0..k {
            book.ema_count[c] = lam * book.ema_count[c] + (1.0 - lam) * counts[c];
            let denom = book.ema_count[c].max(COUNT_EPS);
            for j in 0..d {
                let s = lam * book.ema_sum.row(c)[j].to_acc() + (1.0 - lam) * sums[c * d + j];
                book.ema_sum.row_mut(c)[j] = T::of(s);
                book.codes.row_mut(c)[j] = T::of(s / denom);
            }
            if book.ema_count[c] < cfg.reset_threshold {
                let src = batch.residuals.row(rng.below(m)).to_vec();
                book.codes.row_mut(c).copy_from_slice(&src);
                book.ema_sum.row_mut(c).copy_from_slice(&src);
                book.ema_count[c] = 1.0;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(codes: &[f64], dim: usize) -> Codebook<f64> {
        Codebook::from_codes(Tensor::from_f64(&[codes.len() / dim, dim], codes).unwrap())
    }

    #[test]
    fn nearest_code_examples() {
        let b = book(&[0.0, 0.0, 1.0, 1.0, 2.0, 0.0, -1.0, 3.0], 2);
        assert_eq!(nearest_code(&[-1.0, 3.0], &b).unwrap().0, 3);
        let b1 = book(&[0.0, 1.0], 1);
        assert_eq!(nearest_code(&[0.4], &b1).unwrap().0, 0);
        assert_eq!(nearest_code(&[0.5], &b1).unwrap().0, 0);
        assert!(matches!(nearest_code(&[f64::NAN], &b1), Err(Error::Numeric { .. })));
    }

    fn toy_stack() -> RvqStack<f64> {
        RvqStack {
            layers: vec![book(&[0.0, 1.0], 1), book(&[0.0, 1.0], 1)],
            dropout_q: 0.0,
        }
    }

    #[test]
    fn two_layer_toy_enumeration() {
        // Exhaustive over code pairs: greedy picks (1, 0) for 1.4.
        let s = toy_stack();
        let x = Tensor::from_f64(&[1, 1], &[1.4]).unwrap();
        let r = residual_quantize(&x, &s, 2).unwrap();
        assert_eq!(r.token_rows, vec![vec![1], vec![0]]);
        assert!((r.residuals[1].data()[0] - 0.4).abs() < 1e-12);
        assert_eq!(r.code_sum().data(), &[1.0]);
        let mut greedy_pair = None;
        for a in 0..2 {
            if greedy_pair.is_none() || (1.4 - a as f64).abs() < (1.4 - greedy_pair.unwrap() as f64).abs() {
                greedy_pair = Some(a);
            }
        }
        assert_eq!(greedy_pair, Some(1));
    }

    #[test]
    fn exact_base_codes_leave_zero_residual() {
        let s = RvqStack {
            layers: vec![book(&[0.5, -0.25, 2.0, 1.0], 2), book(&[0.0, 0.0, 1.0, 1.0], 2)],
            dropout_q: 0.0,
        };
        let x = Tensor::from_f64(&[2, 2], &[2.0, 1.0, 0.5, -0.25]).unwrap();
        let r = residual_quantize(&x, &s, 2).unwrap();
        assert!(r.residuals[1].data().iter().all(|&v| v == 0.0));
        assert_eq!(r.token_rows[1], vec![0, 0]);
    }

    #[test]
    fn active_layer_bounds() {
        let s = toy_stack();
        let x = Tensor::from_f64(&[1, 1], &[0.3]).unwrap();
        assert!(residual_quantize(&x, &s, 0).is_err());
        assert!(residual_quantize(&x, &s, 3).is_err());
        assert_eq!(residual_quantize(&x, &s, 1).unwrap().token_rows.len(), 1);
    }

    proptest::proptest! {
        #[test]
        fn telescoping_chain_is_exact(seed in 0u64..5000, active in 1usize..=4) {
            let mut rng = Rng::new(seed);
            let s = RvqStack::<f32>::new(&[8, 8, 8, 8], 3, 0.0, &mut rng).unwrap();
            let x = Tensor::<f32>::from_f64(&[5, 3], &(0..15).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap();
            let r = residual_quantize(&x, &s, active).unwrap();
            let mut chain = x.clone();
            for b in &r.code_rows {
                chain = chain.zip_map(b, "chain", |p, q| p - q).unwrap();
            }
            proptest::prop_assert_eq!(&chain, &r.residuals[active]);
            // sum of codes plus final residual recovers the input up to rounding
            let back = r.code_sum().zip_map(&r.residuals[active], "back", |p, q| p + q).unwrap();
            proptest::prop_assert!(back.max_abs_diff(&x) < 1e-5);
        }
    }

    #[test]
    fn telescoping_is_exact_on_dyadic_values() {
        let s = RvqStack {
            layers: vec![book(&[0.0, 1.0, 2.0], 1), book(&[0.0, 0.25, 0.5], 1), book(&[0.0, 0.0625], 1)],
            dropout_q: 0.0,
        };
        let x = Tensor::from_f64(&[3, 1], &[1.8125, 0.375, 2.5]).unwrap();
        let r = residual_quantize(&x, &s, 3).unwrap();
        let back = r.code_sum().zip_map(&r.residuals[3], "back", |p, q| p + q).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn dropout_distribution() {
        let mut rng = Rng::new(7);
        let mut s = RvqStack::<f32>::new(&[4; 6], 2, 0.0, &mut rng).unwrap();
        assert!((0..1000).all(|_| draw_dropout_layers(&s, &mut rng) == 6));

        s.dropout_q = 1.0;
        let draws = 100_000;
        let mut counts = [0usize; 7];
        for _ in 0..draws {
            counts[draw_dropout_layers(&s, &mut rng)] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            assert!((c as f64 / draws as f64 - 1.0 / 6.0).abs() < 0.01);
        }

        s.dropout_q = 0.2;
        let full = (0..draws).filter(|_| draw_dropout_layers(&s, &mut rng) == 6).count();
        let expected = 0.8 + 0.2 / 6.0;
        assert!((full as f64 / draws as f64 - expected).abs() < 0.01);
    }

    #[test]
    fn commitment_zero_at_exact_codes_and_linear_in_beta() {
        let s = RvqStack {
            layers: vec![book(&[0.5, -0.25, 2.0, 1.0], 2)],
            dropout_q: 0.0,
        };
        let x = Tensor::from_f64(&[2, 2], &[2.0, 1.0, 0.5, -0.25]).unwrap();
        let r = residual_quantize(&x, &s, 1).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let c = commitment_loss(&mut tape, v, &r).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0]);

        let y = Tensor::from_f64(&[2, 2], &[1.7, 0.9, 0.1, 0.3]).unwrap();
        let r = residual_quantize(&y, &s, 1).unwrap();
        let mut tape = Tape::<f32>::new();
        let v = tape.leaf(y.cast());
        let c = commitment_loss(&mut tape, v, &r.clone_cast()).unwrap();
        let one = tape.scale(c, 0.25);
        let two = tape.scale(c, 0.5);
        assert_eq!(tape.value(two).data()[0], 2.0 * tape.value(one).data()[0]);
    }

    impl QuantizeResult<f64> {
        fn clone_cast(&self) -> QuantizeResult<f32> {
            QuantizeResult {
                token_rows: self.token_rows.clone(),
                code_rows: self.code_rows.iter().map(Tensor::cast).collect(),
                residuals: self.residuals.iter().map(Tensor::cast).collect(),
                active_layers: self.active_layers,
            }
        }
    }

    #[test]
    fn ema_unassigned_code_keeps_its_vector() {
        let mut rng = Rng::new(0);
        let mut s = RvqStack {
            layers: vec![book(&[0.0, 0.0, 5.0, 5.0], 2)],
            dropout_q: 0.0,
        };
        s.layers[0].ema_count = vec![10.0, 10.0];
        s.layers[0].ema_sum = Tensor::from_f64(&[2, 2], &[0.0, 0.0, 50.0, 50.0]).unwrap();
        let res = Tensor::from_f64(&[3, 2], &[0.1, 0.0, -0.1, 0.2, 0.0, 0.1]).unwrap();
        let cfg = EmaConfig {
            decay: 0.9,
            reset_threshold: 1.0,
        };
        ema_update(&mut s, &[LayerBatch { residuals: &res, indices: &[0, 0, 0] }], cfg, &mut rng).unwrap();
        let c1 = s.layers[0].code(1);
        assert!((c1[0] - 5.0).abs() < 1e-12 && (c1[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ema_converges_geometrically_to_repeated_vector() {
        let mut rng = Rng::new(0);
        let mut s = RvqStack {
            layers: vec![book(&[0.0, 0.0], 2)],
            dropout_q: 0.0,
        };
        let target = [3.0, -1.0];
        let res = Tensor::from_f64(&[4, 2], &[3.0, -1.0, 3.0, -1.0, 3.0, -1.0, 3.0, -1.0]).unwrap();
        let cfg = EmaConfig {
            decay: 0.9,
            reset_threshold: 0.0,
        };
        // closed form: count_t = λ^t + 4(1-λ^t), sum_t = 4v(1-λ^t)
        for t in 1..=40 {
            ema_update(&mut s, &[LayerBatch { residuals: &res, indices: &[0; 4] }], cfg, &mut rng).unwrap();
            let lt = 0.9f64.powi(t);
            let expected = 4.0 * (1.0 - lt) / (lt + 4.0 * (1.0 - lt));
            for (j, &tv) in target.iter().enumerate() {
                assert!((s.layers[0].code(0)[j] - tv * expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ema_resets_dead_codes_to_batch_vectors() {
        let mut rng = Rng::new(3);
        let mut s = RvqStack {
            layers: vec![book(&[0.0, 0.0, 9.0, 9.0], 2)],
            dropout_q: 0.0,
        };
        let res = Tensor::from_f64(&[2, 2], &[0.5, 0.25, -0.5, 0.75]).unwrap();
        ema_update(&mut s, &[LayerBatch { residuals: &res, indices: &[0, 0] }], EmaConfig::default(), &mut rng).unwrap();
        let dead = s.layers[0].code(1).to_vec();
        assert!(dead == res.row(0) || dead == res.row(1), "{dead:?}");
        // empty batch is a no-op
        let before = s.layers[0].codes.clone();
        let empty = Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
        ema_update(&mut s, &[LayerBatch { residuals: &empty, indices: &[] }], EmaConfig::default(), &mut rng).unwrap();
        assert_eq!(s.layers[0].codes, before);
    }
}
