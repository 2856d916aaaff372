//! Differentiable operations: forward rules as `Graph` methods, backward
//! rules in `Graph::propagate`.

use rand::Rng;

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_f64, Scalar, Tensor};

pub const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_COEFF: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

fn narrow<T: Scalar>(values: Vec<f64>) -> Vec<T> {
    values.into_iter().map(T::cast_from).collect()
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("rank >= 1") = last;
    s
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// `a[..., k] · b[k, n] -> [..., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let aw = T::widen(self.value(a).data());
        let bw = T::widen(self.value(b).data());
        let mut out = vec![0.0; m * n];
        gemm_f64(m, k, n, &aw, (k, 1), &bw, (n, 1), &mut out);
        let value = Tensor::from_parts(with_last(&sa, n), narrow(out));
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product over leading axes: `a[.., m, k] · b[.., k, n]`, or
    /// `a · bᵀ` with `b[.., n, k]` when `transpose_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let ra = sa.len();
        if ra < 3 || sb.len() != ra || sa[..ra - 2] != sb[..ra - 2] {
            return Err(Error::dim("batch_matmul", &sa, &sb));
        }
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (kb, n) = if transpose_b {
            (sb[ra - 1], sb[ra - 2])
        } else {
            (sb[ra - 2], sb[ra - 1])
        };
        if k != kb {
            return Err(Error::dim("batch_matmul", &sa, &sb));
        }
        let batch: usize = sa[..ra - 2].iter().product();
        let aw = T::widen(self.value(a).data());
        let bw = T::widen(self.value(b).data());
        let b_strides = if transpose_b { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm_f64(
                m,
                k,
                n,
                &aw[i * m * k..(i + 1) * m * k],
                (k, 1),
                &bw[i * k * n..(i + 1) * k * n],
                b_strides,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = sa[..ra - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::from_parts(shape, narrow(out));
        Ok(self.push(value, Op::BatchMatMul { a, b, transpose_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Broadcast-add `bias[n]` to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tx.last_dim() != tb.numel() || tx.rank() == 0 {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let n = tb.numel();
        let bd = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + bd[i % n]).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `x · w + b` with `w[k, n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| T::cast_from(v.as_f64() * factor)).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| T::cast_from(gelu_scalar(v.as_f64()))).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(value, Op::Gelu { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| T::cast_from(v.as_f64().tanh())).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(value, Op::Tanh { x }, &[x])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Usage(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        tx.check_finite("softmax input")?;
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = tx.data();
        let mut out = vec![0.0f64; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xs[idx(j)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (xs[idx(j)].as_f64() - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let value = Tensor::from_parts(shape, narrow(out));
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Softmax over the last axis where masked-out keys get probability 0.
    ///
    /// `x` is `[groups, ..., keys]`; `key_mask` is `[groups, keys]` with `true`
    /// marking keys that may be attended to.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[bool], groups: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let keys = tx.last_dim();
        let rows = tx.rows();
        if groups == 0 || key_mask.len() != groups * keys || rows % groups != 0 {
            return Err(Error::dim("masked_softmax", &shape, &[groups, key_mask.len()]));
        }
        let rows_per_group = rows / groups;
        let xs = tx.data();
        let mut out = vec![0.0f64; xs.len()];
        for r in 0..rows {
            let mask = &key_mask[(r / rows_per_group) * keys..(r / rows_per_group + 1) * keys];
            let row = &xs[r * keys..(r + 1) * keys];
            let mut max = f64::NEG_INFINITY;
            for (v, &keep) in row.iter().zip(mask) {
                if keep {
                    let v = v.as_f64();
                    if !v.is_finite() {
                        return Err(Error::Numeric("masked_softmax: non-finite score".into()));
                    }
                    max = max.max(v);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Numeric("masked_softmax: every key is masked".into()));
            }
            let dst = &mut out[r * keys..(r + 1) * keys];
            let mut sum = 0.0;
            for ((d, v), &keep) in dst.iter_mut().zip(row).zip(mask) {
                if keep {
                    *d = (v.as_f64() - max).exp();
                    sum += *d;
                }
            }
            dst.iter_mut().for_each(|d| *d /= sum);
        }
        let value = Tensor::from_parts(shape, narrow(out));
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                outer: rows,
                len: keys,
                inner: 1,
            },
            &[x],
        ))
    }

    /// Normalise each row of `x[..., d]` to zero mean and unit (population)
    /// variance, then apply `gain[d]` and `bias[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tx.rank() == 0 || tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let xs = tx.data();
        let (gd, bd) = (tg.data(), tb.data());
        let keep = self.grad_enabled;
        let mut normalized = if keep { Vec::with_capacity(xs.len()) } else { Vec::new() };
        let mut inv_stds = if keep { Vec::with_capacity(rows) } else { Vec::new() };
        let mut out = Vec::with_capacity(xs.len());
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.as_f64() - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter().enumerate() {
                let xhat = (v.as_f64() - mean) * inv_std;
                out.push(T::cast_from(xhat * gd[j].as_f64() + bd[j].as_f64()));
                if keep {
                    normalized.push(xhat);
                }
            }
            if keep {
                inv_stds.push(inv_std);
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std: inv_stds,
            },
            &[x, gain, bias],
        ))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        check_dropout_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let tx = self.value(x);
        let multipliers: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data = tx
            .data()
            .iter()
            .zip(&multipliers)
            .map(|(&v, &m)| T::cast_from(v.as_f64() * m))
            .collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(value, Op::Dropout { x, multipliers }, &[x]))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits[b, c]`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != labels.len() {
            return Err(Error::dim("cross_entropy", tl.shape(), &[labels.len()]));
        }
        let classes = tl.shape()[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
        }
        tl.check_finite("cross_entropy logits")?;
        let xs = tl.data();
        let mut probs = Vec::with_capacity(xs.len());
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &xs[r * classes..(r + 1) * classes];
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[label].as_f64();
            probs.extend(row.iter().map(|v| (v.as_f64() - log_z).exp()));
        }
        let loss = total / labels.len() as f64;
        let value = Tensor::scalar(T::cast_from(loss));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::cast_from(s)), Op::Sum { x }, &[x])
    }

    /// Pick rows of `src` viewed as `[rows, width]`; the result has shape
    /// `leading_shape ++ [width]`.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize], leading_shape: &[usize]) -> Result<Var> {
        if leading_shape.iter().product::<usize>() != rows.len() {
            return Err(Error::dim("gather_rows", leading_shape, &[rows.len()]));
        }
        let value = self.value(src).select_rows(rows, leading_shape)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
            &[src],
        ))
    }

    /// `[b, m, h*e] -> [b, h, m, e]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::dim("split_heads", &s, &[heads]));
        }
        let (b, m, d) = (s[0], s[1], s[2]);
        let e = d / heads;
        let xs = tx.data();
        let mut out = Vec::with_capacity(xs.len());
        for bi in 0..b {
            for h in 0..heads {
                for l in 0..m {
                    let base = (bi * m + l) * d + h * e;
                    out.extend_from_slice(&xs[base..base + e]);
                }
            }
        }
        let value = Tensor::from_parts(vec![b, heads, m, e], out);
        Ok(self.push(value, Op::SplitHeads { x, heads }, &[x]))
    }

    /// `[b, h, m, e] -> [b, m, h*e]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::dim("merge_heads", &s, &[4]));
        }
        let (b, heads, m, e) = (s[0], s[1], s[2], s[3]);
        let value = Tensor::from_parts(vec![b, m, heads * e], merge(tx.data(), b, heads, m, e));
        Ok(self.push(value, Op::MergeHeads { x, heads }, &[x]))
    }

    /// Mean over the valid positions of each sequence in `x[b, m, d]`.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(Error::dim("masked_mean_pool", &s, &[mask.len()]));
        }
        let (b, m, d) = (s[0], s[1], s[2]);
        let xs = tx.data();
        let mut counts = Vec::with_capacity(b);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let valid = &mask[bi * m..(bi + 1) * m];
            let count = valid.iter().filter(|&&v| v).count();
            if count == 0 {
                return Err(Error::Data(format!("sequence {bi} has no non-padding positions")));
            }
            let mut acc = vec![0.0f64; d];
            for (l, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
                for (a, v) in acc.iter_mut().zip(&xs[(bi * m + l) * d..(bi * m + l + 1) * d]) {
                    *a += v.as_f64();
                }
            }
            out.extend(acc.into_iter().map(|a| T::cast_from(a / count as f64)));
            counts.push(count);
        }
        let value = Tensor::from_parts(vec![b, d], out);
        Ok(self.push(
            value,
            Op::MaskedMeanPool {
                x,
                mask: mask.to_vec(),
                counts,
            },
            &[x],
        ))
    }

    /// Apply the backward rule of node `i` to upstream gradient `g`.
    pub(super) fn propagate(&self, i: usize, g: &[T], pending: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.numel() / k;
                let gw = T::widen(g);
                if self.requires_grad(*a) {
                    let bw = T::widen(tb.data());
                    let mut da = vec![0.0; m * k];
                    gemm_f64(m, n, k, &gw, (n, 1), &bw, (1, n), &mut da);
                    self.accumulate(pending, *a, narrow(da));
                }
                if self.requires_grad(*b) {
                    let aw = T::widen(ta.data());
                    let mut db = vec![0.0; k * n];
                    gemm_f64(k, m, n, &aw, (1, k), &gw, (n, 1), &mut db);
                    self.accumulate(pending, *b, narrow(db));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let r = ta.rank();
                let (m, k) = (ta.shape()[r - 2], ta.shape()[r - 1]);
                let n = if *transpose_b { tb.shape()[r - 2] } else { tb.shape()[r - 1] };
                let batch: usize = ta.shape()[..r - 2].iter().product();
                let gw = T::widen(g);
                if self.requires_grad(*a) {
                    let bw = T::widen(tb.data());
                    // dA = G · Bᵀ where B is the logical [k, n] operand.
                    let bt_strides = if *transpose_b { (k, 1) } else { (1, n) };
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm_f64(
                            m,
                            n,
                            k,
                            &gw[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &bw[i * k * n..(i + 1) * k * n],
                            bt_strides,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accumulate(pending, *a, narrow(da));
                }
                if self.requires_grad(*b) {
                    let aw = T::widen(ta.data());
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let ga = &gw[i * m * n..(i + 1) * m * n];
                        let aa = &aw[i * m * k..(i + 1) * m * k];
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // stored B is [n, k]: dB = Gᵀ · A
                            gemm_f64(n, m, k, ga, (1, n), aa, (k, 1), dst);
                        } else {
                            gemm_f64(k, m, n, aa, (1, k), ga, (n, 1), dst);
                        }
                    }
                    self.accumulate(pending, *b, narrow(db));
                }
            }
            Op::Add { a, b } => {
                self.accumulate(pending, *a, g.to_vec());
                self.accumulate(pending, *b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(pending, *a, g.iter().zip(tb).map(|(&gi, &bi)| gi * bi).collect());
                self.accumulate(pending, *b, g.iter().zip(ta).map(|(&gi, &ai)| gi * ai).collect());
            }
            Op::AddBias { x, bias } => {
                self.accumulate(pending, *x, g.to_vec());
                if self.requires_grad(*bias) {
                    let n = self.value(*bias).numel();
                    let mut acc = vec![0.0f64; n];
                    for (j, &gv) in g.iter().enumerate() {
                        acc[j % n] += gv.as_f64();
                    }
                    self.accumulate(pending, *bias, narrow(acc));
                }
            }
            Op::Scale { x, factor } => {
                let d = g.iter().map(|&v| T::cast_from(v.as_f64() * factor)).collect();
                self.accumulate(pending, *x, d);
            }
            Op::Gelu { x } => {
                let xs = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xs)
                    .map(|(&gv, &xv)| T::cast_from(gv.as_f64() * gelu_derivative(xv.as_f64())))
                    .collect();
                self.accumulate(pending, *x, d);
            }
            Op::Tanh { x } => {
                let ys = node.value.data();
                let d = g
                    .iter()
                    .zip(ys)
                    .map(|(&gv, &y)| {
                        let y = y.as_f64();
                        T::cast_from(gv.as_f64() * (1.0 - y * y))
                    })
                    .collect();
                self.accumulate(pending, *x, d);
            }
            Op::Softmax { x, outer, len, inner } => {
                let ys = node.value.data();
                let mut d = vec![0.0f64; ys.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| ys[idx(j)].as_f64() * g[idx(j)].as_f64()).sum();
                        for j in 0..*len {
                            d[idx(j)] = ys[idx(j)].as_f64() * (g[idx(j)].as_f64() - dot);
                        }
                    }
                }
                self.accumulate(pending, *x, narrow(d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = self.value(*gain).numel();
                let gd = self.value(*gain).data();
                let rows = inv_std.len();
                let mut dgain = vec![0.0f64; d];
                let mut dbias = vec![0.0f64; d];
                let mut dx = vec![0.0f64; rows * d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &normalized[r * d..(r + 1) * d];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let gv = gr[j].as_f64();
                        dgain[j] += gv * xh[j];
                        dbias[j] += gv;
                        let dxhat = gv * gd[j].as_f64();
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xh[j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dxhat = gr[j].as_f64() * gd[j].as_f64();
                        dx[r * d + j] = scale * (d as f64 * dxhat - sum_dxhat - xh[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(pending, *x, narrow(dx));
                self.accumulate(pending, *gain, narrow(dgain));
                self.accumulate(pending, *bias, narrow(dbias));
            }
            Op::Dropout { x, multipliers } => {
                let d = g
                    .iter()
                    .zip(multipliers)
                    .map(|(&gv, &m)| T::cast_from(gv.as_f64() * m))
                    .collect();
                self.accumulate(pending, *x, d);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let upstream = g[0].as_f64() / labels.len() as f64;
                let mut d = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    d[r * classes + label] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= upstream);
                self.accumulate(pending, *logits, narrow(d));
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.accumulate(pending, *x, vec![g[0]; n]);
            }
            Op::GatherRows { src, rows } => {
                let ts = self.value(*src);
                let w = ts.last_dim();
                let mut d = vec![T::zero(); ts.numel()];
                for (out_row, &r) in rows.iter().enumerate() {
                    for j in 0..w {
                        d[r * w + j] = d[r * w + j] + g[out_row * w + j];
                    }
                }
                self.accumulate(pending, *src, d);
            }
            Op::SplitHeads { x, heads } => {
                let s = self.value(*x).shape();
                let (b, m, d) = (s[0], s[1], s[2]);
                self.accumulate(pending, *x, merge(g, b, *heads, m, d / heads));
            }
            Op::MergeHeads { x, heads } => {
                let s = self.value(*x).shape();
                let (b, m, e) = (s[0], s[2], s[3]);
                let d = heads * e;
                let mut out = Vec::with_capacity(g.len());
                for bi in 0..b {
                    for h in 0..*heads {
                        for l in 0..m {
                            let base = (bi * m + l) * d + h * e;
                            out.extend_from_slice(&g[base..base + e]);
                        }
                    }
                }
                self.accumulate(pending, *x, out);
            }
            Op::MaskedMeanPool { x, mask, counts } => {
                let s = self.value(*x).shape();
                let (b, m, d) = (s[0], s[1], s[2]);
                let mut out = vec![T::zero(); b * m * d];
                for bi in 0..b {
                    let inv = 1.0 / counts[bi] as f64;
                    for l in 0..m {
                        if !mask[bi * m + l] {
                            continue;
                        }
                        for j in 0..d {
                            out[(bi * m + l) * d + j] = T::cast_from(g[bi * d + j].as_f64() * inv);
                        }
                    }
                }
                self.accumulate(pending, *x, out);
            }
        }
        Ok(())
    }
}

fn merge<T: Scalar>(xs: &[T], b: usize, heads: usize, m: usize, e: usize) -> Vec<T> {
    let d = heads * e;
    let mut out = vec![T::zero(); xs.len()];
    for bi in 0..b {
        for h in 0..heads {
            for l in 0..m {
                let src = ((bi * heads + h) * m + l) * e;
                let dst = (bi * m + l) * d + h * e;
                out[dst..dst + e].copy_from_slice(&xs[src..src + e]);
            }
        }
    }
    out
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}
