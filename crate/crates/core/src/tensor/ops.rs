//! Differentiable tensor operations.

use std::sync::Arc;

use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::shape::{
    broadcast_shape, broadcast_strides, for_each_offset, reduce_to, resolve_axis, split_at_axis, strides,
};
use super::{numel, Result, Tensor, TensorError};
use crate::scalar::Real;

fn needs<T: Real>(parents: &[Tensor<T>], i: usize) -> bool {
    parents[i].is_requires_grad()
}

/// Evaluates `f` over the broadcast of two shapes.
fn broadcast_zip<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<usize>, Vec<T>)> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok((a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut bi = Vec::with_capacity(numel(&out));
    for_each_offset(&out, &sb, |_, o| bi.push(o));
    let (ad, bd) = (a.data(), b.data());
    let mut data = vec![T::zero(); numel(&out)];
    for_each_offset(&out, &sa, |o, ia| data[o] = f(ad[ia], bd[bi[o]]));
    Ok((out, data))
}

/// `grad ⊙ other` with `other` broadcast up to `out`.
fn mul_broadcast<T: Real>(grad: &[T], out: &[usize], other: &Tensor<T>) -> Vec<T> {
    if other.shape() == out {
        return grad.iter().zip(other.data()).map(|(&g, &v)| g * v).collect();
    }
    let st = broadcast_strides(other.shape(), out);
    let od = other.data();
    let mut res = vec![T::zero(); grad.len()];
    for_each_offset(out, &st, |o, i| res[o] = grad[o] * od[i]);
    res
}

impl<T: Real> Tensor<T> {
    fn unary(&self, op: &'static str, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + Send + Sync + 'static) -> Self {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let out: Arc<[T]> = data.into();
        let saved = Arc::clone(&out);
        Tensor::from_op_shared(op, self.shape().to_vec(), out, vec![self.clone()], move |g, p| {
            let x = p[0].data();
            vec![Some(g.iter().zip(x).zip(saved.iter()).map(|((&g, &x), &y)| g * df(x, y)).collect())]
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let (shape, data) = broadcast_zip("add", self, other, |x, y| x + y)?;
        let out = shape.clone();
        Ok(Tensor::from_op("add", shape, data, vec![self.clone(), other.clone()], move |g, p| {
            vec![
                needs(p, 0).then(|| reduce_to(g, &out, p[0].shape())),
                needs(p, 1).then(|| reduce_to(g, &out, p[1].shape())),
            ]
        }))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let (shape, data) = broadcast_zip("sub", self, other, |x, y| x - y)?;
        let out = shape.clone();
        Ok(Tensor::from_op("sub", shape, data, vec![self.clone(), other.clone()], move |g, p| {
            vec![
                needs(p, 0).then(|| reduce_to(g, &out, p[0].shape())),
                needs(p, 1).then(|| reduce_to(g, &out, p[1].shape()).into_iter().map(|v| -v).collect()),
            ]
        }))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        let (shape, data) = broadcast_zip("mul", self, other, |x, y| x * y)?;
        let out = shape.clone();
        Ok(Tensor::from_op("mul", shape, data, vec![self.clone(), other.clone()], move |g, p| {
            vec![
                needs(p, 0).then(|| reduce_to(&mul_broadcast(g, &out, &p[1]), &out, p[0].shape())),
                needs(p, 1).then(|| reduce_to(&mul_broadcast(g, &out, &p[0]), &out, p[1].shape())),
            ]
        }))
    }

    pub fn scale(&self, s: f64) -> Self {
        let s = T::of(s);
        let data = self.data().iter().map(|&x| x * s).collect();
        Tensor::from_op("scale", self.shape().to_vec(), data, vec![self.clone()], move |g, _| {
            vec![Some(g.iter().map(|&v| v * s).collect())]
        })
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    /// Natural logarithm.
    pub fn log(&self) -> Self {
        self.unary("log", |x| x.ln(), |x, _| x.recip())
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&self) -> Self {
        self.unary(
            "sqrt",
            |x| x.sqrt(),
            |_, y| if y > T::zero() { T::of(0.5) / y } else { T::zero() },
        )
    }

    /// Gaussian error linear unit `x·Φ(x)` (exact erf form).
    pub fn gelu(&self) -> Self {
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let half = T::of(0.5);
        self.unary(
            "gelu",
            move |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            move |x, _| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = (-half * x * x).exp() * inv_sqrt_2pi;
                cdf + x * pdf
            },
        )
    }

    /// Same data viewed with a new shape. Storage is shared.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op_shared("reshape", shape.to_vec(), self.shared_data(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                reason: format!("{axes:?} is not a permutation of rank {rank}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_data(self.data(), self.shape(), axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(Tensor::from_op("permute", out_shape.clone(), data, vec![self.clone()], move |g, _| {
            vec![Some(permute_data(g, &out_shape, &inverse))]
        }))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: isize, b: isize) -> Result<Self> {
        let (a, b) = (resolve_axis(a, self.rank())?, resolve_axis(b, self.rank())?);
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Joins tensors along `axis`; all other extents must match.
    pub fn concat(parts: &[Tensor<T>], axis: isize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let axis = resolve_axis(axis, first.rank())?;
        for p in &parts[1..] {
            let compatible = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = extents.iter().sum();
        let (outer, total, inner) = split_at_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                data.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        Ok(Tensor::from_op("concat", out_shape, data, parts.to_vec(), move |g, p| {
            let mut grads: Vec<Option<Vec<T>>> =
                p.iter().map(|t| t.is_requires_grad().then(|| Vec::with_capacity(t.numel()))).collect();
            for o in 0..outer {
                let mut start = o * total * inner;
                for (gi, &e) in grads.iter_mut().zip(&extents) {
                    if let Some(gi) = gi {
                        gi.extend_from_slice(&g[start..start + e * inner]);
                    }
                    start += e * inner;
                }
            }
            grads
        }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: isize, start: usize, len: usize) -> Result<Self> {
        let axis = resolve_axis(axis, self.rank())?;
        let (outer, extent, inner) = split_at_axis(self.shape(), axis);
        if start + len > extent {
            return Err(TensorError::Invalid {
                op: "narrow",
                reason: format!("range {start}..{} exceeds extent {extent}", start + len),
            });
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        Ok(Tensor::from_op("narrow", out_shape, data, vec![self.clone()], move |g, _| {
            let mut gi = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                gi[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gi)]
        }))
    }

    pub fn sum_axis(&self, axis: isize, keepdim: bool) -> Result<Self> {
        let axis = resolve_axis(axis, self.rank())?;
        let (outer, extent, inner) = split_at_axis(self.shape(), axis);
        let src = self.data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for e in 0..extent {
                let row = &src[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
            }
        }
        let mut out_shape = self.shape().to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Ok(Tensor::from_op("sum_axis", out_shape, data, vec![self.clone()], move |g, _| {
            let mut gi = Vec::with_capacity(outer * extent * inner);
            for o in 0..outer {
                for _ in 0..extent {
                    gi.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gi)]
        }))
    }

    pub fn mean_axis(&self, axis: isize, keepdim: bool) -> Result<Self> {
        let a = resolve_axis(axis, self.rank())?;
        let n = self.shape()[a];
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n as f64))
    }

    /// Sum of all elements as a rank-0 tensor, accumulated in ascending
    /// index order in 64-bit and rounded once.
    pub fn sum_all(&self) -> Self {
        let mut acc = 0.0f64;
        for &v in self.data() {
            acc += v.as_f64();
        }
        let n = self.numel();
        Tensor::from_op("sum_all", Vec::new(), vec![T::of(acc)], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Self {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    /// Explicit broadcast to a larger shape.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        match broadcast_shape(self.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: self.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let st = broadcast_strides(self.shape(), shape);
        let src = self.data();
        let mut data = vec![T::zero(); numel(shape)];
        for_each_offset(shape, &st, |o, i| data[o] = src[i]);
        let out = shape.to_vec();
        Ok(Tensor::from_op("broadcast_to", out.clone(), data, vec![self.clone()], move |g, p| {
            vec![Some(reduce_to(g, &out, p[0].shape()))]
        }))
    }

    /// Selects rows of a matrix. Repeated indices are allowed.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        if self.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                reason: format!("expected a matrix, got shape {:?}", self.shape()),
            });
        }
        let (r, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                reason: format!("row {bad} out of range for {r} rows"),
            });
        }
        let src = self.data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rows = rows.to_vec();
        Ok(Tensor::from_op("gather_rows", vec![rows.len(), d], data, vec![self.clone()], move |g, _| {
            let mut gi = vec![T::zero(); r * d];
            for (k, &i) in rows.iter().enumerate() {
                gi[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&g[k * d..(k + 1) * d])
                    .for_each(|(a, &b)| *a += b);
            }
            vec![Some(gi)]
        }))
    }

    /// Batched matrix product `[..,m,k] · [..,k,n] → [..,m,n]` with
    /// broadcasting over the leading (batch) axes.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(mismatch());
        }
        let (ra, rb) = (self.rank(), other.rank());
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let a_batch = &self.shape()[..ra - 2];
        let b_batch = &other.shape()[..rb - 2];
        let batch = broadcast_shape(a_batch, b_batch).ok_or_else(mismatch)?;
        let nb = numel(&batch);
        let a_off = batch_offsets(a_batch, &batch, m * k);
        let b_off = batch_offsets(b_batch, &batch, k * n);

        let (ad, bd) = (self.data(), other.data());
        let mut data = vec![T::zero(); nb * m * n];
        for bi in 0..nb {
            gemm_nn(&ad[a_off[bi]..], &bd[b_off[bi]..], &mut data[bi * m * n..], m, k, n);
        }
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(Tensor::from_op("matmul", out_shape, data, vec![self.clone(), other.clone()], move |g, p| {
            let (ad, bd) = (p[0].data(), p[1].data());
            let ga = needs(p, 0).then(|| {
                // dA = dC · Bᵀ
                let mut ga = vec![T::zero(); p[0].numel()];
                for bi in 0..nb {
                    gemm_nt(&g[bi * m * n..], &bd[b_off[bi]..], &mut ga[a_off[bi]..], m, n, k);
                }
                ga
            });
            let gb = needs(p, 1).then(|| {
                // dB = Aᵀ · dC
                let mut gb = vec![T::zero(); p[1].numel()];
                for bi in 0..nb {
                    gemm_tn(&ad[a_off[bi]..], &g[bi * m * n..], &mut gb[b_off[bi]..], k, m, n);
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Softmax along `axis` with max-subtraction.
    pub fn softmax(&self, axis: isize) -> Result<Self> {
        let axis = resolve_axis(axis, self.rank())?;
        self.check_finite("softmax")?;
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        let y = softmax_lanes(self.data(), outer, n, inner, false);
        let out: Arc<[T]> = y.into();
        let saved = Arc::clone(&out);
        Ok(Tensor::from_op_shared("softmax", self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let mut gi = vec![T::zero(); g.len()];
            for_each_lane(outer, n, inner, |idx| {
                let mut dot = T::zero();
                for &i in idx {
                    dot += g[i] * saved[i];
                }
                for &i in idx {
                    gi[i] = saved[i] * (g[i] - dot);
                }
            });
            vec![Some(gi)]
        }))
    }

    /// `log(softmax(x))` along `axis`, evaluated through log-sum-exp.
    pub fn log_softmax(&self, axis: isize) -> Result<Self> {
        let axis = resolve_axis(axis, self.rank())?;
        self.check_finite("log_softmax")?;
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        let y = softmax_lanes(self.data(), outer, n, inner, true);
        let out: Arc<[T]> = y.into();
        let saved = Arc::clone(&out);
        Ok(Tensor::from_op_shared("log_softmax", self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let mut gi = vec![T::zero(); g.len()];
            for_each_lane(outer, n, inner, |idx| {
                let mut total = T::zero();
                for &i in idx {
                    total += g[i];
                }
                for &i in idx {
                    gi[i] = g[i] - saved[i].exp() * total;
                }
            });
            vec![Some(gi)]
        }))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layernorm(&self, gamma: &Self, beta: &Self, eps: f64) -> Result<Self> {
        let d = *self.shape().last().ok_or_else(|| TensorError::Invalid {
            op: "layernorm",
            reason: "rank-0 input".into(),
        })?;
        for p in [gamma, beta] {
            if p.shape() != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layernorm",
                    lhs: self.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let rows = self.numel() / d.max(1);
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let x = self.data();
        let (gd, bd) = (gamma.data(), beta.data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean /= dn;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= dn;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = gd[j] * h + bd[j];
            }
        }
        let parents = vec![self.clone(), gamma.clone(), beta.clone()];
        Ok(Tensor::from_op("layernorm", self.shape().to_vec(), y, parents, move |g, p| {
            let gd = p[1].data();
            let gx = needs(p, 0).then(|| {
                let mut gx = vec![T::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gd[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    for j in 0..d {
                        gx[r * d + j] = rstd[r] * (gr[j] * gd[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                gx
            });
            let gg = needs(p, 1).then(|| {
                let mut gg = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
                gg
            });
            let gb = needs(p, 2).then(|| {
                let mut gb = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
                gb
            });
            vec![gx, gg, gb]
        }))
    }

    /// Inverted dropout. In eval mode, or with `rate == 0`, returns `self`
    /// unchanged without touching `rng`.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, training: bool, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                reason: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !training || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        self.mul(&Tensor::from_vec(self.shape(), mask)?)
    }

    /// `x · wᵀ + b` over the last axis, with `w` shaped `[out, in]`.
    pub fn linear(&self, w: &Self, b: Option<&Self>) -> Result<Self> {
        let d_in = *self.shape().last().unwrap_or(&0);
        if w.rank() != 2 || w.shape()[1] != d_in {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let rows = self.numel() / d_in.max(1);
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = w.shape()[0];
        let y = self.reshape(&[rows, d_in])?.matmul(&w.transpose(0, 1)?)?;
        let y = match b {
            Some(b) => y.add(b)?,
            None => y,
        };
        y.reshape(&out_shape)
    }

    fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }
}

fn batch_offsets(src_batch: &[usize], batch: &[usize], block: usize) -> Vec<usize> {
    let st = broadcast_strides(src_batch, batch);
    let mut offs = Vec::with_capacity(numel(batch));
    for_each_offset(batch, &st, |_, o| offs.push(o * block));
    offs
}

fn permute_data<T: Real>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides = strides(shape);
    let st: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let mut out = vec![T::zero(); src.len()];
    for_each_offset(&out_shape, &st, |o, i| out[o] = src[i]);
    out
}

fn for_each_lane(outer: usize, n: usize, inner: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0; n];
    for o in 0..outer {
        for j in 0..inner {
            for (e, slot) in idx.iter_mut().enumerate() {
                *slot = (o * n + e) * inner + j;
            }
            f(&idx);
        }
    }
}

fn softmax_lanes<T: Real>(x: &[T], outer: usize, n: usize, inner: usize, log: bool) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for_each_lane(outer, n, inner, |idx| {
        let mut max = T::neg_infinity();
        for &i in idx {
            max = max.max(x[i]);
        }
        let mut total = T::zero();
        for &i in idx {
            let e = (x[i] - max).exp();
            y[i] = e;
            total += e;
        }
        if log {
            let lse = total.ln();
            for &i in idx {
                y[i] = x[i] - max - lse;
            }
        } else {
            for &i in idx {
                y[i] /= total;
            }
        }
    });
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(id.matmul(&m).unwrap().data(), m.data());
        let sel = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let n = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(sel.matmul(&n).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let a = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[10.0, 1.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[12.0, 34.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let s = t(&[3], &[0.0, 0.0, 0.0]).softmax(0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = t(&[2], &[1000.0, 0.0]).softmax(-1).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = t(&[2], &[f64::NAN, 0.0]).softmax(0).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "softmax" });
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]);
        let s = x.softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layernorm_cases() {
        let x = t(&[1, 4], &[2.5; 4]);
        let y = x.layernorm(&Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let x = t(&[2], &[1.0, 3.0]);
        let y = x.layernorm(&Tensor::ones(&[2]), &Tensor::zeros(&[2]), 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn gelu_asymptotes() {
        let y = t(&[3], &[0.0, 20.0, -20.0]).gelu();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 20.0).abs() < 1e-12);
        assert!(y.data()[2].abs() < 1e-12);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        assert!(x.dropout(0.0, true, &mut rng).unwrap().same_storage(&x));
        let y = x.dropout(0.1, false, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(x.dropout(1.0, true, &mut rng).is_err());
        assert!(x.dropout(-0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let x = Tensor::<f32>::ones(&[n]);
        let y = x.dropout(0.1, true, &mut rng).unwrap();
        let dropped = y.data().iter().filter(|&&v| v == 0.0).count();
        let frac = dropped as f64 / n as f64;
        assert!((0.09..=0.11).contains(&frac), "{frac}");
        let kept = y.data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((*kept - 1.0 / 0.9).abs() < 1e-6);
    }

    #[test]
    fn reshape_transpose_round_trip_is_bitwise() {
        let x = t(&[2, 3, 4], &(0..24).map(|v| (v as f64).sqrt()).collect::<Vec<_>>());
        let y = x.reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap();
        assert_eq!(y.data(), x.data());
        let z = x.transpose(0, 2).unwrap().transpose(0, 2).unwrap();
        assert_eq!(z.data(), x.data());
        assert_eq!(x.transpose(0, 2).unwrap().shape(), &[4, 3, 2]);
    }

    #[test]
    fn concat_narrow_inverse() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.narrow(1, 0, 1).unwrap().data(), a.data());
        assert_eq!(c.narrow(1, 1, 2).unwrap().data(), b.data());
        assert!(c.narrow(1, 2, 2).is_err());
    }

    #[test]
    fn gather_rows_bounds() {
        let x = t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(x.gather_rows(&[2, 0]).unwrap().data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(x.gather_rows(&[3]).is_err());
    }

    #[test]
    fn reductions() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.sum_axis(0, false).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1, true).unwrap().shape(), &[2, 1]);
        assert_eq!(x.mean_axis(1, false).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(x.mean_all().item(), 3.5);
    }

    #[test]
    fn linear_matches_manual() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = t(&[3], &[0.5, 0.5, 0.5]);
        assert_eq!(x.linear(&w, Some(&b)).unwrap().data(), &[1.5, 2.5, 3.5]);
    }

    #[test]
    fn sqrt_grad_at_zero_is_zero() {
        let x = Tensor::<f64>::param(&[2], vec![0.0, 4.0]).unwrap();
        x.sqrt().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.25]);
    }
}
