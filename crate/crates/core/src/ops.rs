//! Fused tensor ops shared by the teacher and student models.

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{lit, Element, Tensor};

// ---------------------------------------------------------------------------
// Embedding lookup
// ---------------------------------------------------------------------------

struct EmbeddingBackward {
    ids: Vec<usize>,
}

impl<T: Element> Backward<T> for EmbeddingBackward {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let table = ctx.inputs[0];
        let d = table.last_dim();
        let mut out = Tensor::zeros(table.shape());
        let od = out.data_mut();
        for (row, &id) in self.ids.iter().enumerate() {
            let g = &ctx.grad.data()[row * d..(row + 1) * d];
            for (o, &gv) in od[id * d..(id + 1) * d].iter_mut().zip(g) {
                *o += gv;
            }
        }
        Ok(vec![Some(out)])
    }
}

/// Gathers rows of `table` (`[V, D]`) into a tensor of shape `[..prefix, D]`.
pub fn embedding<T: Element>(tape: &mut Tape<T>, table: Var, ids: &[u32], prefix: &[usize]) -> Result<Var> {
    let tv = tape.value(table);
    if tv.rank() != 2 {
        return Err(Error::invalid(format!("embedding table must be rank 2, got {:?}", tv.shape())));
    }
    let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
    if prefix.iter().product::<usize>() != ids.len() {
        return Err(Error::invalid(format!("{} token ids do not fill shape {prefix:?}", ids.len())));
    }
    let mut data = Vec::with_capacity(ids.len() * d);
    let mut idx = Vec::with_capacity(ids.len());
    for &id in ids {
        let id = id as usize;
        if id >= vocab {
            return Err(Error::invalid(format!("token id {id} out of range for vocab {vocab}")));
        }
        data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        idx.push(id);
    }
    let mut shape = prefix.to_vec();
    shape.push(d);
    let value = Tensor::new(&shape, data)?;
    Ok(tape.push_custom(vec![table], value, Box::new(EmbeddingBackward { ids: idx })))
}

// ---------------------------------------------------------------------------
// RMS norm
// ---------------------------------------------------------------------------

struct RmsNormBackward<T> {
    inv: Vec<T>,
}

impl<T: Element> Backward<T> for RmsNormBackward<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let d = x.last_dim();
        let (xd, wd, gd) = (x.data(), w.data(), ctx.grad.data());
        let mut dx = vec![T::zero(); xd.len()];
        let mut dw = vec![T::zero(); d];
        let inv_d = T::one() / lit::<T>(d as f64);
        for (r, &inv) in self.inv.iter().enumerate() {
            let xs = &xd[r * d..(r + 1) * d];
            let gs = &gd[r * d..(r + 1) * d];
            let mut dot = T::zero();
            for i in 0..d {
                let xhat = xs[i] * inv;
                dw[i] += gs[i] * xhat;
                dot += gs[i] * wd[i] * xhat;
            }
            let m = dot * inv_d;
            for i in 0..d {
                let xhat = xs[i] * inv;
                dx[r * d + i] = inv * (gs[i] * wd[i] - xhat * m);
            }
        }
        Ok(vec![
            ctx.needs[0].then(|| Tensor::new(x.shape(), dx)).transpose()?,
            ctx.needs[1].then(|| Tensor::new(w.shape(), dw)).transpose()?,
        ])
    }
}

/// `x / sqrt(mean(x²) + eps) ⊙ weight` over the last axis.
pub fn rms_norm<T: Element>(tape: &mut Tape<T>, x: Var, weight: Var, eps: f64) -> Result<Var> {
    let (xv, wv) = (tape.value(x), tape.value(weight));
    let d = xv.last_dim();
    if wv.shape() != [d] {
        return Err(Error::shape("rms_norm", xv.shape(), wv.shape()));
    }
    let rows = xv.rows();
    let eps: T = lit(eps);
    let inv_d = T::one() / lit::<T>(d as f64);
    let mut out = vec![T::zero(); xv.numel()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &xv.data()[r * d..(r + 1) * d];
        let ms = xs.iter().map(|&v| v * v).sum::<T>() * inv_d;
        let s = T::one() / (ms + eps).sqrt();
        for i in 0..d {
            out[r * d + i] = xs[i] * s * wv.data()[i];
        }
        inv.push(s);
    }
    let value = Tensor::new(xv.shape(), out)?;
    Ok(tape.push_custom(vec![x, weight], value, Box::new(RmsNormBackward { inv })))
}

// ---------------------------------------------------------------------------
// Per-head LayerNorm
// ---------------------------------------------------------------------------

struct LayerNormHeadsBackward<T> {
    head_dim: usize,
    inv_std: Vec<T>,
}

impl<T: Element> Backward<T> for LayerNormHeadsBackward<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, gamma) = (ctx.inputs[0], ctx.inputs[1]);
        let width = x.last_dim();
        let d = self.head_dim;
        let heads = width / d;
        let (xd, gd, gam) = (x.data(), ctx.grad.data(), gamma.data());
        let mut dx = vec![T::zero(); xd.len()];
        let mut dgamma = vec![T::zero(); width];
        let mut dbeta = vec![T::zero(); width];
        let inv_d = T::one() / lit::<T>(d as f64);
        for (gi, &inv) in self.inv_std.iter().enumerate() {
            let base = gi * d;
            let col0 = (gi % heads) * d;
            let xs = &xd[base..base + d];
            let mean = xs.iter().copied().sum::<T>() * inv_d;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for i in 0..d {
                let xhat = (xs[i] - mean) * inv;
                let g = gd[base + i];
                dgamma[col0 + i] += g * xhat;
                dbeta[col0 + i] += g;
                let dxhat = g * gam[col0 + i];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            for i in 0..d {
                let xhat = (xs[i] - mean) * inv;
                let dxhat = gd[base + i] * gam[col0 + i];
                dx[base + i] = inv * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
            }
        }
        Ok(vec![
            ctx.needs[0].then(|| Tensor::new(x.shape(), dx)).transpose()?,
            ctx.needs[1].then(|| Tensor::new(&[width], dgamma)).transpose()?,
            ctx.needs[2].then(|| Tensor::new(&[width], dbeta)).transpose()?,
        ])
    }
}

/// LayerNorm applied independently to each `head_dim` group of the last axis,
/// with per-channel affine `gamma`, `beta` of the full width.
pub fn layer_norm_heads<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    head_dim: usize,
    eps: f64,
) -> Result<Var> {
    let xv = tape.value(x);
    let width = xv.last_dim();
    if head_dim == 0 || width % head_dim != 0 {
        return Err(Error::invalid(format!("width {width} not divisible by head_dim {head_dim}")));
    }
    for p in [gamma, beta] {
        if tape.value(p).shape() != [width] {
            return Err(Error::shape("layer_norm_heads", xv.shape(), tape.value(p).shape()));
        }
    }
    let (gam, bet) = (tape.value(gamma).data(), tape.value(beta).data());
    let heads = width / head_dim;
    let groups = xv.numel() / head_dim;
    let eps: T = lit(eps);
    let inv_d = T::one() / lit::<T>(head_dim as f64);
    let mut out = vec![T::zero(); xv.numel()];
    let mut inv_std = Vec::with_capacity(groups);
    for gi in 0..groups {
        let base = gi * head_dim;
        let col0 = (gi % heads) * head_dim;
        let xs = &xv.data()[base..base + head_dim];
        let mean = xs.iter().copied().sum::<T>() * inv_d;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let inv = T::one() / (var + eps).sqrt();
        for i in 0..head_dim {
            out[base + i] = (xs[i] - mean) * inv * gam[col0 + i] + bet[col0 + i];
        }
        inv_std.push(inv);
    }
    let value = Tensor::new(xv.shape(), out)?;
    Ok(tape.push_custom(vec![x, gamma, beta], value, Box::new(LayerNormHeadsBackward { head_dim, inv_std })))
}

// ---------------------------------------------------------------------------
// GQA head repetition
// ---------------------------------------------------------------------------

struct RepeatHeadsBackward {
    n_kv: usize,
    n_rep: usize,
    head_dim: usize,
}

impl<T: Element> Backward<T> for RepeatHeadsBackward {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.inputs[0];
        let (kv_w, d) = (self.n_kv * self.head_dim, self.head_dim);
        let out_w = kv_w * self.n_rep;
        let mut dx = vec![T::zero(); x.numel()];
        let gd = ctx.grad.data();
        for r in 0..x.rows() {
            for h in 0..self.n_kv * self.n_rep {
                let src = r * out_w + h * d;
                let dst = r * kv_w + (h / self.n_rep) * d;
                for i in 0..d {
                    dx[dst + i] += gd[src + i];
                }
            }
        }
        Ok(vec![Some(Tensor::new(x.shape(), dx)?)])
    }
}

/// Repeats each of `n_kv` heads `n_rep` times along the last axis
/// (`[.., n_kv·d] → [.., n_kv·n_rep·d]`, query head `h` reads kv head `h / n_rep`).
pub fn repeat_heads<T: Element>(tape: &mut Tape<T>, x: Var, n_kv: usize, n_rep: usize, head_dim: usize) -> Result<Var> {
    if n_rep == 1 {
        return Ok(x);
    }
    let xv = tape.value(x);
    let kv_w = n_kv * head_dim;
    if xv.last_dim() != kv_w {
        return Err(Error::invalid(format!(
            "repeat_heads: last dim {} != {n_kv}·{head_dim}",
            xv.last_dim()
        )));
    }
    let out = repeat_heads_data(xv.data(), xv.rows(), n_kv, n_rep, head_dim);
    let mut shape = xv.shape().to_vec();
    *shape.last_mut().unwrap() = kv_w * n_rep;
    let value = Tensor::new(&shape, out)?;
    Ok(tape.push_custom(vec![x], value, Box::new(RepeatHeadsBackward { n_kv, n_rep, head_dim })))
}

pub(crate) fn repeat_heads_data<T: Element>(x: &[T], rows: usize, n_kv: usize, n_rep: usize, d: usize) -> Vec<T> {
    let kv_w = n_kv * d;
    let mut out = Vec::with_capacity(rows * kv_w * n_rep);
    for r in 0..rows {
        for h in 0..n_kv * n_rep {
            let src = r * kv_w + (h / n_rep) * d;
            out.extend_from_slice(&x[src..src + d]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Per-head L2 normalization
// ---------------------------------------------------------------------------

/// Norms below this are treated as an exactly-zero vector (normalized to zero).
pub const ZERO_NORM: f64 = 1e-12;

struct NormalizeHeadsBackward<T> {
    head_dim: usize,
    inv_norm: Vec<T>,
}

impl<T: Element> Backward<T> for NormalizeHeadsBackward<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let d = self.head_dim;
        let (y, gd) = (ctx.output.data(), ctx.grad.data());
        let mut dx = vec![T::zero(); y.len()];
        for (gi, &inv) in self.inv_norm.iter().enumerate() {
            if inv == T::zero() {
                continue;
            }
            let b = gi * d;
            let dot: T = (0..d).map(|i| y[b + i] * gd[b + i]).sum();
            for i in 0..d {
                dx[b + i] = (gd[b + i] - y[b + i] * dot) * inv;
            }
        }
        Ok(vec![Some(Tensor::new(ctx.output.shape(), dx)?)])
    }
}

/// Scales each `head_dim` group of the last axis to unit L2 norm; zero groups stay zero.
pub fn normalize_heads<T: Element>(tape: &mut Tape<T>, x: Var, head_dim: usize) -> Result<Var> {
    let xv = tape.value(x);
    if head_dim == 0 || xv.last_dim() % head_dim != 0 {
        return Err(Error::invalid(format!(
            "normalize_heads: width {} not divisible by {head_dim}",
            xv.last_dim()
        )));
    }
    let groups = xv.numel() / head_dim;
    let mut out = xv.data().to_vec();
    let mut inv_norm = Vec::with_capacity(groups);
    let zero: T = lit(ZERO_NORM);
    for gi in 0..groups {
        let s = &mut out[gi * head_dim..(gi + 1) * head_dim];
        let n = s.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n < zero {
            s.iter_mut().for_each(|v| *v = T::zero());
            inv_norm.push(T::zero());
        } else {
            let inv = T::one() / n;
            s.iter_mut().for_each(|v| *v *= inv);
            inv_norm.push(inv);
        }
    }
    let value = Tensor::new(xv.shape(), out)?;
    Ok(tape.push_custom(vec![x], value, Box::new(NormalizeHeadsBackward { head_dim, inv_norm })))
}
