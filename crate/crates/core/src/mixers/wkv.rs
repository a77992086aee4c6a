//! The wkv recurrences: single steps, fused scans with hand-written adjoints,
//! and quadratic reference forms.
//!
//! Layouts: sequences are `[B, T, H·d]`, states `[B, H, d, d]`. The RWKV6 state
//! is indexed `[key, value]`, the RWKV7 state `[value, key]`, following each
//! mixer's own recurrence.

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn check_finite<T: Element>(what: &str, xs: &[T]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Per-head kernels on raw slices
// ---------------------------------------------------------------------------

/// `S = diag(w)·S + kᵀv`, `p = r·S` for one head. `w = None` means no decay.
#[inline]
pub(crate) fn wkv6_head_step<T: Element>(s: &mut [T], d: usize, r: &[T], k: &[T], v: &[T], w: Option<&[T]>, p: &mut [T]) {
    p.iter_mut().for_each(|x| *x = T::zero());
    for i in 0..d {
        let row = &mut s[i * d..(i + 1) * d];
        let (ki, ri) = (k[i], r[i]);
        match w {
            Some(w) => {
                let wi = w[i];
                for j in 0..d {
                    row[j] = row[j] * wi + ki * v[j];
                    p[j] += ri * row[j];
                }
            }
            None => {
                for j in 0..d {
                    row[j] += ki * v[j];
                    p[j] += ri * row[j];
                }
            }
        }
    }
}

/// `S = S·(diag(w) − κᵀ(a⊙κ)) + vᵀk̃`, `p = r·Sᵀ` for one head.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn wkv7_head_step<T: Element>(
    s: &mut [T],
    d: usize,
    r: &[T],
    w: &[T],
    kt: &[T],
    kappa: &[T],
    a: &[T],
    v: &[T],
    p: &mut [T],
) {
    for m in 0..d {
        let row = &mut s[m * d..(m + 1) * d];
        let u: T = row.iter().zip(kappa).map(|(&x, &c)| x * c).sum();
        let vm = v[m];
        let mut acc = T::zero();
        for j in 0..d {
            let x = row[j] * w[j] - u * a[j] * kappa[j] + vm * kt[j];
            row[j] = x;
            acc += r[j] * x;
        }
        p[m] = acc;
    }
}

// ---------------------------------------------------------------------------
// Single-step API on tensors
// ---------------------------------------------------------------------------

fn step_dims<T: Element>(state: &Tensor<T>, vecs: &[&Tensor<T>]) -> Result<(usize, usize)> {
    if state.rank() != 3 || state.shape()[1] != state.shape()[2] {
        return Err(Error::invalid(format!("wkv state must be [H, d, d], got {:?}", state.shape())));
    }
    let (h, d) = (state.shape()[0], state.shape()[1]);
    for v in vecs {
        if v.numel() != h * d {
            return Err(Error::shape("wkv step", state.shape(), v.shape()));
        }
    }
    Ok((h, d))
}

/// One RWKV6 step over all heads: `state [H, d, d]`, vectors `[H·d]`. Returns `(state′, p)`.
pub fn wkv6_step<T: Element>(
    state: &Tensor<T>,
    w: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    r: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, d) = step_dims(state, &[w, k, v, r])?;
    for (n, t) in [("w", w), ("k", k), ("v", v), ("r", r), ("state", state)] {
        check_finite(&format!("wkv6_step {n}"), t.data())?;
    }
    let mut s = state.clone();
    let mut p = vec![T::zero(); h * d];
    for hh in 0..h {
        let o = hh * d;
        wkv6_head_step(
            &mut s.data_mut()[o * d..(o + d) * d],
            d,
            &r.data()[o..o + d],
            &k.data()[o..o + d],
            &v.data()[o..o + d],
            Some(&w.data()[o..o + d]),
            &mut p[o..o + d],
        );
    }
    Ok((s, Tensor::new(&[h * d], p)?))
}

/// One RWKV7 step over all heads. Returns `(state′, p)`.
pub fn wkv7_step<T: Element>(
    state: &Tensor<T>,
    w: &Tensor<T>,
    k_tilde: &Tensor<T>,
    kappa: &Tensor<T>,
    a: &Tensor<T>,
    v: &Tensor<T>,
    r: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, d) = step_dims(state, &[w, k_tilde, kappa, a, v, r])?;
    for (n, t) in [("w", w), ("k_tilde", k_tilde), ("kappa", kappa), ("a", a), ("v", v), ("r", r), ("state", state)] {
        check_finite(&format!("wkv7_step {n}"), t.data())?;
    }
    let mut s = state.clone();
    let mut p = vec![T::zero(); h * d];
    for hh in 0..h {
        let o = hh * d;
        let sl = |t: &Tensor<T>| t.data()[o..o + d].to_vec();
        wkv7_head_step(
            &mut s.data_mut()[o * d..(o + d) * d],
            d,
            &sl(r),
            &sl(w),
            &sl(k_tilde),
            &sl(kappa),
            &sl(a),
            &sl(v),
            &mut p[o..o + d],
        );
    }
    Ok((s, Tensor::new(&[h * d], p)?))
}

// ---------------------------------------------------------------------------
// Fused scans
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct ScanDims {
    batch: usize,
    t: usize,
    heads: usize,
    d: usize,
}

impl ScanDims {
    fn width(&self) -> usize {
        self.heads * self.d
    }

    fn state_len(&self) -> usize {
        self.heads * self.d * self.d
    }

    /// Offset of token `(b, t)`, head `h` in a `[B, T, H·d]` buffer.
    fn tok(&self, b: usize, t: usize, h: usize) -> usize {
        (b * self.t + t) * self.width() + h * self.d
    }

    /// Offset of the state after token `t` in a `[B, T, H, d, d]` history.
    fn hist(&self, b: usize, t: usize, h: usize) -> usize {
        ((b * self.t + t) * self.heads + h) * self.d * self.d
    }
}

fn scan_dims<T: Element>(tape: &Tape<T>, inputs: &[Var], heads: usize, state: Option<&Tensor<T>>) -> Result<ScanDims> {
    let s0 = tape.shape(inputs[0]).to_vec();
    if s0.len() != 3 || heads == 0 || s0[2] % heads != 0 {
        return Err(Error::invalid(format!("wkv scan expects [B, T, H·d] with {heads} heads, got {s0:?}")));
    }
    for &v in &inputs[1..] {
        if tape.shape(v) != s0.as_slice() {
            return Err(Error::shape("wkv scan", &s0, tape.shape(v)));
        }
    }
    let dims = ScanDims { batch: s0[0], t: s0[1], heads, d: s0[2] / heads };
    if let Some(s) = state {
        if s.shape() != [dims.batch, heads, dims.d, dims.d] {
            return Err(Error::shape("wkv scan state", &[dims.batch, heads, dims.d, dims.d], s.shape()));
        }
    }
    Ok(dims)
}

struct Wkv6Backward<T> {
    dims: ScanDims,
    decay: bool,
    s0: Vec<T>,
    /// States after every token, `[B, T, H, d, d]`.
    history: Vec<T>,
}

impl<T: Element> Backward<T> for Wkv6Backward<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let dm = self.dims;
        let d = dm.d;
        let (r, k, v) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
        let w = self.decay.then(|| ctx.inputs[3].data());
        let gp = ctx.grad.data();
        let n = r.len();
        let (mut dr, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
        let mut dw = vec![T::zero(); if self.decay { n } else { 0 }];
        let mut ds = vec![T::zero(); d * d];
        for b in 0..dm.batch {
            for h in 0..dm.heads {
                ds.iter_mut().for_each(|x| *x = T::zero());
                for t in (0..dm.t).rev() {
                    let o = dm.tok(b, t, h);
                    let s_t = &self.history[dm.hist(b, t, h)..dm.hist(b, t, h) + d * d];
                    let s_prev = if t == 0 {
                        &self.s0[(b * dm.heads + h) * d * d..(b * dm.heads + h + 1) * d * d]
                    } else {
                        &self.history[dm.hist(b, t - 1, h)..dm.hist(b, t - 1, h) + d * d]
                    };
                    let dp = &gp[o..o + d];
                    for i in 0..d {
                        let ri = r[o + i];
                        let row = &mut ds[i * d..(i + 1) * d];
                        let srow = &s_t[i * d..(i + 1) * d];
                        let prow = &s_prev[i * d..(i + 1) * d];
                        let (mut a_r, mut a_k, mut a_w) = (T::zero(), T::zero(), T::zero());
                        let ki = k[o + i];
                        for j in 0..d {
                            a_r += dp[j] * srow[j];
                            let g = row[j] + ri * dp[j];
                            row[j] = g;
                            a_k += g * v[o + j];
                            dv[o + j] += ki * g;
                            a_w += g * prow[j];
                        }
                        dr[o + i] = a_r;
                        dk[o + i] = a_k;
                        if let Some(w) = w {
                            dw[o + i] = a_w;
                            let wi = w[o + i];
                            row.iter_mut().for_each(|x| *x *= wi);
                        }
                    }
                }
            }
        }
        let shape = ctx.inputs[0].shape();
        let mut out = vec![
            ctx.needs[0].then(|| Tensor::new(shape, dr)).transpose()?,
            ctx.needs[1].then(|| Tensor::new(shape, dk)).transpose()?,
            ctx.needs[2].then(|| Tensor::new(shape, dv)).transpose()?,
        ];
        if self.decay {
            out.push(ctx.needs[3].then(|| Tensor::new(shape, dw)).transpose()?);
        }
        Ok(out)
    }
}

/// RWKV6-style scan over `[B, T, H·d]` inputs; `w = None` runs an undecayed
/// linear-attention sum. `state` (`[B, H, d, d]`) seeds the scan and receives
/// the final state; without it the scan starts from zero.
pub fn wkv6_scan<T: Element>(
    tape: &mut Tape<T>,
    r: Var,
    k: Var,
    v: Var,
    w: Option<Var>,
    heads: usize,
    state: Option<&mut Tensor<T>>,
) -> Result<Var> {
    let mut inputs = vec![r, k, v];
    inputs.extend(w);
    let dims = scan_dims(tape, &inputs, heads, state.as_deref())?;
    let d = dims.d;
    let mut s = match &state {
        Some(s) => s.data().to_vec(),
        None => vec![T::zero(); dims.batch * dims.state_len()],
    };
    let record = tape.needs_grad(&inputs);
    let s0 = if record { s.clone() } else { Vec::new() };
    let mut history = if record { vec![T::zero(); dims.batch * dims.t * dims.state_len()] } else { Vec::new() };
    let (rd, kd, vd) = (tape.value(r).data(), tape.value(k).data(), tape.value(v).data());
    let wd = w.map(|w| tape.value(w).data());
    let mut out = vec![T::zero(); rd.len()];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let so = (b * dims.heads + h) * d * d;
            let sh = &mut s[so..so + d * d];
            for t in 0..dims.t {
                let o = dims.tok(b, t, h);
                let wt = wd.map(|w| &w[o..o + d]);
                wkv6_head_step(sh, d, &rd[o..o + d], &kd[o..o + d], &vd[o..o + d], wt, &mut out[o..o + d]);
                if record {
                    let ho = dims.hist(b, t, h);
                    history[ho..ho + d * d].copy_from_slice(sh);
                }
            }
        }
    }
    check_finite("wkv6 scan output", &out)?;
    let shape = tape.shape(r).to_vec();
    if let Some(st) = state {
        *st = Tensor::new(st.shape(), s)?;
    }
    let value = Tensor::new(&shape, out)?;
    let bw = Wkv6Backward { dims, decay: w.is_some(), s0, history };
    Ok(tape.push_custom(inputs, value, Box::new(bw)))
}

struct Wkv7Backward<T> {
    dims: ScanDims,
    s0: Vec<T>,
    history: Vec<T>,
}

impl<T: Element> Backward<T> for Wkv7Backward<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let dm = self.dims;
        let d = dm.d;
        let [r, w, kt, kappa, a, v] =
            [0, 1, 2, 3, 4, 5].map(|i| ctx.inputs[i].data());
        let gp = ctx.grad.data();
        let n = r.len();
        let mut grads: [Vec<T>; 6] = std::array::from_fn(|_| vec![T::zero(); n]);
        let mut ds = vec![T::zero(); d * d];
        let (mut u, mut q, mut c) = (vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d]);
        for b in 0..dm.batch {
            for h in 0..dm.heads {
                ds.iter_mut().for_each(|x| *x = T::zero());
                for t in (0..dm.t).rev() {
                    let o = dm.tok(b, t, h);
                    let s_t = &self.history[dm.hist(b, t, h)..dm.hist(b, t, h) + d * d];
                    let sp = if t == 0 {
                        &self.s0[(b * dm.heads + h) * d * d..(b * dm.heads + h + 1) * d * d]
                    } else {
                        &self.history[dm.hist(b, t - 1, h)..dm.hist(b, t - 1, h) + d * d]
                    };
                    let (rt, wt, ktt, kp, at, vt) =
                        (&r[o..o + d], &w[o..o + d], &kt[o..o + d], &kappa[o..o + d], &a[o..o + d], &v[o..o + d]);
                    let dp = &gp[o..o + d];
                    let [gr, gw, gk, gkappa, ga, gv] = &mut grads;
                    c.iter_mut().for_each(|x| *x = T::zero());
                    for m in 0..d {
                        let row = &mut ds[m * d..(m + 1) * d];
                        let srow = &s_t[m * d..(m + 1) * d];
                        let prow = &sp[m * d..(m + 1) * d];
                        let dpm = dp[m];
                        let vm = vt[m];
                        let mut um = T::zero();
                        let mut qm = T::zero();
                        let mut dvm = T::zero();
                        for j in 0..d {
                            gr[o + j] += dpm * srow[j];
                            let g = row[j] + dpm * rt[j];
                            row[j] = g;
                            dvm += g * ktt[j];
                            gk[o + j] += vm * g;
                            gw[o + j] += prow[j] * g;
                            um += prow[j] * kp[j];
                            qm += g * at[j] * kp[j];
                        }
                        gv[o + m] = dvm;
                        u[m] = um;
                        q[m] = qm;
                        for j in 0..d {
                            c[j] += um * row[j];
                        }
                    }
                    // dκ_i = −Σ_m S_prev[m,i] q_m − c_i a_i ; da_j = −c_j κ_j
                    for i in 0..d {
                        let mut acc = T::zero();
                        for m in 0..d {
                            acc += sp[m * d + i] * q[m];
                        }
                        gkappa[o + i] = -acc - c[i] * at[i];
                        ga[o + i] = -c[i] * kp[i];
                    }
                    for m in 0..d {
                        let qm = q[m];
                        let row = &mut ds[m * d..(m + 1) * d];
                        for i in 0..d {
                            row[i] = row[i] * wt[i] - kp[i] * qm;
                        }
                    }
                }
            }
        }
        let shape = ctx.inputs[0].shape();
        grads
            .into_iter()
            .zip(&ctx.needs)
            .map(|(g, &need)| need.then(|| Tensor::new(shape, g)).transpose())
            .collect()
    }
}

/// RWKV7 scan over `[B, T, H·d]` inputs `(r, w, k̃, κ, a, v)`. State handling as in [`wkv6_scan`].
#[allow(clippy::too_many_arguments)]
pub fn wkv7_scan<T: Element>(
    tape: &mut Tape<T>,
    r: Var,
    w: Var,
    k_tilde: Var,
    kappa: Var,
    a: Var,
    v: Var,
    heads: usize,
    state: Option<&mut Tensor<T>>,
) -> Result<Var> {
    let inputs = vec![r, w, k_tilde, kappa, a, v];
    let dims = scan_dims(tape, &inputs, heads, state.as_deref())?;
    let d = dims.d;
    let mut s = match &state {
        Some(s) => s.data().to_vec(),
        None => vec![T::zero(); dims.batch * dims.state_len()],
    };
    let record = tape.needs_grad(&inputs);
    let s0 = if record { s.clone() } else { Vec::new() };
    let mut history = if record { vec![T::zero(); dims.batch * dims.t * dims.state_len()] } else { Vec::new() };
    let vals: Vec<&[T]> = inputs.iter().map(|&x| tape.value(x).data()).collect();
    let mut out = vec![T::zero(); vals[0].len()];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let so = (b * dims.heads + h) * d * d;
            let sh = &mut s[so..so + d * d];
            for t in 0..dims.t {
                let o = dims.tok(b, t, h);
                let sl = |i: usize| &vals[i][o..o + d];
                wkv7_head_step(sh, d, sl(0), sl(1), sl(2), sl(3), sl(4), sl(5), &mut out[o..o + d]);
                if record {
                    let ho = dims.hist(b, t, h);
                    history[ho..ho + d * d].copy_from_slice(sh);
                }
            }
        }
    }
    check_finite("wkv7 scan output", &out)?;
    let shape = tape.shape(r).to_vec();
    if let Some(st) = state {
        *st = Tensor::new(st.shape(), s)?;
    }
    let value = Tensor::new(&shape, out)?;
    Ok(tape.push_custom(inputs, value, Box::new(Wkv7Backward { dims, s0, history })))
}

// ---------------------------------------------------------------------------
// Quadratic reference forms (single sequence, `[T, H·d]`)
// ---------------------------------------------------------------------------

fn seq_dims<T: Element>(xs: &[&Tensor<T>], heads: usize) -> Result<(usize, usize)> {
    let s = xs[0].shape();
    if s.len() != 2 || heads == 0 || s[1] % heads != 0 {
        return Err(Error::invalid(format!("reference form expects [T, H·d] with {heads} heads, got {s:?}")));
    }
    for x in xs {
        if x.shape() != s {
            return Err(Error::shape("reference form", s, x.shape()));
        }
    }
    Ok((s[0], s[1] / heads))
}

/// Sum form of the RWKV6 recurrence,
/// `wkv_t = Σ_{i≤t} diag(∏_{j=i+1}^{t} w_j) k_iᵀ v_i`, `p_t = r_t·wkv_t`.
pub fn wkv6_parallel<T: Element>(
    w: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    r: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let (t_len, d) = seq_dims(&[w, k, v, r], heads)?;
    let width = heads * d;
    let (wd, kd, vd, rd) = (w.data(), k.data(), v.data(), r.data());
    let mut out = vec![T::zero(); t_len * width];
    let mut wkv = vec![T::zero(); d * d];
    let mut decay = vec![T::one(); d];
    for h in 0..heads {
        for t in 0..t_len {
            wkv.iter_mut().for_each(|x| *x = T::zero());
            for i in 0..=t {
                for c in 0..d {
                    decay[c] = (i + 1..=t).map(|j| wd[j * width + h * d + c]).fold(T::one(), |a, b| a * b);
                }
                for c in 0..d {
                    let kc = decay[c] * kd[i * width + h * d + c];
                    for e in 0..d {
                        wkv[c * d + e] += kc * vd[i * width + h * d + e];
                    }
                }
            }
            for e in 0..d {
                out[t * width + h * d + e] = (0..d).map(|c| rd[t * width + h * d + c] * wkv[c * d + e]).sum();
            }
        }
    }
    Tensor::new(&[t_len, width], out)
}

fn dense_matmul<T: Element>(a: &[T], b: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Dense transition `G = diag(w) − κᵀ(a⊙κ)` of one head.
pub fn rwkv7_transition<T: Element>(w: &[T], kappa: &[T], a: &[T]) -> Vec<T> {
    let d = w.len();
    let mut g = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..d {
            g[i * d + j] = -kappa[i] * a[j] * kappa[j];
        }
        g[i * d + i] += w[i];
    }
    g
}

/// Product form of the RWKV7 recurrence,
/// `wkv_t = Σ_{i≤t} v_iᵀ k̃_i ∏_{j=i+1}^{t} G_j`, `p_t = r_t·wkv_tᵀ`.
pub fn wkv7_parallel<T: Element>(
    w: &Tensor<T>,
    k_tilde: &Tensor<T>,
    kappa: &Tensor<T>,
    a: &Tensor<T>,
    v: &Tensor<T>,
    r: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let (t_len, d) = seq_dims(&[w, k_tilde, kappa, a, v, r], heads)?;
    let width = heads * d;
    let sl = |x: &Tensor<T>, t: usize, h: usize| x.data()[t * width + h * d..t * width + (h + 1) * d].to_vec();
    let mut out = vec![T::zero(); t_len * width];
    for h in 0..heads {
        let gs: Vec<Vec<T>> = (0..t_len).map(|t| rwkv7_transition(&sl(w, t, h), &sl(kappa, t, h), &sl(a, t, h))).collect();
        for t in 0..t_len {
            let mut wkv = vec![T::zero(); d * d];
            // prod = G_{i+1} ⋯ G_t, grown leftwards as i decreases.
            let mut prod: Vec<T> = Tensor::<T>::eye(d).into_data();
            for i in (0..=t).rev() {
                let (vi, ki) = (sl(v, i, h), sl(k_tilde, i, h));
                // (vᵀ k̃ P)[m, j] = v_m Σ_c k̃_c P[c, j]
                let kp: Vec<T> = (0..d).map(|j| (0..d).map(|c| ki[c] * prod[c * d + j]).sum()).collect();
                for m in 0..d {
                    for j in 0..d {
                        wkv[m * d + j] += vi[m] * kp[j];
                    }
                }
                if i > 0 {
                    prod = dense_matmul(&gs[i], &prod, d);
                }
            }
            let rt = sl(r, t, h);
            for m in 0..d {
                out[t * width + h * d + m] = (0..d).map(|j| rt[j] * wkv[m * d + j]).sum();
            }
        }
    }
    Tensor::new(&[t_len, width], out)
}

// ---------------------------------------------------------------------------
// Attention-matrix oracle
// ---------------------------------------------------------------------------

/// Per-token state transitions `G_t` for the oracle.
pub enum Transition<'a, T> {
    /// `G_t = diag(w_t)` (RAD-RWKV6, with `k` the balanced key).
    Diag { w: &'a Tensor<T> },
    /// `G_t = diag(w_t) − κ_tᵀ(a_t ⊙ κ_t)` (RAD-RWKV7, with `k` the replacement key k̃).
    DiagMinusRemoval { w: &'a Tensor<T>, kappa: &'a Tensor<T>, a: &'a Tensor<T> },
}

pub struct OracleResult<T> {
    /// Score matrices `[H, T, T]`, zero above the diagonal.
    pub scores: Tensor<T>,
    /// `p_i = Σ_j A_ij v_j`, `[T, H·d]`.
    pub output: Tensor<T>,
}

/// Materializes `A_ij = k_j (G_{j+1} ⋯ G_i) q_iᵀ` for `j ≤ i` from the state
/// update `S_i = S_{i−1} G_i + v_iᵀ k_i`, then returns `A` and `A·v`.
pub fn attention_matrix_oracle<T: Element>(
    transition: Transition<'_, T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<OracleResult<T>> {
    let (t_len, d) = seq_dims(&[q, k, v], heads)?;
    match &transition {
        Transition::Diag { w } => {
            seq_dims(&[q, w], heads)?;
        }
        Transition::DiagMinusRemoval { w, kappa, a } => {
            seq_dims(&[q, w, kappa, a], heads)?;
        }
    }
    let width = heads * d;
    let sl = |x: &Tensor<T>, t: usize, h: usize| x.data()[t * width + h * d..t * width + (h + 1) * d].to_vec();
    let mut scores = vec![T::zero(); heads * t_len * t_len];
    let mut out = vec![T::zero(); t_len * width];
    for h in 0..heads {
        let g = |t: usize| -> Vec<T> {
            match &transition {
                Transition::Diag { w } => {
                    let wt = sl(w, t, h);
                    let mut m = vec![T::zero(); d * d];
                    for i in 0..d {
                        m[i * d + i] = wt[i];
                    }
                    m
                }
                Transition::DiagMinusRemoval { w, kappa, a } => rwkv7_transition(&sl(w, t, h), &sl(kappa, t, h), &sl(a, t, h)),
            }
        };
        for j in 0..t_len {
            let kj = sl(k, j, h);
            // row = k_j · G_{j+1} ⋯ G_i, extended rightwards as i grows.
            let mut row = kj.clone();
            for i in j..t_len {
                if i > j {
                    let gi = g(i);
                    row = (0..d).map(|c| (0..d).map(|e| row[e] * gi[e * d + c]).sum()).collect();
                }
                let qi = sl(q, i, h);
                let aij: T = row.iter().zip(&qi).map(|(&x, &y)| x * y).sum();
                scores[(h * t_len + i) * t_len + j] = aij;
                let vj = sl(v, j, h);
                for m in 0..d {
                    out[i * width + h * d + m] += aij * vj[m];
                }
            }
        }
    }
    Ok(OracleResult {
        scores: Tensor::new(&[heads, t_len, t_len], scores)?,
        output: Tensor::new(&[t_len, width], out)?,
    })
}
