//! Baseline linear attention: causal `(q·kᵀ ⊙ M)·v` with no feature map,
//! followed by per-head LayerNorm. `M` is the causal lower-triangular mask.

use rand::Rng;

use super::{add_param, check_state, input_dims, project, projection, MixerConfig, MixerState};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::ops::{layer_norm_heads, repeat_heads};
use crate::param::{ParamId, ParamRole, ParamStore};
use crate::primitives::rope_apply;
use crate::tensor::{Element, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LinAttParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl LinAttParams {
    pub fn init<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &MixerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let kvw = cfg.layout.kv_width();
        let o = ParamRole::Other;
        Ok(LinAttParams {
            w_q: add_param(store, prefix, "w_q", projection(d, d, rng), o)?,
            w_k: add_param(store, prefix, "w_k", projection(d, kvw, rng), o)?,
            w_v: add_param(store, prefix, "w_v", projection(d, kvw, rng), o)?,
            w_o: add_param(store, prefix, "w_o", projection(d, d, rng), o)?,
            ln_gamma: add_param(store, prefix, "ln_gamma", Tensor::ones(&[d]), o)?,
            ln_beta: add_param(store, prefix, "ln_beta", Tensor::zeros(&[d]), o)?,
        })
    }
}

/// Projected, rotated and head-repeated `(q, k, v)`, all `[B, T, D]`.
pub fn linatt_qkv<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &LinAttParams,
    cfg: &MixerConfig,
    x: Var,
    pos: usize,
) -> Result<(Var, Var, Var)> {
    let hd = cfg.head_dim();
    let (n_kv, rep) = (cfg.layout.n_kv, cfg.layout.n_rep());
    let q = project(tape, store, x, p.w_q)?;
    let q = rope_apply(tape, q, &cfg.rope, pos)?;
    let k = project(tape, store, x, p.w_k)?;
    let k = rope_apply(tape, k, &cfg.rope, pos)?;
    let k = repeat_heads(tape, k, n_kv, rep, hd)?;
    let v = project(tape, store, x, p.w_v)?;
    let v = repeat_heads(tape, v, n_kv, rep, hd)?;
    Ok((q, k, v))
}

pub fn linatt_forward<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &LinAttParams,
    cfg: &MixerConfig,
    x: Var,
    mut state: Option<&mut MixerState<T>>,
) -> Result<Var> {
    let (batch, t) = input_dims(tape, x, cfg)?;
    if let Some(s) = &state {
        check_state(s, cfg, batch)?;
    }
    let pos = state.as_ref().map_or(0, |s| s.pos);
    let (q, k, v) = linatt_qkv(tape, store, p, cfg, x, pos)?;
    let pv = super::wkv6_scan(tape, q, k, v, None, cfg.layout.n_q, state.as_deref_mut().map(|s| &mut s.wkv))?;
    let gamma = tape.param(store, p.ln_gamma);
    let beta = tape.param(store, p.ln_beta);
    let normed = layer_norm_heads(tape, pv, gamma, beta, cfg.head_dim(), LN_EPS)?;
    let out = project(tape, store, normed, p.w_o)?;
    if let Some(s) = state {
        s.pos += t;
    }
    Ok(out)
}

/// Masked-matrix form `LayerNorm_head((q·kᵀ ⊙ M)·v)` for one `[T, H·d]` sequence, before `W_o`.
pub fn linatt_parallel<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let (t_len, width) = (q.shape()[0], q.last_dim());
    let d = width / heads;
    let mut raw = vec![T::zero(); t_len * width];
    for h in 0..heads {
        for i in 0..t_len {
            for j in 0..=i {
                let s: T = (0..d).map(|c| q.data()[i * width + h * d + c] * k.data()[j * width + h * d + c]).sum();
                for c in 0..d {
                    raw[i * width + h * d + c] += s * v.data()[j * width + h * d + c];
                }
            }
        }
    }
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::new(&[t_len, width], raw)?);
    let g = tape.constant(gamma.clone());
    let b = tape.constant(beta.clone());
    let y = layer_norm_heads(&mut tape, x, g, b, d, LN_EPS)?;
    Ok(tape.take_value(y))
}
