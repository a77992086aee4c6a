//! RAD-RWKV6: ddlerp token shift, gated-decay linear attention with balanced
//! keys, sigmoid output gate, no bonus.

use rand::Rng;

use super::{add_param, check_state, input_dims, project, projection, spaced_per_head, MixerConfig, MixerState};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::repeat_heads;
use crate::param::{ParamId, ParamRole, ParamStore};
use crate::primitives::{rope_apply, token_shift, Activation, DdlerpParams, DdlerpTarget, LoraAdapter};
use crate::tensor::{Element, Tensor};

/// Initial gate bias: `σ(4) ≈ 0.982`.
pub const GATE_BIAS_INIT: f64 = 4.0;
/// Lower clamp of `−exp(u)` in the decay.
pub const DECAY_LOG_FLOOR: f64 = -5.0;

#[derive(Clone, Copy, Debug)]
pub struct Rwkv6Params {
    pub ddlerp: DdlerpParams,
    pub w_r: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_g: ParamId,
    pub g_bias: ParamId,
    pub w_w: ParamId,
    pub lora_w: LoraAdapter,
    pub w_o: ParamId,
}

/// Decay bias range: `w = exp(−exp(λ))` spans `[e^{-1}, 0.999]` per head.
pub fn decay_bias_range() -> (f64, f64) {
    (0.0, (-(0.999f64).ln()).ln())
}

impl Rwkv6Params {
    pub fn init<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &MixerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let kvw = cfg.layout.kv_width();
        let z = cfg.lora_rank;
        let ts = ParamRole::TokenShift;
        let mu = add_param(store, prefix, "mu_x", Tensor::uniform(&[d], 0.0, 1.0, rng), ts)?;
        let mut adapters = Vec::with_capacity(5);
        for target in DdlerpTarget::ALL {
            adapters.push(LoraAdapter::add(
                store,
                &format!("{prefix}.ddlerp_{}", target.name()),
                projection(d, z, rng),
                Tensor::zeros(&[z, d]),
                Some(Tensor::zeros(&[d])),
                Activation::Tanh,
                ts,
            )?);
        }
        let ddlerp = DdlerpParams { mu, adapters: adapters.try_into().expect("five targets") };
        let other = ParamRole::Other;
        let w_r = add_param(store, prefix, "w_r", projection(d, d, rng), other)?;
        let w_k = add_param(store, prefix, "w_k", projection(d, kvw, rng), other)?;
        let w_v = add_param(store, prefix, "w_v", projection(d, kvw, rng), other)?;
        let w_g = add_param(store, prefix, "w_g", Tensor::zeros(&[d, d]), other)?;
        let g_bias = add_param(store, prefix, "g_bias", Tensor::full(&[d], crate::tensor::lit(GATE_BIAS_INIT)), other)?;
        let w_w = add_param(store, prefix, "w_w", projection(d, d, rng), ParamRole::Decay)?;
        let (lo, hi) = decay_bias_range();
        let lora_w = LoraAdapter::add(
            store,
            &format!("{prefix}.lora_w"),
            projection(d, z, rng),
            Tensor::zeros(&[z, d]),
            Some(spaced_per_head(cfg.layout.n_q, cfg.head_dim(), lo, hi)),
            Activation::Tanh,
            ParamRole::Decay,
        )?;
        let w_o = add_param(store, prefix, "w_o", projection(d, d, rng), other)?;
        Ok(Rwkv6Params { ddlerp, w_r, w_k, w_v, w_g, g_bias, w_w, lora_w, w_o })
    }
}

/// Intermediate per-token quantities of one RAD-RWKV6 forward, all `[B, T, D]`.
pub struct Rwkv6Internals {
    pub r: Var,
    pub k: Var,
    pub v: Var,
    pub w: Var,
    pub g: Var,
}

/// Everything up to the wkv recurrence.
pub fn rad_rwkv6_prepare<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &Rwkv6Params,
    cfg: &MixerConfig,
    x: Var,
    prev_x: Option<&Tensor<T>>,
    pos: usize,
) -> Result<Rwkv6Internals> {
    let hd = cfg.head_dim();
    let xprev = token_shift(tape, x, prev_x)?;
    let [xr, xv, xg, xw, xk] = p.ddlerp.apply_all(tape, store, x, xprev)?;
    let inv_sqrt = 1.0 / (hd as f64).sqrt();

    let r = project(tape, store, xr, p.w_r)?;
    let r = rope_apply(tape, r, &cfg.rope, pos)?;
    let r = tape.scale(r, inv_sqrt);

    let kt = project(tape, store, xk, p.w_k)?;
    let kt = rope_apply(tape, kt, &cfg.rope, pos)?;
    let kt = repeat_heads(tape, kt, cfg.layout.n_kv, cfg.layout.n_rep(), hd)?;
    let v = project(tape, store, xv, p.w_v)?;
    let v = repeat_heads(tape, v, cfg.layout.n_kv, cfg.layout.n_rep(), hd)?;

    let g = project(tape, store, xg, p.w_g)?;
    let gb = tape.param(store, p.g_bias);
    let g = tape.add(g, gb)?;
    let g = tape.sigmoid(g);

    let wt = project(tape, store, xw, p.w_w)?;
    let u = p.lora_w.forward(tape, store, wt)?;
    let e = tape.exp(u);
    let e = tape.neg(e);
    let e = tape.max_scalar(e, DECAY_LOG_FLOOR);
    let w = tape.exp(e);

    let one_minus_w = tape.affine(w, -1.0, 1.0);
    let k = tape.mul(kt, one_minus_w)?;
    let k = tape.scale(k, inv_sqrt);
    Ok(Rwkv6Internals { r, k, v, w, g })
}

/// RAD-RWKV6 over `x: [B, T, D]`. With `state`, decoding continues from it and it is updated.
pub fn rad_rwkv6_forward<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &Rwkv6Params,
    cfg: &MixerConfig,
    x: Var,
    mut state: Option<&mut MixerState<T>>,
) -> Result<Var> {
    let (batch, t) = input_dims(tape, x, cfg)?;
    if let Some(s) = &state {
        check_state(s, cfg, batch)?;
    }
    let pos = state.as_ref().map_or(0, |s| s.pos);
    let prev = state.as_ref().and_then(|s| s.prev_x.clone());
    let it = rad_rwkv6_prepare(tape, store, p, cfg, x, prev.as_ref(), pos)?;
    let pv = super::wkv6_scan(tape, it.r, it.k, it.v, Some(it.w), cfg.layout.n_q, state.as_deref_mut().map(|s| &mut s.wkv))?;
    let gated = tape.mul(it.g, pv)?;
    let out = project(tape, store, gated, p.w_o)?;
    if let Some(s) = state {
        if t > 0 {
            let d = cfg.d_model;
            let xv = tape.value(x).data();
            let last: Vec<T> = (0..batch).flat_map(|b| xv[(b * t + t - 1) * d..(b * t + t) * d].iter().copied()).collect();
            s.prev_x = Some(Tensor::new(&[batch, d], last)?);
        }
        s.pos += t;
    }
    if !tape.value(out).all_finite() {
        return Err(Error::NonFinite(format!("rad_rwkv6 layer {} output", cfg.layer)));
    }
    Ok(out)
}
