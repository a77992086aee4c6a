//! RAD-RWKV7: delta-rule state with in-context learning rate, normalized
//! removal key, balanced replacement key, value residual, no token shift.

use rand::Rng;

use super::{add_param, check_state, input_dims, project, projection, spaced_per_head, MixerConfig, MixerState};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{normalize_heads, repeat_heads};
use crate::param::{ParamId, ParamRole, ParamStore};
use crate::primitives::{rope_apply, Activation, LoraAdapter};
use crate::tensor::{lit, Element, Tensor};

/// Initial value-residual gate bias: `σ(4) ≈ 0.982`, nearly the layer's own value.
pub const NU_BIAS_INIT: f64 = 4.0;
/// Decay precursor bias range; `w = exp(−e^{−0.5} σ(d))` then spans about `[0.56, 0.999]`.
pub const DECAY_BIAS_RANGE: (f64, f64) = (3.0, -6.4);

/// `e^{−0.5}`.
pub fn decay_scale() -> f64 {
    (-0.5f64).exp()
}

#[derive(Clone, Copy, Debug)]
pub struct Rwkv7Params {
    pub w_r: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub lora_a: LoraAdapter,
    pub lora_d: LoraAdapter,
    /// Absent on layer 0, which has no value residual.
    pub lora_nu: Option<LoraAdapter>,
    pub lora_g: LoraAdapter,
}

impl Rwkv7Params {
    pub fn init<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &MixerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let kvw = cfg.layout.kv_width();
        let z = cfg.lora_rank;
        let other = ParamRole::Other;
        let w_r = add_param(store, prefix, "w_r", projection(d, d, rng), other)?;
        let w_k = add_param(store, prefix, "w_k", projection(d, kvw, rng), other)?;
        let w_v = add_param(store, prefix, "w_v", projection(d, kvw, rng), other)?;
        let lora_a = LoraAdapter::add(
            store,
            &format!("{prefix}.lora_a"),
            projection(d, z, rng),
            Tensor::zeros(&[z, d]),
            Some(Tensor::zeros(&[d])),
            Activation::Identity,
            other,
        )?;
        let (lo, hi) = DECAY_BIAS_RANGE;
        let lora_d = LoraAdapter::add(
            store,
            &format!("{prefix}.lora_d"),
            projection(d, z, rng),
            Tensor::zeros(&[z, d]),
            Some(spaced_per_head(cfg.layout.n_q, cfg.head_dim(), lo, hi)),
            Activation::Tanh,
            ParamRole::Decay,
        )?;
        let lora_nu = if cfg.layer == 0 {
            None
        } else {
            Some(LoraAdapter::add(
                store,
                &format!("{prefix}.lora_nu"),
                projection(d, z, rng),
                Tensor::zeros(&[z, d]),
                Some(Tensor::full(&[d], lit(NU_BIAS_INIT))),
                Activation::Identity,
                other,
            )?)
        };
        // σ(x·A_g) ≈ 1/2 for small A_g, so B_g = 2/z gives g ≈ 1.
        let lora_g = LoraAdapter::add(
            store,
            &format!("{prefix}.lora_g"),
            Tensor::randn(&[d, z], 0.1 / (d as f64).sqrt(), rng),
            Tensor::full(&[z, d], lit(2.0 / z as f64)),
            None,
            Activation::Sigmoid,
            other,
        )?;
        let w_o = add_param(store, prefix, "w_o", projection(d, d, rng), other)?;
        Ok(Rwkv7Params { w_r, w_k, w_v, w_o, lora_a, lora_d, lora_nu, lora_g })
    }
}

/// Intermediate per-token quantities of one RAD-RWKV7 forward, all `[B, T, D]`.
pub struct Rwkv7Internals {
    pub r: Var,
    pub w: Var,
    pub k: Var,
    pub k_tilde: Var,
    pub kappa: Var,
    pub a: Var,
    pub v: Var,
    pub v_layer: Var,
    pub g: Var,
}

/// Everything up to the wkv recurrence.
pub fn rad_rwkv7_prepare<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &Rwkv7Params,
    cfg: &MixerConfig,
    x: Var,
    v0: Option<Var>,
    pos: usize,
) -> Result<Rwkv7Internals> {
    let hd = cfg.head_dim();
    let (n_kv, rep) = (cfg.layout.n_kv, cfg.layout.n_rep());

    let r = project(tape, store, x, p.w_r)?;
    let r = rope_apply(tape, r, &cfg.rope, pos)?;
    let r = tape.scale(r, 1.0 / (hd as f64).sqrt());

    let k = project(tape, store, x, p.w_k)?;
    let k = rope_apply(tape, k, &cfg.rope, pos)?;
    let k = repeat_heads(tape, k, n_kv, rep, hd)?;

    let a = p.lora_a.forward(tape, store, x)?;
    let a = tape.sigmoid(a);

    let dd = p.lora_d.forward(tape, store, x)?;
    let sd = tape.sigmoid(dd);
    let lw = tape.scale(sd, -decay_scale());
    let w = tape.exp(lw);

    let a_minus_w = tape.sub(a, w)?;
    let factor = tape.affine(a_minus_w, 1.0, 1.0);
    let k_tilde = tape.mul(k, factor)?;
    let kappa = normalize_heads(tape, k, hd)?;

    let v_layer = project(tape, store, x, p.w_v)?;
    let v_layer = repeat_heads(tape, v_layer, n_kv, rep, hd)?;
    let v = match (cfg.layer, p.lora_nu, v0) {
        (0, _, _) => v_layer,
        (_, Some(nu), Some(v0)) => {
            let nu = nu.forward(tape, store, x)?;
            let nu = tape.sigmoid(nu);
            tape.lerp(v0, v_layer, nu)?
        }
        (l, None, _) => return Err(Error::invalid(format!("rad_rwkv7 layer {l} has no value-residual gate"))),
        (l, _, None) => return Err(Error::invalid(format!("rad_rwkv7 layer {l} needs the layer-0 value precursor"))),
    };
    let g = p.lora_g.forward(tape, store, x)?;
    Ok(Rwkv7Internals { r, w, k, k_tilde, kappa, a, v, v_layer, g })
}

/// RAD-RWKV7 over `x: [B, T, D]`. Layer 0 returns its value precursor for the
/// later layers; layers ≥ 1 require it as `v0`.
pub fn rad_rwkv7_forward<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &Rwkv7Params,
    cfg: &MixerConfig,
    x: Var,
    mut state: Option<&mut MixerState<T>>,
    v0: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    let (batch, t) = input_dims(tape, x, cfg)?;
    if let Some(s) = &state {
        check_state(s, cfg, batch)?;
    }
    let pos = state.as_ref().map_or(0, |s| s.pos);
    let it = rad_rwkv7_prepare(tape, store, p, cfg, x, v0, pos)?;
    let pv = super::wkv7_scan(
        tape,
        it.r,
        it.w,
        it.k_tilde,
        it.kappa,
        it.a,
        it.v,
        cfg.layout.n_q,
        state.as_deref_mut().map(|s| &mut s.wkv),
    )?;
    let gated = tape.mul(it.g, pv)?;
    let out = project(tape, store, gated, p.w_o)?;
    if let Some(s) = state {
        s.pos += t;
    }
    if !tape.value(out).all_finite() {
        return Err(Error::NonFinite(format!("rad_rwkv7 layer {} output", cfg.layer)));
    }
    Ok((out, (cfg.layer == 0).then_some(it.v_layer)))
}
