//! The teacher's grouped-query softmax attention block.

use rand::Rng;

use super::{add_param, check_state, input_dims, project, projection, MixerConfig, MixerState};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamRole, ParamStore};
use crate::primitives::{rope_apply, softmax_attention_cached, softmax_attention_gqa};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct SoftmaxParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl SoftmaxParams {
    pub fn init<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &MixerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let kvw = cfg.layout.kv_width();
        let o = ParamRole::Other;
        Ok(SoftmaxParams {
            w_q: add_param(store, prefix, "w_q", projection(d, d, rng), o)?,
            w_k: add_param(store, prefix, "w_k", projection(d, kvw, rng), o)?,
            w_v: add_param(store, prefix, "w_v", projection(d, kvw, rng), o)?,
            w_o: add_param(store, prefix, "w_o", projection(d, d, rng), o)?,
        })
    }
}

/// Causal softmax attention over `x: [B, T, D]`. With `state` the keys and
/// values are appended to its cache and queries attend over the whole cache;
/// that path is inference-only.
pub fn softmax_mixer_forward<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &SoftmaxParams,
    cfg: &MixerConfig,
    x: Var,
    state: Option<&mut MixerState<T>>,
) -> Result<Var> {
    let (batch, t) = input_dims(tape, x, cfg)?;
    let pos = state.as_ref().map_or(0, |s| s.pos);
    let q = project(tape, store, x, p.w_q)?;
    let q = rope_apply(tape, q, &cfg.rope, pos)?;
    let k = project(tape, store, x, p.w_k)?;
    let k = rope_apply(tape, k, &cfg.rope, pos)?;
    let v = project(tape, store, x, p.w_v)?;
    let att = match state {
        None => softmax_attention_gqa(tape, q, k, v, cfg.layout, true)?,
        Some(s) => {
            check_state(s, cfg, batch)?;
            if tape.needs_grad(&[q, k, v]) {
                return Err(Error::invalid("cached softmax attention is inference-only"));
            }
            let cache = s.kv.as_mut().expect("checked");
            let (qw, kw) = (cfg.layout.q_width(), cfg.layout.kv_width());
            let (qd, kd, vd) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
            let mut out = vec![T::zero(); batch * t * qw];
            let mut scores = Vec::new();
            for b in 0..batch {
                for i in 0..t {
                    let row = b * t + i;
                    cache.keys[b].extend_from_slice(&kd[row * kw..(row + 1) * kw]);
                    cache.values[b].extend_from_slice(&vd[row * kw..(row + 1) * kw]);
                    let len = cache.keys[b].len() / kw;
                    softmax_attention_cached(
                        &qd[row * qw..(row + 1) * qw],
                        &cache.keys[b],
                        &cache.values[b],
                        len,
                        cfg.layout,
                        &mut scores,
                        &mut out[row * qw..(row + 1) * qw],
                    );
                }
            }
            s.pos += t;
            tape.constant(Tensor::new(&[batch, t, qw], out)?)
        }
    };
    project(tape, store, att, p.w_o)
}
