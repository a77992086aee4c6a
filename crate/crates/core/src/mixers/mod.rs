//! Sequence mixers: the teacher's softmax attention and its recurrent replacements.

pub mod linatt;
pub mod rwkv6;
pub mod rwkv7;
pub mod softmax;
pub mod wkv;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamGroup, ParamId, ParamRole, ParamStore};
use crate::primitives::{default_rank, HeadLayout, RopeConfig};
use crate::tensor::{Element, Tensor};

pub use linatt::{linatt_forward, LinAttParams};
pub use rwkv6::{rad_rwkv6_forward, Rwkv6Params};
pub use rwkv7::{rad_rwkv7_forward, Rwkv7Params};
pub use softmax::{softmax_mixer_forward, SoftmaxParams};
pub use wkv::{
    attention_matrix_oracle, wkv6_parallel, wkv6_scan, wkv6_step, wkv7_parallel, wkv7_scan, wkv7_step, OracleResult,
    Transition,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Softmax,
    RadRwkv6,
    RadRwkv7,
    #[serde(rename = "linatt")]
    LinAtt,
}

impl MixerKind {
    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Softmax => "softmax",
            MixerKind::RadRwkv6 => "rad_rwkv6",
            MixerKind::RadRwkv7 => "rad_rwkv7",
            MixerKind::LinAtt => "linatt",
        }
    }

    /// Whether the mixer decodes with a fixed-size recurrent state.
    pub fn is_recurrent(self) -> bool {
        !matches!(self, MixerKind::Softmax)
    }

    /// RoPE default per mixer: off for RAD-RWKV6, on otherwise.
    pub fn default_rope(self) -> bool {
        !matches!(self, MixerKind::RadRwkv6)
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "softmax" => MixerKind::Softmax,
            "rad_rwkv6" => MixerKind::RadRwkv6,
            "rad_rwkv7" => MixerKind::RadRwkv7,
            "linatt" => MixerKind::LinAtt,
            _ => return Err(Error::config(format!("unknown mixer kind {s:?}"))),
        })
    }
}

/// Shape information a mixer needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixerConfig {
    pub kind: MixerKind,
    pub d_model: usize,
    pub layout: HeadLayout,
    pub rope: RopeConfig,
    pub lora_rank: usize,
    pub layer: usize,
}

impl MixerConfig {
    pub fn new(kind: MixerKind, d_model: usize, n_q: usize, n_kv: usize, layer: usize) -> Self {
        let head_dim = d_model / n_q.max(1);
        MixerConfig {
            kind,
            d_model,
            layout: HeadLayout { n_q, n_kv, head_dim },
            rope: RopeConfig::new(head_dim, kind.default_rope()),
            lora_rank: default_rank(d_model),
            layer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.layout.q_width() != self.d_model {
            return Err(Error::invalid(format!(
                "d_model {} != n_q_heads {} × head_dim {}",
                self.d_model, self.layout.n_q, self.layout.head_dim
            )));
        }
        if self.rope.head_dim != self.layout.head_dim {
            return Err(Error::invalid("rope head_dim must equal the mixer head_dim"));
        }
        if self.lora_rank == 0 {
            return Err(Error::invalid("lora rank must be at least 1"));
        }
        self.rope.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.layout.head_dim
    }
}

/// Key/value cache of one softmax layer, one buffer pair per sequence (`[len, Hkv·d]`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache<T> {
    pub keys: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
}

/// Per-layer decoding carry.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerState<T> {
    /// `[B, H, d, d]`; empty for softmax layers.
    pub wkv: Tensor<T>,
    /// Previous input row per sequence (`[B, D]`), RAD-RWKV6 only.
    pub prev_x: Option<Tensor<T>>,
    pub kv: Option<KvCache<T>>,
    pub pos: usize,
}

impl<T: Element> MixerState<T> {
    pub fn fresh(cfg: &MixerConfig, batch: usize) -> Self {
        let (h, d) = (cfg.layout.n_q, cfg.layout.head_dim);
        MixerState {
            wkv: if cfg.kind.is_recurrent() { Tensor::zeros(&[batch, h, d, d]) } else { Tensor::zeros(&[0]) },
            prev_x: matches!(cfg.kind, MixerKind::RadRwkv6).then(|| Tensor::zeros(&[batch, cfg.d_model])),
            kv: matches!(cfg.kind, MixerKind::Softmax)
                .then(|| KvCache { keys: vec![Vec::new(); batch], values: vec![Vec::new(); batch] }),
            pos: 0,
        }
    }

    /// Number of scalars held, which stays fixed for recurrent mixers.
    pub fn footprint(&self) -> usize {
        self.wkv.numel()
            + self.prev_x.as_ref().map_or(0, |p| p.numel())
            + self.kv.as_ref().map_or(0, |c| c.keys.iter().chain(&c.values).map(Vec::len).sum())
    }
}

#[derive(Clone, Debug)]
pub enum MixerParams {
    Softmax(SoftmaxParams),
    Rwkv6(Rwkv6Params),
    Rwkv7(Rwkv7Params),
    LinAtt(LinAttParams),
}

/// A mixer bound to parameters in some store.
#[derive(Clone, Debug)]
pub struct Mixer {
    pub cfg: MixerConfig,
    pub params: MixerParams,
}

pub struct MixerOutput {
    pub out: Var,
    /// Layer-0 value precursor, emitted by RAD-RWKV7 layer 0.
    pub v0: Option<Var>,
}

impl Mixer {
    /// Registers a freshly initialized mixer under `prefix` (e.g. `layers.0.mixer`).
    pub fn init<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: MixerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let params = match cfg.kind {
            MixerKind::Softmax => MixerParams::Softmax(SoftmaxParams::init(store, prefix, &cfg, rng)?),
            MixerKind::RadRwkv6 => MixerParams::Rwkv6(Rwkv6Params::init(store, prefix, &cfg, rng)?),
            MixerKind::RadRwkv7 => MixerParams::Rwkv7(Rwkv7Params::init(store, prefix, &cfg, rng)?),
            MixerKind::LinAtt => MixerParams::LinAtt(LinAttParams::init(store, prefix, &cfg, rng)?),
        };
        Ok(Mixer { cfg, params })
    }

    /// `(own projection, teacher projection)` suffixes copied during weight transfer.
    pub fn transfer_map(kind: MixerKind) -> &'static [(&'static str, &'static str)] {
        match kind {
            MixerKind::Softmax | MixerKind::LinAtt => {
                &[("w_q", "w_q"), ("w_k", "w_k"), ("w_v", "w_v"), ("w_o", "w_o")]
            }
            MixerKind::RadRwkv6 | MixerKind::RadRwkv7 => {
                &[("w_r", "w_q"), ("w_k", "w_k"), ("w_v", "w_v"), ("w_o", "w_o")]
            }
        }
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        state: Option<&mut MixerState<T>>,
        v0: Option<Var>,
    ) -> Result<MixerOutput> {
        let cfg = &self.cfg;
        match &self.params {
            MixerParams::Softmax(p) => Ok(MixerOutput { out: softmax_mixer_forward(tape, store, p, cfg, x, state)?, v0: None }),
            MixerParams::Rwkv6(p) => Ok(MixerOutput { out: rad_rwkv6_forward(tape, store, p, cfg, x, state)?, v0: None }),
            MixerParams::Rwkv7(p) => {
                let (out, v0) = rad_rwkv7_forward(tape, store, p, cfg, x, state, v0)?;
                Ok(MixerOutput { out, v0 })
            }
            MixerParams::LinAtt(p) => Ok(MixerOutput { out: linatt_forward(tape, store, p, cfg, x, state)?, v0: None }),
        }
    }
}

// ---------------------------------------------------------------------------
// Helpers shared by the mixer implementations
// ---------------------------------------------------------------------------

pub(crate) fn add_param<T: Element>(
    store: &mut ParamStore<T>,
    prefix: &str,
    name: &str,
    value: Tensor<T>,
    role: ParamRole,
) -> Result<ParamId> {
    store.add(format!("{prefix}.{name}"), value, ParamGroup::Att, role)
}

/// Fan-in scaled normal init for a `[rows, cols]` projection.
pub(crate) fn projection<T: Element, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

pub(crate) fn project<T: Element>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, w: ParamId) -> Result<Var> {
    let wv = tape.param(store, w);
    tape.matmul(x, wv)
}

/// `(batch, seq_len)` of a `[B, T, D]` input, checked against `d_model`.
pub(crate) fn input_dims<T: Element>(tape: &Tape<T>, x: Var, cfg: &MixerConfig) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != cfg.d_model {
        return Err(Error::invalid(format!("mixer input must be [B, T, {}], got {s:?}", cfg.d_model)));
    }
    Ok((s[0], s[1]))
}

pub(crate) fn check_state<T: Element>(state: &MixerState<T>, cfg: &MixerConfig, batch: usize) -> Result<()> {
    let want = MixerState::<T>::fresh(cfg, batch);
    if state.wkv.shape() != want.wkv.shape()
        || state.prev_x.as_ref().map(|p| p.shape().to_vec()) != want.prev_x.as_ref().map(|p| p.shape().to_vec())
        || state.kv.as_ref().map(|c| c.keys.len()) != want.kv.as_ref().map(|c| c.keys.len())
    {
        return Err(Error::invalid(format!(
            "mixer state does not match layer {} ({}) with batch {batch}",
            cfg.layer, cfg.kind
        )));
    }
    Ok(())
}

/// Per-channel values spaced linearly from `lo` to `hi` within every head.
pub(crate) fn spaced_per_head<T: Element>(heads: usize, d: usize, lo: f64, hi: f64) -> Tensor<T> {
    let row: Vec<f64> = (0..d)
        .map(|c| if d == 1 { lo } else { lo + (hi - lo) * c as f64 / (d - 1) as f64 })
        .collect();
    let all: Vec<f64> = (0..heads).flat_map(|_| row.iter().copied()).collect();
    Tensor::from_f64(&[heads * d], &all).expect("sized")
}

#[cfg(test)]
mod tests;
