//! Decoder-only models: the softmax teacher, recurrent students, and the
//! step-1 alignment model that runs both side by side.

mod alignment;
mod transfer;

pub use alignment::{AlignmentModel, AlignmentOutput, LayerAlignment};
pub use transfer::{build_student, transfer_attention_weights, TransferMode};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mixers::{Mixer, MixerConfig, MixerKind, MixerState};
use crate::ops::{embedding, rms_norm};
use crate::param::{ParamGroup, ParamId, ParamRole, ParamStore};
use crate::primitives::RopeConfig;
use crate::tensor::{Element, Tensor};

pub const NORM_EPS: f64 = 1e-6;

/// Architecture of a teacher or student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub mlp_hidden: usize,
    pub mixer_kind: MixerKind,
    /// `None` picks the mixer's default (off for RAD-RWKV6, on otherwise).
    pub rope: Option<bool>,
    pub rope_base: f64,
    pub lora_rank: usize,
    pub tied_embeddings: bool,
}

impl ModelSpec {
    /// The toy teacher used throughout: 4 layers, D = 128, 4 query / 2 kv heads, byte vocabulary.
    pub fn toy_teacher() -> Self {
        ModelSpec {
            n_layers: 4,
            d_model: 128,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_head: 32,
            vocab_size: 256,
            mlp_hidden: 384,
            mixer_kind: MixerKind::Softmax,
            rope: None,
            rope_base: 10000.0,
            lora_rank: crate::primitives::default_rank(128),
            tied_embeddings: false,
        }
    }

    pub fn with_mixer(&self, kind: MixerKind) -> Self {
        ModelSpec { mixer_kind: kind, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tied_embeddings {
            return Err(Error::config("tied embeddings are not supported; the lm head must be untied"));
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.mlp_hidden == 0 {
            return Err(Error::config("n_layers, vocab_size and mlp_hidden must be positive"));
        }
        if self.d_model != self.n_q_heads * self.d_head {
            return Err(Error::config(format!(
                "d_model {} != n_q_heads {} × d_head {}",
                self.d_model, self.n_q_heads, self.d_head
            )));
        }
        if self.n_kv_heads == 0 || self.n_q_heads % self.n_kv_heads != 0 {
            return Err(Error::config(format!(
                "n_q_heads {} not divisible by n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        for layer in 0..self.n_layers {
            self.mixer_config(layer).validate().map_err(|e| Error::config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn rope_config(&self) -> RopeConfig {
        RopeConfig {
            head_dim: self.d_head,
            base: self.rope_base,
            enabled: self.rope.unwrap_or(self.mixer_kind.default_rope()),
        }
    }

    pub fn mixer_config(&self, layer: usize) -> MixerConfig {
        let mut cfg = MixerConfig::new(self.mixer_kind, self.d_model, self.n_q_heads, self.n_kv_heads, layer);
        cfg.rope = self.rope_config();
        cfg.lora_rank = self.lora_rank;
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub attn_norm: ParamId,
    pub mixer: Mixer,
    pub mlp_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

/// A model is its spec plus a parameter store; layer handles index into the store.
#[derive(Clone, Debug)]
pub struct Model<T: Element> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    pub embed: ParamId,
    pub layers: Vec<Layer>,
    pub final_norm: ParamId,
    pub lm_head: ParamId,
}

/// Per-layer decoding carry.
#[derive(Clone, Debug)]
pub struct DecodeState<T> {
    pub layers: Vec<MixerState<T>>,
    pub batch: usize,
}

impl<T: Element> DecodeState<T> {
    pub fn pos(&self) -> usize {
        self.layers.first().map_or(0, |l| l.pos)
    }

    /// Total scalars held across layers.
    pub fn footprint(&self) -> usize {
        self.layers.iter().map(|l| l.footprint()).sum()
    }
}

/// Hidden quantities recorded at one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerTap {
    /// Normalized input fed to the sequence mixer.
    pub mixer_in: Var,
    /// Sequence-mixer output (after its output projection).
    pub mixer_out: Var,
}

pub struct ForwardOutput {
    /// `[B, T, vocab]`.
    pub logits: Var,
    pub taps: Vec<LayerTap>,
}

impl<T: Element> Model<T> {
    /// Builds a model with fresh parameters from `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, hidden, v) = (spec.d_model, spec.mlp_hidden, spec.vocab_size);
        let main = |s: &mut ParamStore<T>, name: String, value: Tensor<T>| {
            s.add(name, value, ParamGroup::Main, ParamRole::Other)
        };
        let out_scale = 1.0 / (2.0 * spec.n_layers as f64).sqrt();
        let embed = main(&mut store, "embed".into(), Tensor::randn(&[v, d], 1.0, &mut rng))?;
        let mut layers = Vec::with_capacity(spec.n_layers);
        for i in 0..spec.n_layers {
            let p = format!("layers.{i}");
            let attn_norm = main(&mut store, format!("{p}.attn_norm"), Tensor::ones(&[d]))?;
            let mixer = Mixer::init(&mut store, &format!("{p}.mixer"), spec.mixer_config(i), &mut rng)?;
            if let Some(id) = store.id(&format!("{p}.mixer.w_o")) {
                let scaled = store.value(id).map(|x| x * crate::tensor::lit(out_scale));
                store.get_mut(id).value = scaled;
            }
            let mlp_norm = main(&mut store, format!("{p}.mlp_norm"), Tensor::ones(&[d]))?;
            let std_in = 1.0 / (d as f64).sqrt();
            let w_gate = main(&mut store, format!("{p}.mlp.w_gate"), Tensor::randn(&[d, hidden], std_in, &mut rng))?;
            let w_up = main(&mut store, format!("{p}.mlp.w_up"), Tensor::randn(&[d, hidden], std_in, &mut rng))?;
            let std_down = out_scale / (hidden as f64).sqrt();
            let w_down = main(&mut store, format!("{p}.mlp.w_down"), Tensor::randn(&[hidden, d], std_down, &mut rng))?;
            layers.push(Layer { attn_norm, mixer, mlp_norm, w_gate, w_up, w_down });
        }
        let final_norm = main(&mut store, "final_norm".into(), Tensor::ones(&[d]))?;
        let lm_head = main(&mut store, "lm_head".into(), Tensor::randn(&[d, v], 0.5 / (d as f64).sqrt(), &mut rng))?;
        Ok(Model { spec, store, embed, layers, final_norm, lm_head })
    }

    pub fn fresh_state(&self, batch: usize) -> DecodeState<T> {
        DecodeState {
            layers: self.layers.iter().map(|l| MixerState::fresh(&l.mixer.cfg, batch)).collect(),
            batch,
        }
    }

    /// Parameters belonging to the sequence mixers.
    pub fn is_mixer_param(name: &str) -> bool {
        name.contains(".mixer.")
    }

    pub(crate) fn embed_tokens(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ids: &[u32], batch: usize) -> Result<Var> {
        if batch == 0 || ids.len() % batch != 0 {
            return Err(Error::invalid(format!("{} token ids do not split into {batch} sequences", ids.len())));
        }
        let table = tape.param(store, self.embed);
        embedding(tape, table, ids, &[batch, ids.len() / batch])
    }

    pub(crate) fn mlp_block(&self, tape: &mut Tape<T>, s: &ParamStore<T>, layer: &Layer, h: Var) -> Result<Var> {
        let nw = tape.param(s, layer.mlp_norm);
        let n = rms_norm(tape, h, nw, NORM_EPS)?;
        let wg = tape.param(s, layer.w_gate);
        let wu = tape.param(s, layer.w_up);
        let wd = tape.param(s, layer.w_down);
        let gate = tape.matmul(n, wg)?;
        let gate = tape.silu(gate);
        let up = tape.matmul(n, wu)?;
        let hid = tape.mul(gate, up)?;
        let out = tape.matmul(hid, wd)?;
        tape.add(h, out)
    }

    pub(crate) fn head(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let nw = tape.param(store, self.final_norm);
        let n = rms_norm(tape, h, nw, NORM_EPS)?;
        let w = tape.param(store, self.lm_head);
        tape.matmul(n, w)
    }

    /// Logits for `batch` sequences laid out contiguously in `ids`. With `state`,
    /// decoding continues from it (positions offset by what it has seen).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        ids: &[u32],
        batch: usize,
        state: Option<&mut DecodeState<T>>,
        want_taps: bool,
    ) -> Result<ForwardOutput> {
        self.forward_in(&self.store, tape, ids, batch, state, want_taps)
    }

    /// As [`Model::forward`], reading parameters from `store` (which must share this model's layout).
    pub fn forward_in(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        ids: &[u32],
        batch: usize,
        mut state: Option<&mut DecodeState<T>>,
        want_taps: bool,
    ) -> Result<ForwardOutput> {
        if let Some(s) = &state {
            if s.batch != batch || s.layers.len() != self.layers.len() {
                return Err(Error::invalid("decode state does not match the model or batch"));
            }
        }
        let mut h = self.embed_tokens(tape, store, ids, batch)?;
        let mut taps = Vec::new();
        let mut v0 = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let nw = tape.param(store, layer.attn_norm);
            let n = rms_norm(tape, h, nw, NORM_EPS)?;
            let ls = state.as_deref_mut().map(|s| &mut s.layers[i]);
            let out = layer.mixer.forward(tape, store, n, ls, v0)?;
            if i == 0 {
                v0 = out.v0;
            }
            if want_taps {
                taps.push(LayerTap { mixer_in: n, mixer_out: out.out });
            }
            h = tape.add(h, out.out)?;
            h = self.mlp_block(tape, store, layer, h)?;
        }
        let logits = self.head(tape, store, h)?;
        Ok(ForwardOutput { logits, taps })
    }

    /// Inference-only logits `[B, T, vocab]`.
    pub fn logits(&self, ids: &[u32], batch: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, ids, batch, None, false)?;
        Ok(tape.take_value(out.logits))
    }

    /// Feeds one chunk through a decode state; returns its logits.
    pub fn decode(&self, ids: &[u32], state: &mut DecodeState<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let batch = state.batch;
        let out = self.forward(&mut tape, ids, batch, Some(state), false)?;
        Ok(tape.take_value(out.logits))
    }

    /// Parameter count split into `(mixer, other)`.
    pub fn param_counts(&self) -> (usize, usize) {
        self.store.iter().fold((0, 0), |(m, o), p| {
            if Self::is_mixer_param(&p.name) {
                (m + p.value.numel(), o)
            } else {
                (m, o + p.value.numel())
            }
        })
    }
}

/// Softmax teacher with fresh parameters.
pub fn build_teacher<T: Element>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    if spec.mixer_kind != MixerKind::Softmax {
        return Err(Error::config(format!("teacher must use softmax attention, got {}", spec.mixer_kind)));
    }
    Model::init(spec.clone(), seed)
}

/// Logits and optional per-layer taps of one inference pass.
pub fn model_forward<T: Element>(
    model: &Model<T>,
    ids: &[u32],
    batch: usize,
    want_taps: bool,
) -> Result<(Tensor<T>, Vec<(Tensor<T>, Tensor<T>)>)> {
    let mut tape = Tape::inference();
    let out = model.forward(&mut tape, ids, batch, None, want_taps)?;
    let taps = out.taps.iter().map(|t| (tape.take_value(t.mixer_in), tape.take_value(t.mixer_out))).collect();
    Ok((tape.take_value(out.logits), taps))
}

#[cfg(test)]
mod tests;
