//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a default
//! (see [`RunConfig::describe`]); unknown keys are an error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mixers::MixerKind;
use crate::model::ModelSpec;
use crate::tensor::DType;
use crate::train::{LayerReduce, StepKind, TrainPlan};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Teacher architecture; students copy it with their own mixer.
    pub model: ModelSpec,
    pub student_mixer: MixerKind,
    /// `None` uses the mixer's default.
    pub student_rope: Option<bool>,
    pub corpus: PathBuf,
    /// Vocabulary file; byte-level when absent.
    pub vocab: Option<PathBuf>,
    pub heldout_frac: f64,
    pub eval_seq_len: usize,
    pub eval_windows: usize,
    pub eval_batch: usize,
    pub seed: u64,
    pub dtype: DType,
    pub bench_prompt_len: usize,
    pub bench_gen_len: usize,
    pub plans: BTreeMap<String, TrainPlan>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let plans = [StepKind::Pretrain]
            .into_iter()
            .chain(StepKind::CONVERSION)
            .map(|s| (s.name().to_string(), TrainPlan::desk(s)))
            .collect();
        RunConfig {
            model: ModelSpec::toy_teacher(),
            student_mixer: MixerKind::RadRwkv7,
            student_rope: None,
            corpus: PathBuf::from("data/shakespeare.txt"),
            vocab: None,
            heldout_frac: 0.1,
            eval_seq_len: 128,
            eval_windows: 32,
            eval_batch: 8,
            seed: 0,
            dtype: DType::F32,
            bench_prompt_len: 8,
            bench_gen_len: 2048,
            plans,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value.parse().map_err(|e| Error::config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key} = {value:?}: expected true/false"))),
    }
}

pub fn parse_dtype(value: &str) -> Result<DType> {
    match value {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(Error::config(format!("unknown dtype {value:?} (f32 or f64)"))),
    }
}

/// `auto`, `on` or `off`.
pub fn parse_rope(value: &str) -> Result<Option<bool>> {
    match value {
        "auto" => Ok(None),
        "on" | "true" => Ok(Some(true)),
        "off" | "false" => Ok(Some(false)),
        _ => Err(Error::config(format!("unknown rope setting {value:?} (auto, on, off)"))),
    }
}

const PLAN_FIELDS: [(&str, &str); 12] = [
    ("tokens", "token budget"),
    ("seq_len", "training window length"),
    ("batch_size", "windows per batch"),
    ("lr_main", "learning rate of non-mixer parameters"),
    ("lr_att", "learning rate of sequence-mixer parameters"),
    ("lr_final", "final learning rate of decaying schedules"),
    ("schedule", "cosine, flat or s_cos_s"),
    ("report_every", "tokens between report records"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam epsilon"),
    ("hidden_loss", "step-1 objective, l2 or mse"),
];

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dtype" => self.dtype = parse_dtype(v)?,
            "model.n_layers" => m.n_layers = parse(key, v)?,
            "model.d_model" => m.d_model = parse(key, v)?,
            "model.n_q_heads" => m.n_q_heads = parse(key, v)?,
            "model.n_kv_heads" => m.n_kv_heads = parse(key, v)?,
            "model.d_head" => m.d_head = parse(key, v)?,
            "model.vocab_size" => m.vocab_size = parse(key, v)?,
            "model.mlp_hidden" => m.mlp_hidden = parse(key, v)?,
            "model.rope_base" => m.rope_base = parse(key, v)?,
            "model.lora_rank" => m.lora_rank = parse(key, v)?,
            "model.tied_embeddings" => m.tied_embeddings = parse_bool(key, v)?,
            "student.mixer" => self.student_mixer = parse(key, v)?,
            "student.rope" => self.student_rope = parse_rope(v)?,
            "data.corpus" => self.corpus = PathBuf::from(v),
            "data.vocab" => self.vocab = if v == "bytes" { None } else { Some(PathBuf::from(v)) },
            "data.heldout_frac" => self.heldout_frac = parse(key, v)?,
            "eval.seq_len" => self.eval_seq_len = parse(key, v)?,
            "eval.windows" => self.eval_windows = parse(key, v)?,
            "eval.batch" => self.eval_batch = parse(key, v)?,
            "bench.prompt_len" => self.bench_prompt_len = parse(key, v)?,
            "bench.gen_len" => self.bench_gen_len = parse(key, v)?,
            _ => return self.set_plan(key, v),
        }
        Ok(())
    }

    fn set_plan(&mut self, key: &str, v: &str) -> Result<()> {
        let unknown = || Error::config(format!("unknown key {key:?}"));
        let (step, field) = key.split_once('.').ok_or_else(unknown)?;
        let plan = self.plans.get_mut(step).ok_or_else(unknown)?;
        match field {
            "tokens" => plan.token_budget = parse(key, v)?,
            "seq_len" => plan.seq_len = parse(key, v)?,
            "batch_size" => plan.batch_size = parse(key, v)?,
            "lr_main" => plan.lr_main = parse(key, v)?,
            "lr_att" => plan.lr_att = parse(key, v)?,
            "lr_final" => plan.lr_final = parse(key, v)?,
            "schedule" => plan.schedule = parse(key, v)?,
            "report_every" => plan.report_every = parse(key, v)?,
            "adam_beta1" => plan.adam.beta1 = parse(key, v)?,
            "adam_beta2" => plan.adam.beta2 = parse(key, v)?,
            "adam_eps" => plan.adam.eps = parse(key, v)?,
            "hidden_loss" if step == "step1" => plan.hidden_loss = parse(key, v)?,
            "layer_reduce" if step == "step1" => {
                plan.layer_reduce = match v {
                    "sum" => LayerReduce::Sum,
                    "mean" => LayerReduce::Mean,
                    _ => return Err(Error::config(format!("{key} = {v:?}: expected sum or mean"))),
                }
            }
            _ => return Err(unknown()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.student_spec().validate()?;
        if self.student_mixer == MixerKind::Softmax {
            return Err(Error::config("student.mixer must be a recurrent mixer (rad_rwkv6, rad_rwkv7, linatt)"));
        }
        if !(0.0..1.0).contains(&self.heldout_frac) || self.heldout_frac == 0.0 {
            return Err(Error::config("data.heldout_frac must lie in (0, 1)"));
        }
        if self.eval_seq_len == 0 || self.eval_windows == 0 || self.eval_batch == 0 {
            return Err(Error::config("eval.seq_len, eval.windows and eval.batch must be positive"));
        }
        if self.bench_prompt_len == 0 {
            return Err(Error::config("bench.prompt_len must be positive"));
        }
        for plan in self.plans.values() {
            plan.validate()?;
        }
        Ok(())
    }

    pub fn student_spec(&self) -> ModelSpec {
        ModelSpec { mixer_kind: self.student_mixer, rope: self.student_rope, ..self.model.clone() }
    }

    pub fn plan(&self, step: StepKind) -> &TrainPlan {
        &self.plans[step.name()]
    }

    /// Every key with its default value and meaning.
    pub fn describe() -> Vec<(String, String, String)> {
        let d = RunConfig::default();
        let m = &d.model;
        let mut out: Vec<(String, String, String)> = [
            ("seed", d.seed.to_string(), "base seed; each step derives its own stream from it"),
            ("dtype", "f32".into(), "f32 or f64"),
            ("model.n_layers", m.n_layers.to_string(), "decoder layers"),
            ("model.d_model", m.d_model.to_string(), "model width"),
            ("model.n_q_heads", m.n_q_heads.to_string(), "query heads"),
            ("model.n_kv_heads", m.n_kv_heads.to_string(), "key/value heads (grouped-query attention)"),
            ("model.d_head", m.d_head.to_string(), "head width"),
            ("model.vocab_size", m.vocab_size.to_string(), "vocabulary size; must match the tokenizer"),
            ("model.mlp_hidden", m.mlp_hidden.to_string(), "gated MLP hidden width"),
            ("model.rope_base", m.rope_base.to_string(), "rotary embedding base"),
            ("model.lora_rank", m.lora_rank.to_string(), "rank of the mixer low-rank adapters"),
            ("model.tied_embeddings", "false".into(), "must stay false"),
            ("student.mixer", d.student_mixer.to_string(), "rad_rwkv6, rad_rwkv7 or linatt"),
            ("student.rope", "auto".into(), "auto, on or off"),
            ("data.corpus", d.corpus.display().to_string(), "UTF-8 text file"),
            ("data.vocab", "bytes".into(), "bytes, or a vocabulary file with one token per line"),
            ("data.heldout_frac", d.heldout_frac.to_string(), "tail fraction held out for evaluation"),
            ("eval.seq_len", d.eval_seq_len.to_string(), "held-out window length"),
            ("eval.windows", d.eval_windows.to_string(), "number of held-out windows"),
            ("eval.batch", d.eval_batch.to_string(), "windows per evaluation batch"),
            ("bench.prompt_len", d.bench_prompt_len.to_string(), "prompt tokens before timing starts"),
            ("bench.gen_len", d.bench_gen_len.to_string(), "generated tokens"),
        ]
        .into_iter()
        .map(|(k, v, doc)| (k.to_string(), v, doc.to_string()))
        .collect();
        for (step, plan) in &d.plans {
            for (field, doc) in PLAN_FIELDS {
                let value = match field {
                    "tokens" => plan.token_budget.to_string(),
                    "seq_len" => plan.seq_len.to_string(),
                    "batch_size" => plan.batch_size.to_string(),
                    "lr_main" => plan.lr_main.to_string(),
                    "lr_att" => plan.lr_att.to_string(),
                    "lr_final" => plan.lr_final.to_string(),
                    "schedule" => format!("{:?}", plan.schedule).to_lowercase().replace("scoss", "s_cos_s"),
                    "report_every" => plan.report_every.to_string(),
                    "adam_beta1" => plan.adam.beta1.to_string(),
                    "adam_beta2" => plan.adam.beta2.to_string(),
                    "adam_eps" => plan.adam.eps.to_string(),
                    _ if step == "step1" => "l2".into(),
                    _ => continue,
                };
                out.push((format!("{step}.{field}"), value, doc.to_string()));
            }
            if step == "step1" {
                out.push(("step1.layer_reduce".into(), "sum".into(), "combine per-layer losses by sum or mean".into()));
            }
        }
        out
    }
}
