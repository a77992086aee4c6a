use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::losses::HiddenLoss;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// Softmax teacher pretraining on the corpus (not part of the conversion itself).
    Pretrain,
    Step1,
    Step2,
    Step2a,
    Step3,
    Step3a,
}

impl StepKind {
    pub const CONVERSION: [StepKind; 5] = [StepKind::Step1, StepKind::Step2, StepKind::Step2a, StepKind::Step3, StepKind::Step3a];

    pub fn name(self) -> &'static str {
        match self {
            StepKind::Pretrain => "pretrain",
            StepKind::Step1 => "step1",
            StepKind::Step2 => "step2",
            StepKind::Step2a => "step2a",
            StepKind::Step3 => "step3",
            StepKind::Step3a => "step3a",
        }
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [StepKind::Pretrain]
            .into_iter()
            .chain(StepKind::CONVERSION)
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown step {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Half-cosine from the start rates to `lr_final` over the whole budget.
    Cosine,
    Flat,
    /// Stable, then half-cosine between 5/6 and 7/8 of the budget, then stable. Attention group only.
    SCosS,
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "flat" => Ok(Schedule::Flat),
            "s_cos_s" => Ok(Schedule::SCosS),
            _ => Err(Error::config(format!("unknown schedule {s:?} (cosine, flat, s_cos_s)"))),
        }
    }
}

pub const S_COS_S_START: f64 = 5.0 / 6.0;
pub const S_COS_S_END: f64 = 7.0 / 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

/// How step-1 per-layer losses are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerReduce {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub step: StepKind,
    pub token_budget: u64,
    pub seq_len: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_att: f64,
    pub lr_final: f64,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub hidden_loss: HiddenLoss,
    pub layer_reduce: LayerReduce,
    /// Tokens between report records.
    pub report_every: u64,
}

impl TrainPlan {
    /// The full-scale hyper-parameters for a conversion step.
    pub fn full_scale(step: StepKind) -> Self {
        let base = TrainPlan {
            step,
            token_budget: 100_000_000,
            seq_len: 512,
            batch_size: 32,
            lr_main: 1e-5,
            lr_att: 1e-5,
            lr_final: 1e-5,
            schedule: Schedule::Flat,
            adam: AdamConfig::default(),
            hidden_loss: HiddenLoss::L2,
            layer_reduce: LayerReduce::Sum,
            report_every: 10_000_000,
        };
        match step {
            StepKind::Step1 | StepKind::Pretrain => TrainPlan { lr_main: 1e-3, lr_att: 1e-3, schedule: Schedule::Cosine, ..base },
            StepKind::Step2 => TrainPlan { token_budget: 500_000_000, batch_size: 96, ..base },
            StepKind::Step2a => TrainPlan {
                token_budget: 600_000_000,
                seq_len: 4096,
                lr_att: 1e-4,
                schedule: Schedule::SCosS,
                ..base
            },
            StepKind::Step3 => TrainPlan { seq_len: 16384, batch_size: 96, ..base },
            StepKind::Step3a => TrainPlan { seq_len: 16384, batch_size: 96, lr_main: 1e-4, lr_att: 1e-4, lr_final: 1e-4, ..base },
        }
    }

    /// Desk-scale defaults for the toy pipeline.
    pub fn desk(step: StepKind) -> Self {
        let p = TrainPlan::full_scale(step);
        match step {
            StepKind::Pretrain => TrainPlan {
                token_budget: 1_200_000,
                seq_len: 128,
                batch_size: 16,
                lr_main: 3e-3,
                lr_att: 3e-3,
                lr_final: 1e-4,
                report_every: 100_000,
                ..p
            },
            StepKind::Step1 => TrainPlan { token_budget: 100_000, seq_len: 128, batch_size: 4, report_every: 10_000, ..p },
            StepKind::Step2 => TrainPlan {
                token_budget: 500_000,
                seq_len: 128,
                batch_size: 4,
                lr_main: DESK_STEP2_LR,
                lr_att: DESK_STEP2_LR,
                lr_final: DESK_STEP2_LR,
                report_every: 100_000,
                ..p
            },
            StepKind::Step2a => TrainPlan {
                token_budget: 600_000,
                seq_len: 512,
                batch_size: 1,
                lr_main: DESK_STEP2_LR,
                lr_att: 3e-3,
                lr_final: DESK_STEP2_LR,
                report_every: 60_000,
                ..p
            },
            StepKind::Step3 | StepKind::Step3a => {
                TrainPlan { token_budget: 100_000, seq_len: 512, batch_size: 1, report_every: 10_000, ..p }
            }
        }
    }

    pub fn tokens_per_batch(&self) -> u64 {
        (self.seq_len * self.batch_size) as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_budget == 0 || self.seq_len == 0 || self.batch_size == 0 || self.report_every == 0 {
            return Err(Error::config("token_budget, seq_len, batch_size and report_every must be positive"));
        }
        if self.token_budget < self.tokens_per_batch() {
            return Err(Error::config(format!(
                "token budget {} is smaller than one batch of {} tokens",
                self.token_budget,
                self.tokens_per_batch()
            )));
        }
        if self.schedule == Schedule::SCosS && self.step != StepKind::Step2a {
            return Err(Error::config("the s_cos_s schedule is only valid for step2a"));
        }
        for (name, lr) in [("lr_main", self.lr_main), ("lr_att", self.lr_att), ("lr_final", self.lr_final)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::config(format!("{name} must be a non-negative number, got {lr}")));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::config("adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }

    /// `(lr_main, lr_att)` after `tokens_seen` tokens.
    pub fn lr_at(&self, tokens_seen: u64) -> Result<(f64, f64)> {
        if tokens_seen > self.token_budget {
            return Err(Error::invalid(format!("{tokens_seen} tokens is past the budget of {}", self.token_budget)));
        }
        let p = tokens_seen as f64 / self.token_budget as f64;
        let cos = |from: f64, to: f64, x: f64| to + 0.5 * (from - to) * (1.0 + (PI * x).cos());
        Ok(match self.schedule {
            Schedule::Flat => (self.lr_main, self.lr_att),
            Schedule::Cosine => (cos(self.lr_main, self.lr_final, p), cos(self.lr_att, self.lr_final, p)),
            Schedule::SCosS => {
                let att = if p <= S_COS_S_START {
                    self.lr_att
                } else if p >= S_COS_S_END {
                    self.lr_final
                } else {
                    cos(self.lr_att, self.lr_final, (p - S_COS_S_START) / (S_COS_S_END - S_COS_S_START))
                };
                (self.lr_main, att)
            }
        })
    }
}

/// Flat step-2/3 rate used at desk scale.
pub const DESK_STEP2_LR: f64 = 3e-4;
