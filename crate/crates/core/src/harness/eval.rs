//! Held-out evaluation, relative scores and the generation-speed benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{AlignmentModel, Model};
use crate::tensor::Element;
use crate::train::losses::{agreement_rows, mean_ce};

use super::corpus::Batch;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean KL(teacher ‖ student), nats per token.
    pub kl: Option<f64>,
    /// Fraction of positions where the argmaxes agree.
    pub agreement: Option<f64>,
    /// Student cross-entropy on the next token, nats per token.
    pub ce: f64,
    /// Mean per-token L2 distance between student and teacher mixer outputs, per layer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layer_l2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_score: Option<f64>,
    pub tokens: usize,
}

/// Student against teacher on held-out batches.
pub fn eval_agreement<T: Element>(student: &Model<T>, teacher: &Model<T>, batches: &[Batch]) -> Result<EvalReport> {
    if student.spec.vocab_size != teacher.spec.vocab_size {
        return Err(Error::config(format!(
            "student vocabulary {} differs from teacher vocabulary {}",
            student.spec.vocab_size, teacher.spec.vocab_size
        )));
    }
    let (mut kl, mut agree, mut nll, mut n) = (0.0, 0usize, 0.0, 0usize);
    for b in batches {
        let s = student.logits(&b.inputs, b.batch)?;
        let t = teacher.logits(&b.inputs, b.batch)?;
        for (k, a, l) in agreement_rows(&t, &s, Some(&b.targets))? {
            kl += k;
            agree += a as usize;
            nll += l;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no held-out tokens to evaluate"));
    }
    let n_f = n as f64;
    Ok(EvalReport { kl: Some(kl / n_f), agreement: Some(agree as f64 / n_f), ce: nll / n_f, tokens: n, ..Default::default() })
}

/// Cross-entropy of a single model on held-out batches.
pub fn eval_ce<T: Element>(model: &Model<T>, batches: &[Batch]) -> Result<EvalReport> {
    let (mut total, mut n) = (0.0, 0usize);
    for b in batches {
        let l = model.logits(&b.inputs, b.batch)?;
        total += mean_ce(&l, &b.targets)? * b.targets.len() as f64;
        n += b.targets.len();
    }
    if n == 0 {
        return Err(Error::invalid("no held-out tokens to evaluate"));
    }
    Ok(EvalReport { ce: total / n as f64, tokens: n, ..Default::default() })
}

/// Per-layer residual of step-1 alignment.
pub fn eval_alignment<T: Element>(al: &AlignmentModel<T>, batches: &[Batch]) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; al.teacher.layers.len()];
    let mut rows = 0usize;
    for b in batches {
        let mut tape = Tape::inference();
        let out = al.forward(&mut tape, &b.inputs, b.batch)?;
        for (acc, l) in sums.iter_mut().zip(&out.layers) {
            let (s, t) = (tape.value(l.student_out), tape.value(l.teacher_out));
            let d = s.last_dim();
            for (rs, rt) in s.data().chunks(d).zip(t.data().chunks(d)) {
                let sq: f64 = rs.iter().zip(rt).map(|(a, b)| (*a - *b).to_f64().unwrap().powi(2)).sum();
                *acc += sq.sqrt();
            }
        }
        rows += b.inputs.len();
    }
    Ok(sums.into_iter().map(|s| s / rows.max(1) as f64).collect())
}

/// `100·(s − r)/(t − r)`; negative when the student is worse than chance.
pub fn relative_score(s: f64, t: f64, r: f64) -> Result<f64> {
    if !(s.is_finite() && t.is_finite() && r.is_finite()) {
        return Err(Error::invalid("relative score needs finite inputs"));
    }
    if t == r {
        return Err(Error::invalid(format!("relative score undefined: teacher score {t} equals chance {r}")));
    }
    Ok(100.0 * (s - r) / (t - r))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub prompt_len: usize,
    pub gen_len: usize,
    /// `(position, seconds)` for every generated token.
    pub per_token: Vec<(usize, f64)>,
    /// Decoding state size after the run, in scalars.
    pub state_size: usize,
}

impl BenchReport {
    /// Median latency over `window` tokens ending at `pos`.
    pub fn latency_at(&self, pos: usize, window: usize) -> Option<f64> {
        let mut xs: Vec<f64> = self
            .per_token
            .iter()
            .filter(|(p, _)| *p <= pos && *p + window > pos)
            .map(|(_, s)| *s)
            .collect();
        if xs.is_empty() {
            return None;
        }
        xs.sort_by(f64::total_cmp);
        Some(xs[xs.len() / 2])
    }

    /// Latency at `late` over latency at `early`; 1 when only one token was generated.
    pub fn ratio(&self, early: usize, late: usize, window: usize) -> Option<f64> {
        if self.per_token.len() <= 1 {
            return Some(1.0);
        }
        Some(self.latency_at(late, window)? / self.latency_at(early, window)?)
    }

    /// Per-token minimum of two runs over the same positions.
    pub fn fastest(mut self, other: &BenchReport) -> Result<BenchReport> {
        if self.per_token.len() != other.per_token.len()
            || self.per_token.iter().zip(&other.per_token).any(|(a, b)| a.0 != b.0)
        {
            return Err(Error::invalid("bench runs cover different positions"));
        }
        for (a, b) in self.per_token.iter_mut().zip(&other.per_token) {
            a.1 = a.1.min(b.1);
        }
        Ok(self)
    }

    /// Ratio of the last generated token's cost to the first's (medians over `window`).
    pub fn summary_ratio(&self, window: usize) -> f64 {
        match (self.per_token.first(), self.per_token.last()) {
            (Some(a), Some(b)) if self.per_token.len() > 1 => {
                self.ratio(a.0 + window - 1, b.0, window).unwrap_or(1.0)
            }
            _ => 1.0,
        }
    }
}

/// Greedy generation, timing each token after the prompt.
pub fn bench_generation<T: Element>(model: &Model<T>, prompt: &[u32], gen_len: usize) -> Result<BenchReport> {
    if prompt.is_empty() {
        return Err(Error::invalid("benchmark needs a non-empty prompt"));
    }
    let mut state = model.fresh_state(1);
    let v = model.spec.vocab_size;
    let logits = model.decode(prompt, &mut state)?;
    let last = &logits.data()[logits.numel() - v..];
    let mut next = argmax(last);
    let mut per_token = Vec::with_capacity(gen_len);
    for _ in 0..gen_len {
        let pos = state.pos();
        let t0 = Instant::now();
        let l = model.decode(&[next], &mut state)?;
        per_token.push((pos, t0.elapsed().as_secs_f64()));
        next = argmax(l.data());
    }
    Ok(BenchReport { prompt_len: prompt.len(), gen_len, per_token, state_size: state.footprint() })
}

fn argmax<T: Element>(row: &[T]) -> u32 {
    row.iter().enumerate().fold((0usize, T::neg_infinity()), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0 as u32
}
