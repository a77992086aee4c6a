//! Training loops for teacher pretraining and the conversion steps.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::harness::corpus::{Batch, Corpus, Sampler};
use crate::harness::eval::{eval_agreement, eval_ce, EvalReport};
use crate::model::{AlignmentModel, Model};
use crate::param::{ParamRole, ParamStore};
use crate::tensor::Element;

use super::adam::AdamState;
use super::losses::{ce_loss, hidden_loss, kl_loss};
use super::plan::{LayerReduce, StepKind, TrainPlan};

/// One report interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub step: StepKind,
    pub tokens: u64,
    /// Mean training loss over the interval.
    pub loss: f64,
    pub lr_main: f64,
    pub lr_att: f64,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<ReportRecord>,
    /// Number of trainable scalars during the run.
    pub trainable: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_eval: Option<EvalReport>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.records.iter().rev().find_map(|r| r.eval.as_ref())
    }
}

/// Shared inputs of every driver.
pub struct RunCtx<'a> {
    pub corpus: &'a Corpus,
    pub seed: u64,
    /// Held-out batches evaluated before the run and at each report interval.
    pub heldout: Option<&'a [Batch]>,
    /// JSON-lines sink for records as they are produced.
    pub log: Option<&'a mut dyn Write>,
}

impl<'a> RunCtx<'a> {
    pub fn new(corpus: &'a Corpus, seed: u64) -> Self {
        RunCtx { corpus, seed, heldout: None, log: None }
    }

    pub fn with_heldout(mut self, heldout: &'a [Batch]) -> Self {
        self.heldout = Some(heldout);
        self
    }

    pub fn with_log(mut self, log: &'a mut dyn Write) -> Self {
        self.log = Some(log);
        self
    }
}

/// Generic loop: `loss_fn` builds the scalar loss for a batch on a fresh tape and
/// must place only parameters of `store` on it that should move.
fn train_loop<T: Element>(
    plan: &TrainPlan,
    expected: StepKind,
    ctx: &mut RunCtx<'_>,
    store: &mut ParamStore<T>,
    mut loss_fn: impl FnMut(&mut Tape<T>, &ParamStore<T>, &Batch) -> Result<Var>,
    mut eval_fn: impl FnMut(&ParamStore<T>) -> Result<Option<EvalReport>>,
) -> Result<TrainReport> {
    plan.validate()?;
    if plan.step != expected {
        return Err(Error::config(format!("plan is for {} but the {expected} driver was called", plan.step)));
    }
    let trainable = store.trainable_numel();
    if trainable == 0 {
        return Err(Error::config(format!("{expected}: no trainable parameters")));
    }
    let mut report = TrainReport { trainable, initial_eval: eval_fn(store)?, ..Default::default() };
    let mut sampler = Sampler::new(ctx.corpus, plan.seq_len, plan.batch_size, ctx.seed)?;
    let mut adam = AdamState::new(store, plan.adam);
    store.zero_grads();

    let per_batch = plan.tokens_per_batch();
    let (mut tokens, mut next_report) = (0u64, plan.report_every);
    let (mut acc, mut acc_n) = (0.0, 0usize);
    let start = Instant::now();
    while tokens + per_batch <= plan.token_budget {
        let batch = sampler.next_batch(ctx.corpus);
        let (lr_main, lr_att) = plan.lr_at(tokens)?;
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store, &batch)?;
        let lv = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("{expected} loss at {tokens} tokens")));
        }
        tape.backward(loss, store)?;
        drop(tape);
        adam.step(store, lr_main, lr_att)?;
        tokens += per_batch;
        acc += lv;
        acc_n += 1;
        let last = tokens + per_batch > plan.token_budget;
        if tokens >= next_report || last {
            let (lr_main, lr_att) = plan.lr_at(tokens)?;
            let rec = ReportRecord {
                step: expected,
                tokens,
                loss: acc / acc_n as f64,
                lr_main,
                lr_att,
                seconds: start.elapsed().as_secs_f64(),
                eval: eval_fn(store)?,
            };
            if let Some(log) = ctx.log.as_deref_mut() {
                serde_json::to_writer(&mut *log, &rec).map_err(|e| Error::invalid(e.to_string()))?;
                writeln!(log)?;
                log.flush()?;
            }
            report.records.push(rec);
            (acc, acc_n) = (0.0, 0);
            while next_report <= tokens {
                next_report += plan.report_every;
            }
        }
    }
    Ok(report)
}

/// Trains the softmax teacher on next-token cross-entropy. With held-out data the
/// parameters with the lowest held-out CE seen at any report are kept.
pub fn pretrain_teacher<T: Element>(teacher: &mut Model<T>, plan: &TrainPlan, ctx: &mut RunCtx<'_>) -> Result<TrainReport> {
    let heldout = ctx.heldout;
    let skeleton = teacher.clone();
    let mut best: Option<(f64, ParamStore<T>)> = None;
    let report = train_loop(
        plan,
        StepKind::Pretrain,
        ctx,
        &mut teacher.store,
        |tape, store, b| {
            let out = skeleton.forward_in(store, tape, &b.inputs, b.batch, None, false)?;
            ce_loss(tape, out.logits, &b.targets)
        },
        |store| {
            let Some(h) = heldout else { return Ok(None) };
            let r = eval_ce(&with_store(&skeleton, store), h)?;
            if best.as_ref().is_none_or(|(ce, _)| r.ce < *ce) {
                best = Some((r.ce, store.clone()));
            }
            Ok(Some(r))
        },
    )?;
    if let Some((_, store)) = best {
        for (p, b) in teacher.store.iter_mut().zip(store.iter()) {
            p.value = b.value.clone();
        }
    }
    Ok(report)
}

/// Step 1: aligns every student mixer with its teacher attention layer at once.
pub fn run_step1<T: Element>(al: &mut AlignmentModel<T>, plan: &TrainPlan, ctx: &mut RunCtx<'_>) -> Result<TrainReport> {
    al.student.store.set_trainable(|p| Model::<T>::is_mixer_param(&p.name));
    let heldout = ctx.heldout;
    let view = al.clone();
    let (kind, reduce) = (plan.hidden_loss, plan.layer_reduce);
    let report = {
        train_loop(
            plan,
            StepKind::Step1,
            ctx,
            &mut al.student.store,
            |tape, store, b| {
                let out = view.forward_in(store, tape, &b.inputs, b.batch)?;
                let mut total: Option<Var> = None;
                for l in &out.layers {
                    let x = hidden_loss(tape, l.student_out, l.teacher_out, kind)?;
                    total = Some(match total {
                        None => x,
                        Some(a) => tape.add(a, x)?,
                    });
                }
                let total = total.ok_or_else(|| Error::invalid("model has no layers"))?;
                Ok(match reduce {
                    LayerReduce::Sum => total,
                    LayerReduce::Mean => tape.scale(total, 1.0 / out.layers.len() as f64),
                })
            },
            |store| match heldout {
                Some(h) => {
                    let view = AlignmentModel { teacher: view.teacher.clone(), student: with_store(&view.student, store) };
                    let layer_l2 = crate::harness::eval::eval_alignment(&view, h)?;
                    Ok(Some(EvalReport { layer_l2, tokens: h.iter().map(|b| b.inputs.len()).sum(), ..Default::default() }))
                }
                None => Ok(None),
            },
        )?
    };
    al.student.store.set_trainable(|_| true);
    Ok(report)
}

fn with_store<T: Element>(skeleton: &Model<T>, store: &ParamStore<T>) -> Model<T> {
    Model { store: store.clone(), ..skeleton.clone() }
}

fn run_kl<T: Element>(
    student: &mut Model<T>,
    teacher: &Model<T>,
    plan: &TrainPlan,
    step: StepKind,
    ctx: &mut RunCtx<'_>,
) -> Result<TrainReport> {
    if student.spec.vocab_size != teacher.spec.vocab_size {
        return Err(Error::config("student and teacher vocabularies differ"));
    }
    student.store.set_trainable(|_| true);
    let heldout = ctx.heldout;
    let skeleton = student.clone();
    train_loop(
        plan,
        step,
        ctx,
        &mut student.store,
        |tape, store, b| {
            let t_logits = teacher.logits(&b.inputs, b.batch)?;
            let t_var = tape.constant(t_logits);
            let s = skeleton.forward_in(store, tape, &b.inputs, b.batch, None, false)?;
            kl_loss(tape, t_var, s.logits)
        },
        |store| heldout.map(|h| eval_agreement(&with_store(&skeleton, store), teacher, h)).transpose(),
    )
}

/// Step 2: logit distillation from the teacher at a flat rate.
pub fn run_step2<T: Element>(student: &mut Model<T>, teacher: &Model<T>, plan: &TrainPlan, ctx: &mut RunCtx<'_>) -> Result<TrainReport> {
    run_kl(student, teacher, plan, StepKind::Step2, ctx)
}

/// Step 2a: long-context distillation with split rates replacing steps 2 and 3.
pub fn run_step2a<T: Element>(student: &mut Model<T>, teacher: &Model<T>, plan: &TrainPlan, ctx: &mut RunCtx<'_>) -> Result<TrainReport> {
    if plan.schedule != super::plan::Schedule::SCosS {
        return Err(Error::config("step2a requires the s_cos_s schedule"));
    }
    run_kl(student, teacher, plan, StepKind::Step2a, ctx)
}

fn run_ce<T: Element>(model: &mut Model<T>, plan: &TrainPlan, step: StepKind, ctx: &mut RunCtx<'_>) -> Result<TrainReport> {
    let heldout = ctx.heldout;
    let skeleton = model.clone();
    train_loop(
        plan,
        step,
        ctx,
        &mut model.store,
        |tape, store, b| {
            let out = skeleton.forward_in(store, tape, &b.inputs, b.batch, None, false)?;
            ce_loss(tape, out.logits, &b.targets)
        },
        |store| heldout.map(|h| eval_ce(&with_store(&skeleton, store), h)).transpose(),
    )
}

/// Step 3: plain cross-entropy at longer context, everything trainable.
pub fn run_step3<T: Element>(student: &mut Model<T>, plan: &TrainPlan, ctx: &mut RunCtx<'_>) -> Result<TrainReport> {
    student.store.set_trainable(|_| true);
    run_ce(student, plan, StepKind::Step3, ctx)
}

/// Step 3a: cross-entropy with everything frozen except decay and tokenshift parameters.
pub fn run_step3a<T: Element>(student: &mut Model<T>, plan: &TrainPlan, ctx: &mut RunCtx<'_>) -> Result<TrainReport> {
    student.store.set_trainable(|p| matches!(p.role, ParamRole::Decay | ParamRole::TokenShift));
    let report = run_ce(student, plan, StepKind::Step3a, ctx);
    student.store.set_trainable(|_| true);
    report
}

/// Scalars that step 3a leaves trainable.
pub fn step3a_trainable_count<T: Element>(model: &Model<T>) -> usize {
    model
        .store
        .iter()
        .filter(|p| matches!(p.role, ParamRole::Decay | ParamRole::TokenShift))
        .map(|p| p.value.numel())
        .sum()
}
