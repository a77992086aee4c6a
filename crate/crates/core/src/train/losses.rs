//! Distillation and language-modelling losses as fused tape ops.

use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{lit, Element, Tensor};

/// Per-layer hidden-state objective for step 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenLoss {
    /// Mean over tokens of the L2 distance between rows.
    #[default]
    L2,
    /// Mean squared error over all elements.
    Mse,
}

impl std::str::FromStr for HiddenLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(HiddenLoss::L2),
            "mse" => Ok(HiddenLoss::Mse),
            _ => Err(Error::config(format!("unknown hidden loss {s:?} (expected l2 or mse)"))),
        }
    }
}

/// Numerically stable log-softmax of one row into `out`.
pub fn log_softmax_row<T: Element>(row: &[T], out: &mut [T]) {
    let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for &x in row {
        s += (x - m).exp();
    }
    let lse = m + s.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Element>, b: &Tensor<impl Element>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    if a.rank() == 0 {
        return Err(Error::invalid(format!("{op} needs at least one axis")));
    }
    Ok(())
}

fn finite<T: Element>(op: &str, v: T) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{op} produced {v}")))
    }
}

struct HiddenBackward<T> {
    kind: HiddenLoss,
    /// L2: per-row 1/‖diff‖ (0 for identical rows).
    inv: Vec<T>,
}

impl<T: Element> Backward<T> for HiddenBackward<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (s, t) = (ctx.inputs[0], ctx.inputs[1]);
        let d = s.last_dim();
        let rows = s.numel() / d.max(1);
        let g = ctx.grad.data()[0];
        let mut ds = vec![T::zero(); s.numel()];
        match self.kind {
            HiddenLoss::L2 => {
                let c = g / lit::<T>(rows as f64);
                for r in 0..rows {
                    let f = c * self.inv[r];
                    for i in r * d..(r + 1) * d {
                        ds[i] = f * (s.data()[i] - t.data()[i]);
                    }
                }
            }
            HiddenLoss::Mse => {
                let c = lit::<T>(2.0) * g / lit::<T>(s.numel() as f64);
                for (o, (&a, &b)) in ds.iter_mut().zip(s.data().iter().zip(t.data())) {
                    *o = c * (a - b);
                }
            }
        }
        let dt = ctx.needs[1].then(|| ds.iter().map(|&x| -x).collect::<Vec<_>>());
        Ok(vec![
            ctx.needs[0].then(|| Tensor::new(s.shape(), ds)).transpose()?,
            dt.map(|v| Tensor::new(t.shape(), v)).transpose()?,
        ])
    }
}

/// Hidden-state distance between a student and teacher mixer output (`[.., D]`).
pub fn hidden_loss<T: Element>(tape: &mut Tape<T>, student: Var, teacher: Var, kind: HiddenLoss) -> Result<Var> {
    let (s, t) = (tape.value(student), tape.value(teacher));
    check_same("hidden_loss", s, t)?;
    let d = s.last_dim();
    let rows = s.numel() / d.max(1);
    let mut inv = Vec::new();
    let value = match kind {
        HiddenLoss::L2 => {
            let mut total = T::zero();
            inv.reserve(rows);
            for r in 0..rows {
                let mut sq = T::zero();
                for i in r * d..(r + 1) * d {
                    let x = s.data()[i] - t.data()[i];
                    sq += x * x;
                }
                let n = sq.sqrt();
                total += n;
                inv.push(if n > T::zero() { T::one() / n } else { T::zero() });
            }
            total / lit::<T>(rows as f64)
        }
        HiddenLoss::Mse => {
            let mut total = T::zero();
            for (&a, &b) in s.data().iter().zip(t.data()) {
                total += (a - b) * (a - b);
            }
            total / lit::<T>(s.numel() as f64)
        }
    };
    let value = finite("hidden_loss", value)?;
    Ok(tape.push_custom(vec![student, teacher], Tensor::scalar(value), Box::new(HiddenBackward { kind, inv })))
}

struct KlBackward<T> {
    /// Teacher log-probabilities and student log-probabilities, row-major.
    lp_t: Vec<T>,
    lp_s: Vec<T>,
    row_kl: Vec<T>,
}

impl<T: Element> Backward<T> for KlBackward<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let shape = ctx.inputs[0].shape();
        let v = ctx.inputs[0].last_dim();
        let rows = self.row_kl.len();
        let c = ctx.grad.data()[0] / lit::<T>(rows as f64);
        let dt = ctx.needs[0].then(|| {
            let mut out = vec![T::zero(); self.lp_t.len()];
            for r in 0..rows {
                for i in r * v..(r + 1) * v {
                    let p = self.lp_t[i].exp();
                    out[i] = c * p * (self.lp_t[i] - self.lp_s[i] - self.row_kl[r]);
                }
            }
            out
        });
        let ds = ctx.needs[1].then(|| {
            self.lp_s.iter().zip(&self.lp_t).map(|(&q, &p)| c * (q.exp() - p.exp())).collect::<Vec<_>>()
        });
        Ok(vec![dt.map(|d| Tensor::new(shape, d)).transpose()?, ds.map(|d| Tensor::new(shape, d)).transpose()?])
    }
}

/// Mean over positions of KL(teacher ‖ student) in nats.
pub fn kl_loss<T: Element>(tape: &mut Tape<T>, teacher_logits: Var, student_logits: Var) -> Result<Var> {
    let (t, s) = (tape.value(teacher_logits), tape.value(student_logits));
    check_same("kl_loss", t, s)?;
    let v = t.last_dim();
    let rows = t.numel() / v.max(1);
    let mut lp_t = vec![T::zero(); t.numel()];
    let mut lp_s = vec![T::zero(); s.numel()];
    let mut row_kl = Vec::with_capacity(rows);
    for r in 0..rows {
        let span = r * v..(r + 1) * v;
        log_softmax_row(&t.data()[span.clone()], &mut lp_t[span.clone()]);
        log_softmax_row(&s.data()[span.clone()], &mut lp_s[span.clone()]);
        let mut kl = T::zero();
        for i in span {
            kl += lp_t[i].exp() * (lp_t[i] - lp_s[i]);
        }
        row_kl.push(kl);
    }
    let value = finite("kl_loss", row_kl.iter().cloned().sum::<T>() / lit::<T>(rows as f64))?;
    Ok(tape.push_custom(
        vec![teacher_logits, student_logits],
        Tensor::scalar(value),
        Box::new(KlBackward { lp_t, lp_s, row_kl }),
    ))
}

struct CeBackward<T> {
    lp: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Element> Backward<T> for CeBackward<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.inputs[0];
        let v = x.last_dim();
        let c = ctx.grad.data()[0] / lit::<T>(self.labels.len() as f64);
        let mut out: Vec<T> = self.lp.iter().map(|&l| c * l.exp()).collect();
        for (r, &y) in self.labels.iter().enumerate() {
            out[r * v + y] -= c;
        }
        Ok(vec![Some(Tensor::new(x.shape(), out)?)])
    }
}

/// Mean negative log-likelihood of `labels` (one per logit row).
pub fn ce_loss<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[u32]) -> Result<Var> {
    let x = tape.value(logits);
    let v = x.last_dim();
    let rows = x.numel() / v.max(1);
    if rows != labels.len() || rows == 0 {
        return Err(Error::invalid(format!("{} labels for {rows} logit rows", labels.len())));
    }
    let mut lp = vec![T::zero(); x.numel()];
    let mut total = T::zero();
    let mut idx = Vec::with_capacity(rows);
    for (r, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= v {
            return Err(Error::invalid(format!("label {y} outside vocabulary of {v}")));
        }
        log_softmax_row(&x.data()[r * v..(r + 1) * v], &mut lp[r * v..(r + 1) * v]);
        total -= lp[r * v + y];
        idx.push(y);
    }
    let value = finite("ce_loss", total / lit::<T>(rows as f64))?;
    Ok(tape.push_custom(vec![logits], Tensor::scalar(value), Box::new(CeBackward { lp, labels: idx })))
}

/// Per-row `(KL(teacher‖student), argmax agrees, student NLL of label)` on plain tensors.
pub fn agreement_rows<T: Element>(teacher: &Tensor<T>, student: &Tensor<T>, labels: Option<&[u32]>) -> Result<Vec<(f64, bool, f64)>> {
    check_same("agreement", teacher, student)?;
    let v = teacher.last_dim();
    let rows = teacher.numel() / v;
    if let Some(l) = labels {
        if l.len() != rows {
            return Err(Error::invalid(format!("{} labels for {rows} rows", l.len())));
        }
    }
    let mut lp_t = vec![T::zero(); v];
    let mut lp_s = vec![T::zero(); v];
    let argmax = |row: &[T]| {
        row.iter().enumerate().fold((0, T::neg_infinity()), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0
    };
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let (tr, sr) = (&teacher.data()[r * v..(r + 1) * v], &student.data()[r * v..(r + 1) * v]);
        log_softmax_row(tr, &mut lp_t);
        log_softmax_row(sr, &mut lp_s);
        let kl: f64 = lp_t
            .iter()
            .zip(&lp_s)
            .map(|(&p, &q)| {
                let (p, q) = (p.to_f64().unwrap(), q.to_f64().unwrap());
                p.exp() * (p - q)
            })
            .sum();
        let nll = labels.map_or(f64::NAN, |l| -lp_s[l[r] as usize].to_f64().unwrap());
        out.push((kl, argmax(tr) == argmax(sr), nll));
    }
    Ok(out)
}

/// Mean cross-entropy of plain logits against labels.
pub fn mean_ce<T: Element>(logits: &Tensor<T>, labels: &[u32]) -> Result<f64> {
    let v = logits.last_dim();
    let rows = logits.numel() / v;
    if rows != labels.len() || rows == 0 {
        return Err(Error::invalid(format!("{} labels for {rows} logit rows", labels.len())));
    }
    let mut lp = vec![T::zero(); v];
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y as usize >= v {
            return Err(Error::invalid(format!("label {y} outside vocabulary of {v}")));
        }
        log_softmax_row(&logits.data()[r * v..(r + 1) * v], &mut lp);
        total -= lp[y as usize].to_f64().unwrap();
    }
    Ok(total / rows as f64)
}
