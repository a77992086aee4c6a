//! Building blocks shared by the sequence mixers: low-rank adapters, ddlerp,
//! token shift, rotary embedding and the teacher's grouped-query softmax attention.

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamGroup, ParamId, ParamRole, ParamStore};
use crate::tensor::{gemm, lit, Element, Strided, Tensor};

// ---------------------------------------------------------------------------
// Low-rank adapters
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

/// `bias + act(x·A)·B`.
#[derive(Clone, Copy, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub bias: Option<ParamId>,
    pub activation: Activation,
}

/// Default adapter rank for model width `d`.
pub fn default_rank(d: usize) -> usize {
    (d / 16).max(8)
}

impl LoraAdapter {
    /// Registers `{prefix}.a`, `{prefix}.b` and optionally `{prefix}.bias` in the attention group.
    pub fn add<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        a: Tensor<T>,
        b: Tensor<T>,
        bias: Option<Tensor<T>>,
        activation: Activation,
        role: ParamRole,
    ) -> Result<Self> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] || a.shape()[1] == 0 {
            return Err(Error::shape("lora", a.shape(), b.shape()));
        }
        if let Some(l) = &bias {
            if l.shape() != [b.shape()[1]] {
                return Err(Error::shape("lora bias", b.shape(), l.shape()));
            }
        }
        let a = store.add(format!("{prefix}.a"), a, ParamGroup::Att, role)?;
        let b = store.add(format!("{prefix}.b"), b, ParamGroup::Att, role)?;
        let bias = match bias {
            Some(l) => Some(store.add(format!("{prefix}.bias"), l, ParamGroup::Att, role)?),
            None => None,
        };
        Ok(LoraAdapter { a, b, bias, activation })
    }

    /// Looks up an adapter previously registered under `prefix`.
    pub fn bind<T: Element>(store: &ParamStore<T>, prefix: &str, activation: Activation) -> Result<Self> {
        let find = |s: &str| {
            store
                .id(&format!("{prefix}.{s}"))
                .ok_or_else(|| Error::invalid(format!("missing parameter {prefix}.{s}")))
        };
        Ok(LoraAdapter {
            a: find("a")?,
            b: find("b")?,
            bias: store.id(&format!("{prefix}.bias")),
            activation,
        })
    }

    pub fn rank<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.a).shape()[1]
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        let bias = self.bias.map(|l| tape.param(store, l));
        lora(tape, x, a, b, bias, self.activation)
    }
}

/// `bias + act(x·A)·B` on tape variables.
pub fn lora<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    a: Var,
    b: Var,
    bias: Option<Var>,
    activation: Activation,
) -> Result<Var> {
    let h = tape.matmul(x, a)?;
    let h = match activation {
        Activation::Identity => h,
        Activation::Tanh => tape.tanh(h),
        Activation::Sigmoid => tape.sigmoid(h),
    };
    let out = tape.matmul(h, b)?;
    match bias {
        Some(l) => tape.add(out, l),
        None => Ok(out),
    }
}

// ---------------------------------------------------------------------------
// ddlerp
// ---------------------------------------------------------------------------

/// Targets of the data-dependent interpolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdlerpTarget {
    R,
    V,
    G,
    W,
    K,
}

impl DdlerpTarget {
    pub const ALL: [DdlerpTarget; 5] = [Self::R, Self::V, Self::G, Self::W, Self::K];

    pub fn name(self) -> &'static str {
        match self {
            Self::R => "r",
            Self::V => "v",
            Self::G => "g",
            Self::W => "w",
            Self::K => "k",
        }
    }
}

/// Shared mixing vector `μ_x` plus one tanh adapter per target.
#[derive(Clone, Copy, Debug)]
pub struct DdlerpParams {
    pub mu: ParamId,
    pub adapters: [LoraAdapter; 5],
}

impl DdlerpParams {
    pub fn adapter(&self, target: DdlerpTarget) -> LoraAdapter {
        self.adapters[target as usize]
    }

    /// Interpolates toward `prev` for every target, sharing the adapter input.
    pub fn apply_all<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        prev: Var,
    ) -> Result<[Var; 5]> {
        let mu = tape.param(store, self.mu);
        let inner = tape.lerp(x, prev, mu)?;
        let mut out = [x; 5];
        for (slot, ad) in out.iter_mut().zip(&self.adapters) {
            let m = ad.forward(tape, store, inner)?;
            *slot = tape.lerp(x, prev, m)?;
        }
        Ok(out)
    }

    pub fn apply<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        target: DdlerpTarget,
        x: Var,
        prev: Var,
    ) -> Result<Var> {
        let mu = tape.param(store, self.mu);
        let inner = tape.lerp(x, prev, mu)?;
        let m = self.adapter(target).forward(tape, store, inner)?;
        tape.lerp(x, prev, m)
    }
}

/// `a + (b − a) ⊙ lora(a + (b − a) ⊙ μ)`.
pub fn ddlerp<T: Element>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    mu: Var,
    adapter: (Var, Var, Option<Var>, Activation),
) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape("ddlerp", tape.shape(a), tape.shape(b)));
    }
    let inner = tape.lerp(a, b, mu)?;
    let m = lora(tape, inner, adapter.0, adapter.1, adapter.2, adapter.3)?;
    tape.lerp(a, b, m)
}

// ---------------------------------------------------------------------------
// Token shift
// ---------------------------------------------------------------------------

struct TokenShiftBackward {
    t: usize,
}

impl<T: Element> Backward<T> for TokenShiftBackward {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.inputs[0];
        let d = x.last_dim();
        let gd = ctx.grad.data();
        let mut dx = vec![T::zero(); x.numel()];
        let seq = self.t * d;
        for b in 0..x.numel() / seq {
            let base = b * seq;
            dx[base..base + seq - d].copy_from_slice(&gd[base + d..base + seq]);
        }
        Ok(vec![Some(Tensor::new(x.shape(), dx)?)])
    }
}

/// Row `t` of the result holds row `t − 1` of `x` (`[.., T, D]`); row 0 holds
/// `prev` (one `D` row per sequence) or zeros.
pub fn token_shift<T: Element>(tape: &mut Tape<T>, x: Var, prev: Option<&Tensor<T>>) -> Result<Var> {
    let xv = tape.value(x);
    if xv.rank() < 2 {
        return Err(Error::invalid(format!("token_shift needs [.., T, D], got {:?}", xv.shape())));
    }
    let d = xv.last_dim();
    let t = xv.shape()[xv.rank() - 2];
    let seqs = xv.numel() / (t * d).max(1);
    if let Some(p) = prev {
        if p.numel() != seqs * d {
            return Err(Error::shape("token_shift", xv.shape(), p.shape()));
        }
    }
    let mut out = vec![T::zero(); xv.numel()];
    for b in 0..seqs {
        let base = b * t * d;
        if let Some(p) = prev {
            out[base..base + d].copy_from_slice(&p.data()[b * d..(b + 1) * d]);
        }
        out[base + d..base + t * d].copy_from_slice(&xv.data()[base..base + (t - 1) * d]);
    }
    let value = Tensor::new(xv.shape(), out)?;
    Ok(tape.push_custom(vec![x], value, Box::new(TokenShiftBackward { t })))
}

/// Shift of a single `[T, D]` sequence with a zero first row.
pub fn tokenshift_prev<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let v = tape.constant(x.clone());
    let out = token_shift(&mut tape, v, None)?;
    Ok(tape.take_value(out))
}

// ---------------------------------------------------------------------------
// Rotary embedding
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    pub enabled: bool,
}

impl RopeConfig {
    pub fn new(head_dim: usize, enabled: bool) -> Self {
        RopeConfig { head_dim, base: 10000.0, enabled }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && (self.head_dim == 0 || self.head_dim % 2 != 0) {
            return Err(Error::invalid(format!("rope needs an even head_dim, got {}", self.head_dim)));
        }
        if !(self.base > 0.0) {
            return Err(Error::invalid(format!("rope base must be positive, got {}", self.base)));
        }
        Ok(())
    }

    /// `(cos, sin)` tables of shape `[len, head_dim/2]` starting at position `offset`.
    fn tables<T: Element>(&self, len: usize, offset: usize) -> (Vec<T>, Vec<T>) {
        let half = self.head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for p in 0..len {
            let pos = (p + offset) as f64;
            for i in 0..half {
                let theta = pos * self.base.powf(-2.0 * i as f64 / self.head_dim as f64);
                cos.push(lit(theta.cos()));
                sin.push(lit(theta.sin()));
            }
        }
        (cos, sin)
    }
}

/// Rotates interleaved pairs `(x[2i], x[2i+1])` by `sign·θ`.
fn rotate<T: Element>(data: &mut [T], t: usize, width: usize, d: usize, cos: &[T], sin: &[T], inverse: bool) {
    let half = d / 2;
    for (row, chunk) in data.chunks_exact_mut(width).enumerate() {
        let pos = row % t;
        let (c, s) = (&cos[pos * half..(pos + 1) * half], &sin[pos * half..(pos + 1) * half]);
        for head in chunk.chunks_exact_mut(d) {
            for i in 0..half {
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                let sn = if inverse { -s[i] } else { s[i] };
                head[2 * i] = x0 * c[i] - x1 * sn;
                head[2 * i + 1] = x0 * sn + x1 * c[i];
            }
        }
    }
}

struct RopeBackward<T> {
    t: usize,
    d: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Element> Backward<T> for RopeBackward<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut g = ctx.grad.data().to_vec();
        rotate(&mut g, self.t, ctx.grad.last_dim(), self.d, &self.cos, &self.sin, true);
        Ok(vec![Some(Tensor::new(ctx.grad.shape(), g)?)])
    }
}

/// Applies rotary embedding to `x` of shape `[.., T, h·d]`; position of row `t` is `t + pos_offset`.
pub fn rope_apply<T: Element>(tape: &mut Tape<T>, x: Var, cfg: &RopeConfig, pos_offset: usize) -> Result<Var> {
    if !cfg.enabled {
        return Ok(x);
    }
    cfg.validate()?;
    let xv = tape.value(x);
    let width = xv.last_dim();
    if xv.rank() < 2 || width % cfg.head_dim != 0 {
        return Err(Error::invalid(format!(
            "rope: shape {:?} incompatible with head_dim {}",
            xv.shape(),
            cfg.head_dim
        )));
    }
    let t = xv.shape()[xv.rank() - 2];
    let (cos, sin) = cfg.tables::<T>(t, pos_offset);
    let mut data = xv.data().to_vec();
    rotate(&mut data, t, width, cfg.head_dim, &cos, &sin, false);
    let value = Tensor::new(xv.shape(), data)?;
    let bw = RopeBackward { t, d: cfg.head_dim, cos, sin };
    Ok(tape.push_custom(vec![x], value, Box::new(bw)))
}

// ---------------------------------------------------------------------------
// Grouped-query softmax attention
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub n_q: usize,
    pub n_kv: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn validate(&self) -> Result<()> {
        if self.n_q == 0 || self.n_kv == 0 || self.head_dim == 0 {
            return Err(Error::invalid("head counts and head_dim must be positive"));
        }
        if self.n_q % self.n_kv != 0 {
            return Err(Error::invalid(format!(
                "n_q_heads {} not divisible by n_kv_heads {}",
                self.n_q, self.n_kv
            )));
        }
        Ok(())
    }

    pub fn n_rep(&self) -> usize {
        self.n_q / self.n_kv
    }

    pub fn q_width(&self) -> usize {
        self.n_q * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv * self.head_dim
    }
}

struct AttentionBackward<T> {
    layout: HeadLayout,
    batch: usize,
    t: usize,
    /// Softmax probabilities `[B, Hq, T, T]`.
    probs: Vec<T>,
}

impl<T: Element> Backward<T> for AttentionBackward<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let HeadLayout { n_q, n_kv, head_dim: d } = self.layout;
        let (q, k, v) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
        let (t, qw, kw) = (self.t, n_q * d, n_kv * d);
        let scale: T = lit(1.0 / (d as f64).sqrt());
        let go = ctx.grad.data();
        let mut dq = vec![T::zero(); q.numel()];
        let mut dk = vec![T::zero(); k.numel()];
        let mut dv = vec![T::zero(); v.numel()];
        let mut ds = vec![T::zero(); t * t];
        let rep = self.layout.n_rep();
        for b in 0..self.batch {
            for h in 0..n_q {
                let kvh = h / rep;
                let qo = b * t * qw + h * d;
                let ko = b * t * kw + kvh * d;
                let p = &self.probs[(b * n_q + h) * t * t..(b * n_q + h + 1) * t * t];
                // dP = dO · Vᵀ
                gemm(t, d, t, T::one(), go, Strided::rows(qo, qw), v.data(), Strided::transposed(ko, kw), T::zero(), &mut ds, Strided::rows(0, t));
                for i in 0..t {
                    let row = &mut ds[i * t..(i + 1) * t];
                    let pr = &p[i * t..(i + 1) * t];
                    let dot: T = row.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for j in 0..t {
                        row[j] = pr[j] * (row[j] - dot);
                    }
                }
                // dV += Pᵀ · dO
                gemm(t, t, d, T::one(), p, Strided::transposed(0, t), go, Strided::rows(qo, qw), T::one(), &mut dv, Strided::rows(ko, kw));
                gemm(t, t, d, scale, &ds, Strided::rows(0, t), k.data(), Strided::rows(ko, kw), T::one(), &mut dq, Strided::rows(qo, qw));
                gemm(t, t, d, scale, &ds, Strided::transposed(0, t), q.data(), Strided::rows(qo, qw), T::one(), &mut dk, Strided::rows(ko, kw));
            }
        }
        Ok(vec![
            ctx.needs[0].then(|| Tensor::new(q.shape(), dq)).transpose()?,
            ctx.needs[1].then(|| Tensor::new(k.shape(), dk)).transpose()?,
            ctx.needs[2].then(|| Tensor::new(v.shape(), dv)).transpose()?,
        ])
    }
}

/// Per-head `softmax(q·kᵀ/√d + mask)·v` with `q: [B, T, Hq·d]`, `k, v: [B, T, Hkv·d]`.
/// Key/value head `j` serves query heads `j·rep .. (j+1)·rep`.
pub fn softmax_attention_gqa<T: Element>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    layout: HeadLayout,
    causal: bool,
) -> Result<Var> {
    layout.validate()?;
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    if qv.rank() != 3 || qv.last_dim() != layout.q_width() {
        return Err(Error::invalid(format!("attention q shape {:?} does not match {layout:?}", qv.shape())));
    }
    let (batch, t) = (qv.shape()[0], qv.shape()[1]);
    let kv_shape = [batch, t, layout.kv_width()];
    for other in [kv, vv] {
        if other.shape() != kv_shape {
            return Err(Error::shape("attention", qv.shape(), other.shape()));
        }
    }
    let HeadLayout { n_q, n_kv: _, head_dim: d } = layout;
    let (qw, kw) = (layout.q_width(), layout.kv_width());
    let scale: T = lit(1.0 / (d as f64).sqrt());
    let mut out = vec![T::zero(); qv.numel()];
    let mut probs = vec![T::zero(); batch * n_q * t * t];
    let rep = layout.n_rep();
    for b in 0..batch {
        for h in 0..n_q {
            let kvh = h / rep;
            let qo = b * t * qw + h * d;
            let ko = b * t * kw + kvh * d;
            let p = &mut probs[(b * n_q + h) * t * t..(b * n_q + h + 1) * t * t];
            gemm(t, d, t, scale, qv.data(), Strided::rows(qo, qw), kv.data(), Strided::transposed(ko, kw), T::zero(), p, Strided::rows(0, t));
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let end = if causal { i + 1 } else { t };
                softmax_in_place(&mut row[..end]);
                row[end..].iter_mut().for_each(|x| *x = T::zero());
            }
            gemm(t, t, d, T::one(), p, Strided::rows(0, t), vv.data(), Strided::rows(ko, kw), T::zero(), &mut out, Strided::rows(qo, qw));
        }
    }
    let value = Tensor::new(qv.shape(), out)?;
    let bw = AttentionBackward { layout, batch, t, probs };
    Ok(tape.push_custom(vec![q, k, v], value, Box::new(bw)))
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    let inv = T::one() / s;
    row.iter_mut().for_each(|x| *x *= inv);
}

/// Single-query attention against a cache of `len` positions (`keys`, `values`
/// are `[len, Hkv·d]` row-major). Writes `[Hq·d]` into `out`.
pub fn softmax_attention_cached<T: Element>(
    q: &[T],
    keys: &[T],
    values: &[T],
    len: usize,
    layout: HeadLayout,
    scores: &mut Vec<T>,
    out: &mut [T],
) {
    let HeadLayout { n_q, head_dim: d, .. } = layout;
    let kw = layout.kv_width();
    let scale: T = lit(1.0 / (d as f64).sqrt());
    let rep = layout.n_rep();
    scores.resize(len, T::zero());
    for h in 0..n_q {
        let ko = (h / rep) * d;
        let qh = &q[h * d..(h + 1) * d];
        for (j, s) in scores.iter_mut().enumerate() {
            let kr = &keys[j * kw + ko..j * kw + ko + d];
            *s = qh.iter().zip(kr).map(|(&a, &b)| a * b).sum::<T>() * scale;
        }
        softmax_in_place(scores);
        let oh = &mut out[h * d..(h + 1) * d];
        oh.iter_mut().for_each(|x| *x = T::zero());
        for (j, &p) in scores.iter().enumerate() {
            let vr = &values[j * kw + ko..j * kw + ko + d];
            for (o, &vv) in oh.iter_mut().zip(vr) {
                *o += p * vv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn scalar_lora(lambda: f64, a: f64, b: f64, x: f64) -> f64 {
        let mut store = ParamStore::<f64>::new();
        let ad = LoraAdapter::add(
            &mut store,
            "l",
            Tensor::from_f64(&[1, 1], &[a]).unwrap(),
            Tensor::from_f64(&[1, 1], &[b]).unwrap(),
            Some(Tensor::from_f64(&[1], &[lambda]).unwrap()),
            Activation::Tanh,
            ParamRole::Other,
        )
        .unwrap();
        let mut t = Tape::inference();
        let xv = t.constant(Tensor::from_f64(&[1, 1], &[x]).unwrap());
        let y = ad.forward(&mut t, &store, xv).unwrap();
        t.value(y).data()[0]
    }

    #[test]
    fn lora_scalar_evaluation() {
        let y = scalar_lora(0.1, 2.0, 3.0, 0.25);
        assert!((y - (0.1 + 3.0 * 0.5f64.tanh())).abs() < 1e-15);
        assert!((y - 1.4864).abs() < 1e-4);
        assert_eq!(scalar_lora(0.7, 2.0, 0.0, 5.0), 0.7);
        assert_eq!(scalar_lora(0.7, 2.0, 3.0, 0.0), 0.7);
    }

    #[test]
    fn lora_rejects_mismatched_shapes() {
        let mut s = ParamStore::<f64>::new();
        let r = LoraAdapter::add(&mut s, "l", Tensor::zeros(&[4, 2]), Tensor::zeros(&[3, 4]), None, Activation::Tanh, ParamRole::Other);
        assert!(r.is_err());
    }

    fn ddlerp_with(lambda: f64, a: &[f64], b: &[f64]) -> Vec<f64> {
        let d = a.len();
        let mut t = Tape::<f64>::inference();
        let av = t.constant(Tensor::from_f64(&[1, d], a).unwrap());
        let bv = t.constant(Tensor::from_f64(&[1, d], b).unwrap());
        let mu = t.constant(Tensor::randn(&[d], 1.0, &mut rng(1)));
        let la = t.constant(Tensor::randn(&[d, 2], 1.0, &mut rng(2)));
        let lb = t.constant(Tensor::zeros(&[2, d]));
        let bias = t.constant(Tensor::full(&[d], lambda));
        let y = ddlerp(&mut t, av, bv, mu, (la, lb, Some(bias), Activation::Tanh)).unwrap();
        t.value(y).data().to_vec()
    }

    #[test]
    fn ddlerp_endpoints() {
        let a = [0.3, -1.7, 2.5];
        let b = [1.1, 0.4, -0.9];
        assert_eq!(ddlerp_with(0.0, &a, &b), a);
        let full = ddlerp_with(1.0, &a, &b);
        assert!(full.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15));
        assert_eq!(ddlerp_with(0.6, &a, &a), a);
    }

    #[test]
    fn token_shift_examples() {
        let x = Tensor::<f64>::from_f64(&[3, 1], &[1., 2., 3.]).unwrap();
        assert_eq!(tokenshift_prev(&x).unwrap().data(), &[0., 1., 2.]);
        let x = Tensor::<f64>::from_f64(&[1, 2], &[5., 6.]).unwrap();
        assert_eq!(tokenshift_prev(&x).unwrap().data(), &[0., 0.]);
    }

    #[test]
    fn token_shift_with_carry_matches_batch_form() {
        let x = Tensor::<f64>::randn(&[1, 6, 3], 1.0, &mut rng(3));
        let full = tokenshift_prev(&x.clone().reshape(&[6, 3]).unwrap()).unwrap();
        let mut prev = Tensor::zeros(&[1, 3]);
        for step in 0..6 {
            let row = Tensor::new(&[1, 1, 3], x.data()[step * 3..step * 3 + 3].to_vec()).unwrap();
            let mut t = Tape::inference();
            let v = t.constant(row.clone());
            let s = token_shift(&mut t, v, Some(&prev)).unwrap();
            assert_eq!(t.value(s).data(), &full.data()[step * 3..step * 3 + 3]);
            prev = row.reshape(&[1, 3]).unwrap();
        }
    }

    fn rope_of(x: &Tensor<f64>, cfg: &RopeConfig, off: usize) -> Tensor<f64> {
        let mut t = Tape::inference();
        let v = t.constant(x.clone());
        let y = rope_apply(&mut t, v, cfg, off).unwrap();
        t.take_value(y)
    }

    #[test]
    fn rope_rotation_example() {
        // d = 2 makes θ = pos regardless of base.
        let cfg = RopeConfig::new(2, true);
        let x = Tensor::from_f64(&[2, 2], &[1., 0., 1., 0.]).unwrap();
        let y = rope_of(&x, &cfg, 0);
        assert_eq!(&y.data()[..2], &[1., 0.]);
        assert!((y.data()[2] - 1f64.cos()).abs() < 1e-15);
        assert!((y.data()[3] - 1f64.sin()).abs() < 1e-15);
        assert!((y.data()[2] - 0.5403).abs() < 1e-4 && (y.data()[3] - 0.8415).abs() < 1e-4);
    }

    #[test]
    fn rope_rejects_odd_head_dim_and_disabled_is_identity() {
        let x = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng(0));
        let mut t = Tape::inference();
        let v = t.constant(x.clone());
        assert!(rope_apply(&mut t, v, &RopeConfig::new(3, true), 0).is_err());
        assert_eq!(rope_of(&x, &RopeConfig::new(3, false), 5), x);
    }

    #[test]
    fn rope_preserves_norm_and_composes_offsets() {
        let cfg = RopeConfig::new(8, true);
        let x = Tensor::<f64>::randn(&[5, 16], 1.0, &mut rng(4));
        let y = rope_of(&x, &cfg, 3);
        for (xr, yr) in x.data().chunks(8).zip(y.data().chunks(8)) {
            let n = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n(xr) - n(yr)).abs() < 1e-12);
        }
        // Row t at offset p equals row t + p at offset 0.
        let long = Tensor::<f64>::randn(&[1, 16], 1.0, &mut rng(5));
        let mut padded = vec![0.0; 4 * 16];
        padded.extend_from_slice(long.data());
        let at_zero = rope_of(&Tensor::new(&[5, 16], padded).unwrap(), &cfg, 0);
        let at_four = rope_of(&long, &cfg, 4);
        assert!(at_four.data().iter().zip(&at_zero.data()[64..]).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    fn attend(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, layout: HeadLayout) -> Tensor<f64> {
        let mut t = Tape::inference();
        let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let o = softmax_attention_gqa(&mut t, qv, kv, vv, layout, true).unwrap();
        t.take_value(o)
    }

    #[test]
    fn attention_single_step_returns_v() {
        let l = HeadLayout { n_q: 2, n_kv: 2, head_dim: 3 };
        let q = Tensor::randn(&[1, 1, 6], 1.0, &mut rng(1));
        let k = Tensor::randn(&[1, 1, 6], 1.0, &mut rng(2));
        let v = Tensor::randn(&[1, 1, 6], 1.0, &mut rng(3));
        assert!(attend(&q, &k, &v, l).max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn attention_identical_keys_average_prefix() {
        let l = HeadLayout { n_q: 1, n_kv: 1, head_dim: 2 };
        let q = Tensor::randn(&[1, 3, 2], 1.0, &mut rng(1));
        let k = Tensor::from_f64(&[1, 3, 2], &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        let v = Tensor::from_f64(&[1, 3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let o = attend(&q, &k, &v, l);
        let want = [1., 2., 2., 3., 3., 4.];
        assert!(o.data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn gqa_matches_materialized_duplicates() {
        let q = Tensor::randn(&[2, 5, 8], 1.0, &mut rng(1));
        let k = Tensor::randn(&[2, 5, 4], 1.0, &mut rng(2));
        let v = Tensor::randn(&[2, 5, 4], 1.0, &mut rng(3));
        let grouped = attend(&q, &k, &v, HeadLayout { n_q: 2, n_kv: 1, head_dim: 4 });
        let dup = |x: &Tensor<f64>| {
            let d = crate::ops::repeat_heads_data(x.data(), 10, 1, 2, 4);
            Tensor::new(&[2, 5, 8], d).unwrap()
        };
        let full = attend(&q, &dup(&k), &dup(&v), HeadLayout { n_q: 2, n_kv: 2, head_dim: 4 });
        assert_eq!(grouped.max_abs_diff(&full), 0.0);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut t = Tape::<f64>::inference();
        let q = t.constant(Tensor::zeros(&[1, 1, 6]));
        let k = t.constant(Tensor::zeros(&[1, 1, 4]));
        let l = HeadLayout { n_q: 3, n_kv: 2, head_dim: 2 };
        assert!(softmax_attention_gqa(&mut t, q, k, k, l, true).is_err());
    }

    #[test]
    fn cached_attention_matches_full_last_row() {
        let l = HeadLayout { n_q: 4, n_kv: 2, head_dim: 3 };
        let q = Tensor::randn(&[1, 6, 12], 1.0, &mut rng(1));
        let k = Tensor::randn(&[1, 6, 6], 1.0, &mut rng(2));
        let v = Tensor::randn(&[1, 6, 6], 1.0, &mut rng(3));
        let full = attend(&q, &k, &v, l);
        let mut out = vec![0.0; 12];
        let mut scratch = Vec::new();
        softmax_attention_cached(&q.data()[60..], k.data(), v.data(), 6, l, &mut scratch, &mut out);
        assert!(out.iter().zip(&full.data()[60..]).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn primitives_pass_gradient_check() {
        let mut s = ParamStore::<f64>::new();
        let mut r = rng(7);
        let x = s.add("x", Tensor::randn(&[2, 4, 8], 1.0, &mut r), ParamGroup::Main, ParamRole::Other).unwrap();
        let k = s.add("k", Tensor::randn(&[2, 4, 4], 1.0, &mut r), ParamGroup::Main, ParamRole::Other).unwrap();
        let v = s.add("v", Tensor::randn(&[2, 4, 4], 1.0, &mut r), ParamGroup::Main, ParamRole::Other).unwrap();
        let mu = s.add("mu", Tensor::randn(&[8], 0.5, &mut r), ParamGroup::Main, ParamRole::Other).unwrap();
        let ad = LoraAdapter::add(
            &mut s,
            "ad",
            Tensor::randn(&[8, 3], 0.5, &mut r),
            Tensor::randn(&[3, 8], 0.5, &mut r),
            Some(Tensor::randn(&[8], 0.5, &mut r)),
            Activation::Tanh,
            ParamRole::TokenShift,
        )
        .unwrap();
        let cfg = RopeConfig::new(4, true);
        let layout = HeadLayout { n_q: 2, n_kv: 1, head_dim: 4 };
        let rep = grad_check(
            &mut s,
            |t, s| {
                let xv = t.param(s, x);
                let prev = token_shift(t, xv, None)?;
                let muv = t.param(s, mu);
                let (a, b) = (t.param(s, ad.a), t.param(s, ad.b));
                let bias = t.param(s, ad.bias.unwrap());
                let mixed = ddlerp(t, xv, prev, muv, (a, b, Some(bias), Activation::Tanh))?;
                let q = rope_apply(t, mixed, &cfg, 2)?;
                let kv = t.param(s, k);
                let kv = rope_apply(t, kv, &cfg, 2)?;
                let vv = t.param(s, v);
                let o = softmax_attention_gqa(t, q, kv, vv, layout, true)?;
                let w = t.constant(Tensor::randn(&[2, 4, 8], 1.0, &mut rng(99)));
                let p = t.mul(o, w)?;
                Ok(t.sum_all(p))
            },
            1e-5,
            250,
            1,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
