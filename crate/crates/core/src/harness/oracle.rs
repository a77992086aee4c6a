//! Randomized self-checks of the recurrent kernels against their reference forms,
//! plus range checks of the decay and gate values the RAD mixers produce.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::Result;
use crate::mixers::linatt::{linatt_parallel, LN_EPS};
use crate::mixers::rwkv6::rad_rwkv6_prepare;
use crate::mixers::rwkv7::{decay_scale, rad_rwkv7_prepare};
use crate::mixers::wkv::{attention_matrix_oracle, wkv6_parallel, wkv6_scan, wkv7_parallel, wkv7_scan, Transition};
use crate::mixers::{Mixer, MixerConfig, MixerKind, MixerParams};
use crate::ops::layer_norm_heads;
use crate::param::ParamStore;
use crate::tensor::{Element, Tensor};

pub const SEQ_LENS: [usize; 4] = [1, 2, 8, 64];
pub const WIDTHS: [usize; 2] = [8, 32];
pub const HEADS: [usize; 2] = [1, 4];

pub const TOL_F64: f64 = 1e-10;
pub const TOL_F32: f64 = 1e-4;
pub const TOL_ORACLE: f64 = 1e-8;

/// Lower end of the RAD-RWKV6 decay, `exp(-5)`.
pub const RWKV6_W_FLOOR: f64 = 6.737_946_999_085_467e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Wkv6,
    Wkv7,
    LinAtt,
}

/// Worst case over all shapes for one kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelCheck {
    pub kernel: Kernel,
    pub max_diff_f64: f64,
    pub max_diff_f32: f64,
    pub cases: usize,
}

impl KernelCheck {
    pub fn passed(&self) -> bool {
        self.max_diff_f64 <= TOL_F64 && self.max_diff_f32 <= TOL_F32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    /// Worst output difference for `G = diag(w)`.
    pub diag: f64,
    /// Worst output difference for `G = diag(w) − κᵀ(a⊙κ)`.
    pub removal: f64,
    pub cases: usize,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.diag <= TOL_ORACLE && self.removal <= TOL_ORACLE
    }
}

/// Observed extremes over all draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeCheck {
    pub draws: usize,
    pub rwkv6_w: (f64, f64),
    pub rwkv7_w: (f64, f64),
    pub rwkv7_a: (f64, f64),
    /// Largest `|‖κ‖ − 1|` over rows whose key is not zero.
    pub kappa_norm_err: f64,
    /// Rows whose key was exactly zero (so `κ = 0`).
    pub kappa_zero_rows: usize,
    /// Rows where a zero key did not produce a zero κ.
    pub kappa_bad_zero: usize,
}

impl RangeCheck {
    pub fn passed(&self) -> bool {
        let w7_lo = (-decay_scale()).exp();
        self.rwkv6_w.0 >= RWKV6_W_FLOOR * (1.0 - 1e-12)
            && self.rwkv6_w.1 < 1.0
            && self.rwkv7_w.0 > w7_lo
            && self.rwkv7_w.1 < 1.0
            && self.rwkv7_a.0 > 0.0
            && self.rwkv7_a.1 < 1.0
            && self.kappa_norm_err <= 1e-6
            && self.kappa_bad_zero == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub kernels: Vec<KernelCheck>,
    pub oracle: OracleCheck,
    pub ranges: RangeCheck,
}

impl OracleSummary {
    pub fn passed(&self) -> bool {
        self.kernels.iter().all(KernelCheck::passed) && self.oracle.passed() && self.ranges.passed()
    }
}

/// Runs every check with inputs drawn from `seed`.
pub fn oracle_suite(seed: u64, range_draws: usize) -> Result<OracleSummary> {
    let kernels = [Kernel::Wkv6, Kernel::Wkv7, Kernel::LinAtt]
        .into_iter()
        .map(|k| check_kernel(k, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleSummary { kernels, oracle: check_oracle(seed)?, ranges: check_ranges(seed, range_draws)? })
}

/// One random problem in f64; cast down for the f32 run.
struct Instance {
    t: usize,
    width: usize,
    heads: usize,
    r: Tensor<f64>,
    k: Tensor<f64>,
    v: Tensor<f64>,
    w: Tensor<f64>,
    kappa: Tensor<f64>,
    a: Tensor<f64>,
    gamma: Tensor<f64>,
    beta: Tensor<f64>,
}

impl Instance {
    fn draw(t: usize, width: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = t * width;
        let hd = width / heads;
        let normal = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
        let scale = 1.0 / (hd as f64).sqrt();
        let r: Vec<f64> = normal(rng, n).into_iter().map(|x| x * scale).collect();
        let k: Vec<f64> = normal(rng, n).into_iter().map(|x| x * scale).collect();
        let v = normal(rng, n);
        // Decays cover the RWKV7 interval and the lower RWKV6 range.
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(RWKV6_W_FLOOR..1.0)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut kappa = normal(rng, n);
        for row in kappa.chunks_mut(hd) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let gamma: Vec<f64> = (0..width).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta = normal(rng, width).into_iter().map(|x| 0.1 * x).collect();
        let sh = [t, width];
        Ok(Instance {
            t,
            width,
            heads,
            r: Tensor::new(&sh, r)?,
            k: Tensor::new(&sh, k)?,
            v: Tensor::new(&sh, v)?,
            w: Tensor::new(&sh, w)?,
            kappa: Tensor::new(&sh, kappa)?,
            a: Tensor::new(&sh, a)?,
            gamma: Tensor::new(&[width], gamma)?,
            beta: Tensor::new(&[width], beta)?,
        })
    }
}

fn cases(seed: u64, salt: u64) -> Result<Vec<Instance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    let mut out = Vec::new();
    for &t in &SEQ_LENS {
        for &width in &WIDTHS {
            for &heads in &HEADS {
                out.push(Instance::draw(t, width, heads, &mut rng)?);
            }
        }
    }
    Ok(out)
}

fn batched<T: Element>(x: &Tensor<f64>) -> Result<Tensor<T>> {
    let s = x.shape();
    x.cast::<T>().reshape(&[1, s[0], s[1]])
}

/// Recurrent output of `kernel` flattened to `[T, H·d]`.
fn recurrent<T: Element>(kernel: Kernel, p: &Instance) -> Result<Tensor<T>> {
    let mut tape = Tape::<T>::inference();
    let c = |tape: &mut Tape<T>, x: &Tensor<f64>| batched::<T>(x).map(|x| tape.constant(x));
    let (r, k, v) = (c(&mut tape, &p.r)?, c(&mut tape, &p.k)?, c(&mut tape, &p.v)?);
    let out = match kernel {
        Kernel::Wkv6 => {
            let w = c(&mut tape, &p.w)?;
            wkv6_scan(&mut tape, r, k, v, Some(w), p.heads, None)?
        }
        Kernel::Wkv7 => {
            let (w, kappa, a) = (c(&mut tape, &p.w)?, c(&mut tape, &p.kappa)?, c(&mut tape, &p.a)?);
            wkv7_scan(&mut tape, r, w, k, kappa, a, v, p.heads, None)?
        }
        Kernel::LinAtt => {
            let raw = wkv6_scan(&mut tape, r, k, v, None, p.heads, None)?;
            let g = tape.constant(p.gamma.cast::<T>());
            let b = tape.constant(p.beta.cast::<T>());
            layer_norm_heads(&mut tape, raw, g, b, p.width / p.heads, LN_EPS)?
        }
    };
    tape.take_value(out).reshape(&[p.t, p.width])
}

fn parallel<T: Element>(kernel: Kernel, p: &Instance) -> Result<Tensor<T>> {
    let c = |x: &Tensor<f64>| x.cast::<T>();
    match kernel {
        Kernel::Wkv6 => wkv6_parallel(&c(&p.w), &c(&p.k), &c(&p.v), &c(&p.r), p.heads),
        Kernel::Wkv7 => wkv7_parallel(&c(&p.w), &c(&p.k), &c(&p.kappa), &c(&p.a), &c(&p.v), &c(&p.r), p.heads),
        Kernel::LinAtt => linatt_parallel(&c(&p.r), &c(&p.k), &c(&p.v), &c(&p.gamma), &c(&p.beta), p.heads),
    }
}

/// Recurrent against reference form over every shape, in both precisions.
pub fn check_kernel(kernel: Kernel, seed: u64) -> Result<KernelCheck> {
    let insts = cases(seed, kernel as u64 + 1)?;
    let (mut d64, mut d32) = (0f64, 0f64);
    for p in &insts {
        d64 = d64.max(recurrent::<f64>(kernel, p)?.max_abs_diff(&parallel::<f64>(kernel, p)?));
        d32 = d32.max(recurrent::<f32>(kernel, p)?.max_abs_diff(&parallel::<f32>(kernel, p)?));
    }
    Ok(KernelCheck { kernel, max_diff_f64: d64, max_diff_f32: d32, cases: insts.len() })
}

/// Materialized attention matrix against the recurrent kernels, in f64.
pub fn check_oracle(seed: u64) -> Result<OracleCheck> {
    let insts = cases(seed, 0x0_5eed)?;
    let (mut diag, mut removal) = (0f64, 0f64);
    for p in &insts {
        let o = attention_matrix_oracle(Transition::Diag { w: &p.w }, &p.r, &p.k, &p.v, p.heads)?;
        diag = diag.max(o.output.max_abs_diff(&recurrent::<f64>(Kernel::Wkv6, p)?));
        let t = Transition::DiagMinusRemoval { w: &p.w, kappa: &p.kappa, a: &p.a };
        let o = attention_matrix_oracle(t, &p.r, &p.k, &p.v, p.heads)?;
        removal = removal.max(o.output.max_abs_diff(&recurrent::<f64>(Kernel::Wkv7, p)?));
    }
    Ok(OracleCheck { diag, removal, cases: insts.len() })
}

const RANGE_WIDTH: usize = 32;
const RANGE_HEADS: usize = 4;
const RANGE_ROWS: usize = 50;

/// Fresh mixer of `kind` with every parameter jittered by a random amount.
fn random_mixer(kind: MixerKind, layer: usize, rng: &mut ChaCha8Rng) -> Result<(ParamStore<f64>, Mixer)> {
    let mut store = ParamStore::new();
    let mut cfg = MixerConfig::new(kind, RANGE_WIDTH, RANGE_HEADS, RANGE_HEADS / 2, layer);
    cfg.lora_rank = 4;
    let m = Mixer::init(&mut store, "m", cfg, rng)?;
    let jitter: f64 = rng.random_range(0.0..0.5);
    for p in store.iter_mut() {
        for x in p.value.data_mut() {
            *x += jitter * { let z: f64 = StandardNormal.sample(rng); z };
        }
    }
    Ok((store, m))
}

/// Draws random mixers and inputs, `draws` rows in total per mixer kind.
pub fn check_ranges(seed: u64, draws: usize) -> Result<RangeCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a46e);
    let mut out = RangeCheck {
        draws: 0,
        rwkv6_w: (f64::INFINITY, f64::NEG_INFINITY),
        rwkv7_w: (f64::INFINITY, f64::NEG_INFINITY),
        rwkv7_a: (f64::INFINITY, f64::NEG_INFINITY),
        kappa_norm_err: 0.0,
        kappa_zero_rows: 0,
        kappa_bad_zero: 0,
    };
    let span = |acc: &mut (f64, f64), xs: &[f64]| {
        for &x in xs {
            acc.0 = acc.0.min(x);
            acc.1 = acc.1.max(x);
        }
    };
    let hd = RANGE_WIDTH / RANGE_HEADS;
    while out.draws < draws {
        let rows = RANGE_ROWS.min(draws - out.draws);
        // Mixer inputs are RMS-normalized, so entries are O(1).
        let scale = 2f64.powf(rng.random_range(-1.0..1.0));
        let mut x: Vec<f64> = (0..rows * RANGE_WIDTH).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z }).collect();
        // An all-zero row gives a zero key, which must map to κ = 0.
        if rng.random_bool(0.2) {
            x[..RANGE_WIDTH].fill(0.0);
        }
        let x = Tensor::new(&[1, rows, RANGE_WIDTH], x)?;

        let (store, m) = random_mixer(MixerKind::RadRwkv6, 0, &mut rng)?;
        let MixerParams::Rwkv6(p) = &m.params else { unreachable!() };
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let it = rad_rwkv6_prepare(&mut tape, &store, p, &m.cfg, xv, None, 0)?;
        span(&mut out.rwkv6_w, tape.value(it.w).data());

        let (store, m) = random_mixer(MixerKind::RadRwkv7, 0, &mut rng)?;
        let MixerParams::Rwkv7(p) = &m.params else { unreachable!() };
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let it = rad_rwkv7_prepare(&mut tape, &store, p, &m.cfg, xv, None, 0)?;
        span(&mut out.rwkv7_w, tape.value(it.w).data());
        span(&mut out.rwkv7_a, tape.value(it.a).data());
        let (k, kappa) = (tape.value(it.k).data(), tape.value(it.kappa).data());
        for (kr, cr) in k.chunks(hd).zip(kappa.chunks(hd)) {
            let n = cr.iter().map(|c| c * c).sum::<f64>().sqrt();
            if kr.iter().all(|&c| c == 0.0) {
                out.kappa_zero_rows += 1;
                if n != 0.0 {
                    out.kappa_bad_zero += 1;
                }
            } else {
                out.kappa_norm_err = out.kappa_norm_err.max((n - 1.0).abs());
            }
        }
        out.draws += rows;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_constant() {
        assert_eq!(RWKV6_W_FLOOR, (-5f64).exp());
        assert!(((-decay_scale()).exp() - 0.5452).abs() < 1e-4);
    }

    #[test]
    fn small_suite_passes() {
        let s = oracle_suite(3, 500).unwrap();
        for k in &s.kernels {
            assert!(k.passed(), "{k:?}");
            assert_eq!(k.cases, 16);
        }
        assert!(s.oracle.passed(), "{:?}", s.oracle);
        assert!(s.ranges.passed(), "{:?}", s.ranges);
        assert!(s.ranges.kappa_zero_rows > 0);
    }
}
