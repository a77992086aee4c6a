use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::grad_check;
use crate::primitives::RopeConfig;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Replaces every parameter with random values so that no path is trivially zero.
fn randomize<T: Element>(store: &mut ParamStore<T>, seed: u64, std: f64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        p.value = Tensor::randn(p.value.shape(), std, &mut r);
    }
}

fn build(kind: MixerKind, d: usize, n_q: usize, n_kv: usize, layer: usize) -> (ParamStore<f64>, Mixer) {
    let mut store = ParamStore::new();
    let mut cfg = MixerConfig::new(kind, d, n_q, n_kv, layer);
    cfg.lora_rank = 3;
    let m = Mixer::init(&mut store, "m", cfg, &mut rng(11)).unwrap();
    (store, m)
}

fn run(store: &ParamStore<f64>, m: &Mixer, x: &Tensor<f64>, v0: Option<&Tensor<f64>>) -> (Tensor<f64>, Option<Tensor<f64>>) {
    let mut t = Tape::inference();
    let xv = t.constant(x.clone());
    let v0 = v0.map(|v| t.constant(v.clone()));
    let o = m.forward(&mut t, store, xv, None, v0).unwrap();
    (t.take_value(o.out), o.v0.map(|v| t.take_value(v)))
}

#[test]
fn kind_names_round_trip() {
    for k in [MixerKind::Softmax, MixerKind::RadRwkv6, MixerKind::RadRwkv7, MixerKind::LinAtt] {
        assert_eq!(k.name().parse::<MixerKind>().unwrap(), k);
    }
    assert!("mamba".parse::<MixerKind>().is_err());
}

#[test]
fn rope_defaults_per_mixer() {
    assert!(!MixerConfig::new(MixerKind::RadRwkv6, 8, 2, 2, 0).rope.enabled);
    assert!(MixerConfig::new(MixerKind::RadRwkv7, 8, 2, 2, 0).rope.enabled);
    assert!(MixerConfig::new(MixerKind::LinAtt, 8, 2, 2, 0).rope.enabled);
}

#[test]
fn invalid_head_layout_is_rejected() {
    let mut s = ParamStore::<f64>::new();
    let cfg = MixerConfig::new(MixerKind::RadRwkv6, 12, 3, 2, 0);
    assert!(Mixer::init(&mut s, "m", cfg, &mut rng(0)).is_err());
}

#[test]
fn decode_matches_full_sequence() {
    for kind in [MixerKind::Softmax, MixerKind::RadRwkv6, MixerKind::RadRwkv7, MixerKind::LinAtt] {
        for layer in [0, 1] {
            let (mut store, m) = build(kind, 8, 2, 1, layer);
            randomize(&mut store, 3, 0.4);
            let x = Tensor::randn(&[2, 7, 8], 1.0, &mut rng(4));
            let v0 = (kind == MixerKind::RadRwkv7 && layer > 0).then(|| Tensor::randn(&[2, 7, 8], 1.0, &mut rng(5)));
            let (full, _) = run(&store, &m, &x, v0.as_ref());
            let mut state = MixerState::fresh(&m.cfg, 2);
            let mut pieces = vec![0.0; full.numel()];
            // Chunks of 3, 1, 3 tokens.
            let mut start = 0;
            for len in [3, 1, 3] {
                let slice = |src: &Tensor<f64>| {
                    let mut data = Vec::new();
                    for b in 0..2 {
                        data.extend_from_slice(&src.data()[(b * 7 + start) * 8..(b * 7 + start + len) * 8]);
                    }
                    Tensor::new(&[2, len, 8], data).unwrap()
                };
                let mut t = Tape::inference();
                let xv = t.constant(slice(&x));
                let v0v = v0.as_ref().map(|v| t.constant(slice(v)));
                let o = m.forward(&mut t, &store, xv, Some(&mut state), v0v).unwrap();
                let od = t.value(o.out).data();
                for b in 0..2 {
                    pieces[(b * 7 + start) * 8..(b * 7 + start + len) * 8].copy_from_slice(&od[b * len * 8..(b + 1) * len * 8]);
                }
                start += len;
            }
            assert_eq!(state.pos, 7);
            let diff = full.max_abs_diff(&Tensor::new(full.shape(), pieces).unwrap());
            assert!(diff < 1e-12, "{kind} layer {layer}: {diff}");
        }
    }
}

#[test]
fn rwkv7_layer0_emits_value_precursor_and_later_layers_require_it() {
    let (store, m0) = build(MixerKind::RadRwkv7, 8, 2, 2, 0);
    let x = Tensor::randn(&[1, 3, 8], 1.0, &mut rng(1));
    let (_, v0) = run(&store, &m0, &x, None);
    assert_eq!(v0.unwrap().shape(), &[1, 3, 8]);
    let (store1, m1) = build(MixerKind::RadRwkv7, 8, 2, 2, 1);
    let mut t = Tape::inference();
    let xv = t.constant(x);
    assert!(m1.forward(&mut t, &store1, xv, None, None).is_err());
    assert!(store.by_name("m.lora_nu.a").is_none());
    assert!(store1.by_name("m.lora_nu.a").is_some());
}

#[test]
fn rwkv6_zero_adapters_reduce_to_linear_attention_over_projections() {
    let (mut store, m) = build(MixerKind::RadRwkv6, 8, 2, 2, 0);
    let MixerParams::Rwkv6(p) = m.params else { unreachable!() };
    // Gate forced to exactly 1 by a huge bias.
    store.get_mut(p.g_bias).value = Tensor::full(&[8], 1e3);
    let x = Tensor::randn(&[1, 5, 8], 1.0, &mut rng(2));
    let (out, _) = run(&store, &m, &x, None);

    let x2 = x.clone().reshape(&[5, 8]).unwrap();
    let r = x2.matmul(store.value(p.w_r)).unwrap().map(|v| v / 2.0);
    let kt = x2.matmul(store.value(p.w_k)).unwrap();
    let v = x2.matmul(store.value(p.w_v)).unwrap();
    let bias = store.value(p.lora_w.bias.unwrap());
    let w1: Vec<f64> = bias.data().iter().map(|&l| (-(l.exp())).max(-5.0).exp()).collect();
    let w = Tensor::new(&[5, 8], (0..5).flat_map(|_| w1.iter().copied()).collect()).unwrap();
    let k = Tensor::new(&[5, 8], kt.data().iter().zip(w.data()).map(|(k, w)| k * (1.0 - w) / 2.0).collect()).unwrap();
    let pv = wkv6_parallel(&w, &k, &v, &r, 2).unwrap();
    let want = pv.matmul(store.value(p.w_o)).unwrap();
    assert!(out.reshape(&[5, 8]).unwrap().max_abs_diff(&want) < 1e-12);
}

#[test]
fn initial_decays_span_the_documented_range() {
    let (store, m) = build(MixerKind::RadRwkv6, 8, 2, 2, 0);
    let MixerParams::Rwkv6(p) = m.params else { unreachable!() };
    let w: Vec<f64> = store.value(p.lora_w.bias.unwrap()).data().iter().map(|&l| (-(l.exp())).exp()).collect();
    assert!((w[0] - (-1f64).exp()).abs() < 1e-12 && (w[3] - 0.999).abs() < 1e-12);
    assert!((w[4] - w[0]).abs() < 1e-15);
}

fn mixer_gradcheck(kind: MixerKind, layer: usize, rope: bool) {
    let (mut store, m) = {
        let mut store = ParamStore::new();
        let mut cfg = MixerConfig::new(kind, 8, 2, 1, layer);
        cfg.lora_rank = 3;
        cfg.rope = RopeConfig::new(4, rope);
        let m = Mixer::init(&mut store, "m", cfg, &mut rng(11)).unwrap();
        (store, m)
    };
    randomize(&mut store, 21, 0.5);
    let mut r = rng(22);
    let x = store.add("x", Tensor::randn(&[2, 5, 8], 1.0, &mut r), ParamGroup::Main, ParamRole::Other).unwrap();
    let v0 = store.add("v0", Tensor::randn(&[2, 5, 8], 1.0, &mut r), ParamGroup::Main, ParamRole::Other).unwrap();
    let proj = Tensor::randn(&[2, 5, 8], 1.0, &mut r);
    let needs_v0 = kind == MixerKind::RadRwkv7 && layer > 0;
    let rep = grad_check(
        &mut store,
        |t, s| {
            let xv = t.param(s, x);
            let v0v = needs_v0.then(|| t.param(s, v0));
            let o = m.forward(t, s, xv, None, v0v)?;
            let pr = t.constant(proj.clone());
            let y = t.mul(o.out, pr)?;
            Ok(t.sum_all(y))
        },
        1e-5,
        400,
        5,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{kind} layer {layer} rope {rope}: {rep:?}");
}

#[test]
fn softmax_mixer_gradients() {
    mixer_gradcheck(MixerKind::Softmax, 0, true);
}

#[test]
fn rwkv6_gradients() {
    mixer_gradcheck(MixerKind::RadRwkv6, 0, false);
    mixer_gradcheck(MixerKind::RadRwkv6, 0, true);
}

#[test]
fn rwkv7_gradients() {
    mixer_gradcheck(MixerKind::RadRwkv7, 0, true);
    mixer_gradcheck(MixerKind::RadRwkv7, 2, true);
}

#[test]
fn linatt_gradients() {
    mixer_gradcheck(MixerKind::LinAtt, 0, true);
}
