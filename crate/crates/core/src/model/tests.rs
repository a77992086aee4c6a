use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::primitives::DdlerpTarget;

fn small(kind: MixerKind) -> ModelSpec {
    ModelSpec {
        n_layers: 3,
        d_model: 32,
        n_q_heads: 4,
        n_kv_heads: 2,
        d_head: 8,
        vocab_size: 256,
        mlp_hidden: 64,
        mixer_kind: kind,
        rope: None,
        rope_base: 10000.0,
        lora_rank: 8,
        tied_embeddings: false,
    }
}

fn tokens(n: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..256)).collect()
}

fn mean_ce(logits: &Tensor<f64>, targets: &[u32]) -> f64 {
    let v = logits.last_dim();
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
    }
    total / targets.len() as f64
}

#[test]
fn spec_validation() {
    let mut s = small(MixerKind::Softmax);
    assert!(s.validate().is_ok());
    s.tied_embeddings = true;
    assert!(s.validate().is_err());
    let mut s = small(MixerKind::Softmax);
    s.n_kv_heads = 3;
    assert!(s.validate().is_err());
    let mut s = small(MixerKind::Softmax);
    s.d_head = 7;
    assert!(s.validate().is_err());
    assert!(ModelSpec::toy_teacher().validate().is_ok());
}

#[test]
fn spec_json_round_trip() {
    let s = small(MixerKind::RadRwkv7);
    let j = serde_json::to_string(&s).unwrap();
    assert!(j.contains("rad_rwkv7"));
    assert_eq!(serde_json::from_str::<ModelSpec>(&j).unwrap(), s);
}

#[test]
fn teacher_is_deterministic() {
    let a = build_teacher::<f64>(&small(MixerKind::Softmax), 5).unwrap();
    let b = build_teacher::<f64>(&small(MixerKind::Softmax), 5).unwrap();
    for (p, q) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(p.name, q.name);
        assert_eq!(p.value, q.value);
    }
    let c = build_teacher::<f64>(&small(MixerKind::Softmax), 6).unwrap();
    assert_ne!(a.store.value(a.embed), c.store.value(c.embed));
    assert!(build_teacher::<f64>(&small(MixerKind::RadRwkv6), 5).is_err());
}

#[test]
fn logits_shape_and_out_of_range() {
    let m = build_teacher::<f32>(&small(MixerKind::Softmax), 1).unwrap();
    let l = m.logits(&[1, 2, 3, 4], 1).unwrap();
    assert_eq!(l.shape(), &[1, 4, 256]);
    assert!(m.logits(&[1, 256], 1).is_err());
    let one = m.logits(&[7], 1).unwrap();
    assert!(one.all_finite());
}

#[test]
fn untrained_ce_near_uniform() {
    let spec = ModelSpec::toy_teacher();
    let m = build_teacher::<f64>(&spec, 3).unwrap();
    let ids = tokens(257, 11);
    let l = m.logits(&ids[..256], 1).unwrap();
    let ce = mean_ce(&l, &ids[1..]);
    let target = (256f64).ln();
    assert!((ce - target).abs() / target < 0.05, "ce {ce} vs {target}");
}

#[test]
fn student_forward_deterministic() {
    for kind in [MixerKind::RadRwkv6, MixerKind::RadRwkv7, MixerKind::LinAtt] {
        let t = build_teacher::<f32>(&small(MixerKind::Softmax), 1).unwrap();
        let s = build_student(&t, &small(kind), 2).unwrap();
        let ids = tokens(12, 4);
        assert_eq!(s.logits(&ids, 2).unwrap(), s.logits(&ids, 2).unwrap());
    }
}

#[test]
fn transfer_copies_non_mixer_weights_exactly() {
    let t = build_teacher::<f32>(&small(MixerKind::Softmax), 1).unwrap();
    for kind in [MixerKind::RadRwkv6, MixerKind::RadRwkv7, MixerKind::LinAtt, MixerKind::Softmax] {
        let s = build_student(&t, &small(kind), 9).unwrap();
        for p in t.store.iter().filter(|p| !Model::<f32>::is_mixer_param(&p.name)) {
            assert_eq!(&s.store.by_name(&p.name).unwrap().value, &p.value, "{}", p.name);
        }
        for (own, theirs) in Mixer::transfer_map(kind) {
            let a = s.store.by_name(&format!("layers.1.mixer.{own}")).unwrap();
            let b = t.store.by_name(&format!("layers.1.mixer.{theirs}")).unwrap();
            assert_eq!(a.value, b.value);
        }
        let (_, other_s) = s.param_counts();
        let (_, other_t) = t.param_counts();
        assert_eq!(other_s, other_t);
    }
}

#[test]
fn de_novo_keeps_skeleton_but_not_projections() {
    let t = build_teacher::<f32>(&small(MixerKind::Softmax), 1).unwrap();
    let s = transfer_attention_weights(&t, &small(MixerKind::RadRwkv6), TransferMode::DeNovo, 9).unwrap();
    assert_eq!(s.store.by_name("layers.0.mlp.w_up").unwrap().value, t.store.by_name("layers.0.mlp.w_up").unwrap().value);
    assert_ne!(s.store.by_name("layers.0.mixer.w_r").unwrap().value, t.store.by_name("layers.0.mixer.w_q").unwrap().value);
}

#[test]
fn transfer_rejects_mismatched_layout() {
    let t = build_teacher::<f32>(&small(MixerKind::Softmax), 1).unwrap();
    let mut s = small(MixerKind::RadRwkv6);
    s.n_kv_heads = 4;
    assert!(transfer_attention_weights(&t, &s, TransferMode::Teacher, 1).is_err());
}

#[test]
fn mlp_equal_after_transfer() {
    let t = build_teacher::<f32>(&small(MixerKind::Softmax), 1).unwrap();
    let s = build_student(&t, &small(MixerKind::RadRwkv7), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = Tensor::<f32>::randn(&[1, 5, 32], 1.0, &mut rng);
    let run = |m: &Model<f32>| {
        let mut tape = Tape::inference();
        let x = tape.constant(h.clone());
        let y = m.mlp_block(&mut tape, &m.store, &m.layers[1], x).unwrap();
        tape.take_value(y)
    };
    assert_eq!(run(&t), run(&s));
}

#[test]
fn ddlerp_is_identity_after_transfer() {
    let t = build_teacher::<f32>(&small(MixerKind::Softmax), 1).unwrap();
    let s = build_student(&t, &small(MixerKind::RadRwkv6), 2).unwrap();
    let crate::mixers::MixerParams::Rwkv6(p) = &s.layers[0].mixer.params else { panic!() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn(&[1, 6, 32], 1.0, &mut rng);
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let prev = crate::primitives::token_shift(&mut tape, xv, None).unwrap();
    for target in DdlerpTarget::ALL {
        let y = p.ddlerp.apply(&mut tape, &s.store, target, xv, prev).unwrap();
        assert_eq!(tape.value(y), &x);
    }
}

#[test]
fn alignment_keeps_teacher_logits_and_freezes_teacher() {
    let t = build_teacher::<f64>(&small(MixerKind::Softmax), 1).unwrap();
    let s = build_student(&t, &small(MixerKind::RadRwkv7), 2).unwrap();
    let al = AlignmentModel::new(&t, s).unwrap();
    let ids = tokens(10, 3);
    let mut tape = Tape::new();
    let out = al.forward(&mut tape, &ids, 2).unwrap();
    assert_eq!(tape.value(out.teacher_logits), &t.logits(&ids, 2).unwrap());

    let mut loss = None;
    for l in &out.layers {
        let d = tape.sub(l.student_out, l.teacher_out).unwrap();
        let sq = tape.square(d);
        let s = tape.sum_all(sq);
        loss = Some(match loss { None => s, Some(a) => tape.add(a, s).unwrap() });
    }
    let loss = loss.unwrap();
    let mut al = al;
    al.teacher.store.zero_grads();
    tape.backward(loss, &mut al.teacher.store).unwrap();
    assert!(al.teacher.store.iter().all(|p| p.grad.data().iter().all(|g| *g == 0.0)));
    tape.backward(loss, &mut al.student.store).unwrap();
    let moved = al.student.store.iter().filter(|p| p.grad.data().iter().any(|g| *g != 0.0)).count();
    assert!(moved > 0);
    assert!(al
        .student
        .store
        .iter()
        .filter(|p| !Model::<f64>::is_mixer_param(&p.name))
        .all(|p| p.grad.data().iter().all(|g| *g == 0.0)));
}

#[test]
fn softmax_self_alignment_is_exact() {
    let t = build_teacher::<f64>(&small(MixerKind::Softmax), 1).unwrap();
    let s = build_student(&t, &small(MixerKind::Softmax), 2).unwrap();
    let al = AlignmentModel::new(&t, s).unwrap();
    let mut tape = Tape::inference();
    let out = al.forward(&mut tape, &tokens(8, 1), 1).unwrap();
    for l in &out.layers {
        assert_eq!(tape.value(l.student_out), tape.value(l.teacher_out));
    }
}

#[test]
fn alignment_rejects_layer_mismatch() {
    let t = build_teacher::<f64>(&small(MixerKind::Softmax), 1).unwrap();
    let mut spec = small(MixerKind::RadRwkv6);
    spec.n_layers = 2;
    let s = Model::<f64>::init(spec, 1).unwrap();
    assert!(AlignmentModel::new(&t, s).is_err());
}

#[test]
fn rwkv7_layer0_ignores_nu() {
    let t = build_teacher::<f64>(&small(MixerKind::Softmax), 1).unwrap();
    let s = build_student(&t, &small(MixerKind::RadRwkv7), 2).unwrap();
    assert!(s.store.names().all(|n| !n.starts_with("layers.0.mixer.lora_nu")));
    assert!(s.store.names().any(|n| n.starts_with("layers.1.mixer.lora_nu")));
}

#[test]
fn incremental_decode_matches_full_forward() {
    let t = build_teacher::<f32>(&small(MixerKind::Softmax), 1).unwrap();
    let ids = tokens(2 * 9, 8);
    for kind in [MixerKind::Softmax, MixerKind::RadRwkv6, MixerKind::RadRwkv7, MixerKind::LinAtt] {
        let m = build_student(&t, &small(kind), 2).unwrap();
        let full = m.logits(&ids, 2).unwrap();
        let mut st = m.fresh_state(2);
        let mut chunks = Vec::new();
        let mut pos = 0;
        for len in [4, 1, 1, 3] {
            let chunk: Vec<u32> = (0..2).flat_map(|b| ids[b * 9 + pos..b * 9 + pos + len].to_vec()).collect();
            chunks.push((pos, len, m.decode(&chunk, &mut st).unwrap()));
            pos += len;
        }
        assert_eq!(st.pos(), 9);
        let v = 256;
        let mut worst = 0f32;
        for (pos, len, l) in chunks {
            for b in 0..2 {
                for i in 0..len {
                    let a = &l.data()[(b * len + i) * v..(b * len + i + 1) * v];
                    let f = &full.data()[(b * 9 + pos + i) * v..(b * 9 + pos + i + 1) * v];
                    for (x, y) in a.iter().zip(f) {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
        assert!(worst < 1e-4, "{kind}: {worst}");
        if kind.is_recurrent() {
            let mut st2 = m.fresh_state(2);
            let before = st2.footprint();
            m.decode(&ids[..2], &mut st2).unwrap();
            assert_eq!(st2.footprint(), before);
        }
    }
}
