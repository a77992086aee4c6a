mod common;

use proptest::prelude::*;
use radlads::harness::archive::{AnyTensor, Archive, ArchiveError};
use radlads::mixers::MixerKind;
use radlads::model::{build_student, build_teacher, Model, ModelSpec};
use radlads::tensor::Tensor;

fn golden_bytes() -> Vec<u8> {
    std::fs::read(common::fixture("golden_v1.radt")).unwrap()
}

#[test]
fn golden_fixture_parses() {
    let a = Archive::from_bytes(&golden_bytes()).unwrap();
    let names: Vec<&str> = a.entries.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["embed", "layers.0.mixer.w_r", "final_norm"]);
    match a.get("embed").unwrap() {
        AnyTensor::F32(t) => {
            assert_eq!(t.shape(), &[2, 3]);
            assert_eq!(t.data(), &[1.0, -2.0, 0.5, 3.25, 0.0, -0.125]);
        }
        other => panic!("embed decoded as {other:?}"),
    }
    match a.get("layers.0.mixer.w_r").unwrap() {
        AnyTensor::F64(t) => {
            assert_eq!(t.shape(), &[3]);
            assert_eq!(t.data()[0], 0.1);
            assert!(t.data()[1] == 0.0 && t.data()[1].is_sign_negative());
            assert_eq!(t.data()[2], 1e300);
        }
        other => panic!("w_r decoded as {other:?}"),
    }
    assert_eq!(a.get("final_norm").unwrap().to::<f64>().data(), &[7.0]);
    assert_eq!(a.to_bytes(), golden_bytes());
}

#[test]
fn golden_fixture_damage_is_reported() {
    let good = golden_bytes();
    for cut in [0, 3, 8, 11, 20, good.len() - 1] {
        assert!(matches!(Archive::from_bytes(&good[..cut]), Err(ArchiveError::Truncated { .. })), "cut at {cut}");
    }
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(Archive::from_bytes(&bad), Err(ArchiveError::BadMagic(_))));
    let mut bad = good.clone();
    bad[4] = 9;
    assert!(matches!(Archive::from_bytes(&bad), Err(ArchiveError::UnsupportedVersion(9))));
    let mut bad = good.clone();
    bad.push(0);
    assert!(matches!(Archive::from_bytes(&bad), Err(ArchiveError::TrailingBytes(1))));
}

#[test]
fn empty_archive_round_trips() {
    let a = Archive::new();
    let b = Archive::from_bytes(&a.to_bytes()).unwrap();
    assert!(b.is_empty());
}

fn small(kind: MixerKind) -> ModelSpec {
    ModelSpec {
        n_layers: 2,
        d_model: 16,
        n_q_heads: 2,
        n_kv_heads: 1,
        d_head: 8,
        mlp_hidden: 32,
        lora_rank: 3,
        ..ModelSpec::toy_teacher().with_mixer(kind)
    }
}

#[test]
fn model_round_trip_through_file_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let t = build_teacher::<f32>(&small(MixerKind::Softmax), 3).unwrap();
    for kind in [MixerKind::RadRwkv6, MixerKind::RadRwkv7, MixerKind::LinAtt] {
        let s = build_student(&t, &small(kind), 4).unwrap();
        let path = dir.path().join(format!("{kind}.radt"));
        Archive::from_store(&s.store).write(&path).unwrap();
        let mut back = Model::<f32>::init(small(kind), 99).unwrap();
        Archive::read(&path).unwrap().load_into(&mut back.store).unwrap();
        for (a, b) in s.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
        }
    }
}

#[test]
fn load_rejects_wrong_layout() {
    let t = build_teacher::<f64>(&small(MixerKind::Softmax), 3).unwrap();
    let a = Archive::from_store(&t.store);
    let mut s = Model::<f64>::init(small(MixerKind::RadRwkv7), 1).unwrap();
    assert!(matches!(a.load_into(&mut s.store), Err(ArchiveError::Missing(_))));
}

proptest! {
    #[test]
    fn random_archives_round_trip(
        entries in prop::collection::vec(
            (prop::collection::vec(1usize..4, 0..4), any::<bool>(), any::<u64>()),
            0..6,
        )
    ) {
        let mut a = Archive::new();
        for (i, (shape, wide, seed)) in entries.iter().enumerate() {
            let n: usize = shape.iter().product();
            let bits = (0..n as u64).map(|j| seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(j));
            let name = format!("t{i}");
            if *wide {
                let data: Vec<f64> = bits.map(f64::from_bits).collect();
                a.push(name, Tensor::new(shape, data).unwrap()).unwrap();
            } else {
                let data: Vec<f32> = bits.map(|b| f32::from_bits(b as u32)).collect();
                a.push(name, Tensor::new(shape, data).unwrap()).unwrap();
            }
        }
        let bytes = a.to_bytes();
        let b = Archive::from_bytes(&bytes).unwrap();
        prop_assert_eq!(b.to_bytes(), bytes);
        prop_assert_eq!(b.len(), a.len());
    }
}
