mod common;

use proptest::prelude::*;
use radlads::autograd::Tape;
use radlads::harness::config::RunConfig;
use radlads::harness::corpus::{Corpus, Sampler, Tokenizer};
use radlads::harness::eval::relative_score;
use radlads::mixers::wkv::{wkv6_parallel, wkv6_scan, wkv7_parallel, wkv7_scan};
use radlads::tensor::Tensor;
use radlads::train::{StepKind, TrainPlan};

fn corpus() -> Corpus {
    Corpus::from_file(&common::corpus_path(), &Tokenizer::Bytes, 0.1).unwrap()
}

#[test]
fn defaults_describe_and_reparse_to_themselves() {
    let text: String = RunConfig::describe().iter().map(|(k, v, _)| format!("{k} = {v}\n")).collect();
    assert_eq!(RunConfig::parse_str(&text).unwrap(), RunConfig::default());
    assert!(RunConfig::describe().iter().all(|(_, _, doc)| !doc.is_empty()));
}

#[test]
fn corpus_is_byte_level() {
    let c = corpus();
    assert_eq!(c.vocab_size, 256);
    assert!(c.train.len() > 500_000);
    let total = c.train.len() + c.heldout.len();
    assert!((c.heldout.len() as f64 / total as f64 - 0.1).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sampler_is_reproducible(seed in any::<u64>(), seq in 1usize..64, batch in 1usize..5) {
        let c = corpus();
        let mut a = Sampler::new(&c, seq, batch, seed).unwrap();
        let mut b = Sampler::new(&c, seq, batch, seed).unwrap();
        for _ in 0..3 {
            let (x, y) = (a.next_batch(&c), b.next_batch(&c));
            prop_assert_eq!(&x, &y);
            prop_assert_eq!(x.inputs.len(), seq * batch);
            prop_assert_eq!(&x.inputs[1..seq], &x.targets[..seq - 1]);
        }
    }

    #[test]
    fn relative_score_invariants(s in -50.0f64..150.0, t in 0.0f64..100.0, r in 0.0f64..50.0, c in 0.1f64..10.0) {
        prop_assume!((t - r).abs() > 1e-3);
        prop_assert!((relative_score(t, t, r).unwrap() - 100.0).abs() < 1e-9);
        // Scaling both gaps by a common factor leaves the score unchanged.
        let a = relative_score(s, t, r).unwrap();
        let b = relative_score(r + c * (s - r), r + c * (t - r), r).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn vocab_tokenizer_round_trips(text in "[a-d ]{0,60}") {
        let tok = Tokenizer::from_tokens(
            ["a", "b", "c", "d", " ", "ab", "abc", "d d"].iter().map(|s| s.as_bytes().to_vec()).collect(),
        ).unwrap();
        let ids = tok.encode(text.as_bytes()).unwrap();
        prop_assert_eq!(tok.decode(&ids), text.as_bytes().to_vec());
        prop_assert!(ids.len() <= text.len());
    }

    #[test]
    fn cosine_stays_between_endpoints(x in 0.0f64..=1.0) {
        let p = TrainPlan::full_scale(StepKind::Step1);
        let (m, a) = p.lr_at((p.token_budget as f64 * x) as u64).unwrap();
        prop_assert!(m <= 1e-3 && m >= 1e-5 - 1e-18);
        prop_assert_eq!(m, a);
    }

    #[test]
    fn scans_match_sum_forms(t in 1usize..12, heads in 1usize..3, d in 1usize..5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let width = heads * d;
        let mut draw = |lo: f64, hi: f64| -> Tensor<f64> {
            let v = (0..t * width).map(|_| rng.random_range(lo..hi)).collect();
            Tensor::new(&[t, width], v).unwrap()
        };
        let (r, k, v, w, a) = (draw(-1.0, 1.0), draw(-1.0, 1.0), draw(-1.0, 1.0), draw(0.01, 1.0), draw(0.0, 1.0));
        let mut kappa = draw(-1.0, 1.0);
        for row in kappa.data_mut().chunks_mut(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let b = |x: &Tensor<f64>| x.clone().reshape(&[1, t, width]).unwrap();
        let mut tape = Tape::inference();
        let (rv, kv, vv, wv) = (tape.constant(b(&r)), tape.constant(b(&k)), tape.constant(b(&v)), tape.constant(b(&w)));
        let y6 = wkv6_scan(&mut tape, rv, kv, vv, Some(wv), heads, None).unwrap();
        let p6 = wkv6_parallel(&w, &k, &v, &r, heads).unwrap();
        prop_assert!(tape.value(y6).clone().reshape(&[t, width]).unwrap().max_abs_diff(&p6) < 1e-12);
        let (cv, av) = (tape.constant(b(&kappa)), tape.constant(b(&a)));
        let y7 = wkv7_scan(&mut tape, rv, wv, kv, cv, av, vv, heads, None).unwrap();
        let p7 = wkv7_parallel(&w, &k, &kappa, &a, &v, &r, heads).unwrap();
        prop_assert!(tape.value(y7).clone().reshape(&[t, width]).unwrap().max_abs_diff(&p7) < 1e-12);
    }
}
