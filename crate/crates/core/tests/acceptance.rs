//! Acceptance run: one line per criterion, non-zero exit if any fails.
//!
//! Criteria 6, 7 and 10 train the toy teacher and three students at desk scale,
//! which takes roughly ten minutes on one core.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use radlads::autograd::Tape;
use radlads::gradcheck::grad_check;
use radlads::harness::archive::{AnyTensor, Archive};
use radlads::harness::config::RunConfig;
use radlads::harness::eval::{eval_ce, relative_score};
use radlads::harness::oracle::{check_kernel, check_oracle, check_ranges, Kernel};
use radlads::harness::pipeline::{load_model, student_file, Pipeline, Stage, TEACHER};
use radlads::mixers::{Mixer, MixerConfig, MixerKind, MixerParams};
use radlads::model::{build_student, build_teacher, AlignmentModel, Model, ModelSpec};
use radlads::param::{ParamGroup, ParamRole, ParamStore};
use radlads::primitives::{token_shift, DdlerpTarget, RopeConfig};
use radlads::tensor::Tensor;
use radlads::train::{ce_loss, hidden_loss, kl_loss, HiddenLoss, ReportRecord, StepKind, TrainPlan};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = Result<Outcome, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn c1_equivalence() -> Check {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for k in [Kernel::Wkv6, Kernel::Wkv7, Kernel::LinAtt] {
        let r = check_kernel(k, 2024).map_err(err)?;
        pass &= r.passed() && r.cases == 16;
        parts.push(format!("{:?} f64 {:.1e} f32 {:.1e}", k, r.max_diff_f64, r.max_diff_f32));
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok(outcome(pass && secs < 10.0, format!("{} ({secs:.2} s)", parts.join(", "))))
}

fn c2_oracle() -> Check {
    let t0 = Instant::now();
    let r = check_oracle(2024).map_err(err)?;
    let secs = t0.elapsed().as_secs_f64();
    Ok(outcome(
        r.passed() && secs < 10.0,
        format!("diag {:.1e}, diag-minus-removal {:.1e} over {} instances ({secs:.2} s)", r.diag, r.removal, r.cases),
    ))
}

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.5, &mut r);
    }
}

fn c3_gradients() -> Check {
    let t0 = Instant::now();
    let mut worst = 0f64;
    let mut min_checked = usize::MAX;
    let cases = [
        (MixerKind::Softmax, 0, true),
        (MixerKind::RadRwkv6, 0, false),
        (MixerKind::RadRwkv6, 0, true),
        (MixerKind::RadRwkv7, 0, true),
        (MixerKind::RadRwkv7, 1, true),
        (MixerKind::LinAtt, 0, true),
    ];
    for (i, (kind, layer, rope)) in cases.into_iter().enumerate() {
        let mut store = ParamStore::new();
        let mut cfg = MixerConfig::new(kind, 8, 2, 1, layer);
        cfg.lora_rank = 3;
        cfg.rope = RopeConfig::new(4, rope);
        let m = Mixer::init(&mut store, "m", cfg, &mut ChaCha8Rng::seed_from_u64(i as u64)).map_err(err)?;
        randomize(&mut store, 100 + i as u64);
        let mut r = ChaCha8Rng::seed_from_u64(200 + i as u64);
        let x = store.add("x", Tensor::randn(&[2, 5, 8], 1.0, &mut r), ParamGroup::Main, ParamRole::Other).map_err(err)?;
        let v0 = store.add("v0", Tensor::randn(&[2, 5, 8], 1.0, &mut r), ParamGroup::Main, ParamRole::Other).map_err(err)?;
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
            7,
        )
        .map_err(err)?;
        worst = worst.max(rep.max_rel_error);
        min_checked = min_checked.min(rep.checked);
    }
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::randn(&[2, 5, 12], 1.0, &mut r), ParamGroup::Main, ParamRole::Other).map_err(err)?;
    let b = store.add("b", Tensor::randn(&[2, 5, 12], 1.0, &mut r), ParamGroup::Main, ParamRole::Other).map_err(err)?;
    let labels = [0u32, 5, 2, 2, 4, 1, 11, 7, 7, 0];
    for loss in ["l2", "kl", "ce"] {
        let rep = grad_check(
            &mut store,
            |t, s| {
                let (x, y) = (t.param(s, a), t.param(s, b));
                match loss {
                    "l2" => hidden_loss(t, x, y, HiddenLoss::L2),
                    "kl" => kl_loss(t, x, y),
                    _ => {
                        let z = t.add(x, y)?;
                        ce_loss(t, z, &labels)
                    }
                }
            },
            1e-6,
            240,
            3,
        )
        .map_err(err)?;
        worst = worst.max(rep.max_rel_error);
        min_checked = min_checked.min(rep.checked);
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok(outcome(
        worst <= 1e-4 && min_checked >= 200 && secs < 120.0,
        format!("6 mixer variants + L2/KL/CE, max rel err {worst:.1e}, ≥{min_checked} entries each ({secs:.1} s)"),
    ))
}

fn c4_ranges() -> Check {
    let r = check_ranges(2024, 10_000).map_err(err)?;
    Ok(outcome(
        r.passed(),
        format!(
            "{} draws: rwkv6 w [{:.4e}, {:.6}], rwkv7 w [{:.4}, {:.6}], a [{:.1e}, {:.9}], |‖κ‖−1| ≤ {:.0e}, {} zero keys → κ = 0",
            r.draws, r.rwkv6_w.0, r.rwkv6_w.1, r.rwkv7_w.0, r.rwkv7_w.1, r.rwkv7_a.0, r.rwkv7_a.1, r.kappa_norm_err, r.kappa_zero_rows
        ),
    ))
}

fn c5_noop() -> Check {
    let spec = ModelSpec::toy_teacher();
    let teacher = build_teacher::<f32>(&spec, 0).map_err(err)?;
    let ids: Vec<u32> = (0..64).map(|i| (i * 37 % 256) as u32).collect();
    let teacher_logits = teacher.logits(&ids, 2).map_err(err)?;
    let mut pass = true;
    let mut notes = Vec::new();
    for kind in [MixerKind::RadRwkv6, MixerKind::RadRwkv7, MixerKind::LinAtt] {
        let s = build_student(&teacher, &spec.with_mixer(kind), 7).map_err(err)?;
        let shared = s.store.iter().filter(|p| !Model::<f32>::is_mixer_param(&p.name));
        let mut n = 0;
        for p in shared {
            pass &= teacher.store.by_name(&p.name).map(|t| bits(&t.value) == bits(&p.value)).unwrap_or(false);
            n += 1;
        }
        if kind == MixerKind::RadRwkv6 {
            let x = Tensor::<f32>::randn(&[2, 16, spec.d_model], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
            for layer in &s.layers {
                let MixerParams::Rwkv6(p) = &layer.mixer.params else { return Err("not rwkv6".into()) };
                let mut tape = Tape::inference();
                let xv = tape.constant(x.clone());
                let prev = token_shift(&mut tape, xv, None).map_err(err)?;
                for target in DdlerpTarget::ALL {
                    let y = p.ddlerp.apply(&mut tape, &s.store, target, xv, prev).map_err(err)?;
                    pass &= bits(tape.value(y)) == bits(&x);
                }
            }
        }
        let al = AlignmentModel::new(&teacher, s).map_err(err)?;
        let mut tape = Tape::inference();
        let out = al.forward(&mut tape, &ids, 2).map_err(err)?;
        pass &= bits(tape.value(out.teacher_logits)) == bits(&teacher_logits);
        notes.push(format!("{kind}: {n} shared tensors"));
    }
    Ok(outcome(pass, format!("ddlerp = x, shared tensors and alignment logits bit-equal ({})", notes.join(", "))))
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

fn records(dir: &Path, step: StepKind) -> Result<Vec<ReportRecord>, String> {
    fs::read_to_string(dir.join(format!("{step}.jsonl")))
        .map_err(err)?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(err))
        .collect()
}

fn desk_config() -> RunConfig {
    RunConfig { corpus: common::corpus_path(), ..RunConfig::default() }
}

fn run(p: &Pipeline, stages: &[Stage]) -> Result<Vec<serde_json::Value>, String> {
    stages.iter().map(|&s| p.run(s).map_err(|e| format!("{s:?}: {e}"))).collect()
}

fn final_kl(dir: &Path) -> Result<f64, String> {
    records(dir, StepKind::Step2)?.last().and_then(|r| r.eval.as_ref()?.kl).ok_or_else(|| "no step2 KL".into())
}

/// Pretrains the teacher and runs the full conversion into `dir`.
fn c6_conversion(dir: &Path) -> Check {
    let t0 = Instant::now();
    let p = Pipeline::new(desk_config(), dir);
    run(&p, &[Stage::InitTeacher, Stage::PretrainTeacher, Stage::Transfer, Stage::Train(StepKind::Step1)])?;
    let teacher = load_model::<f32>(&p.cfg.model, &dir.join(TEACHER)).map_err(err)?;
    let teacher_ce = eval_ce(&teacher, &p.heldout().map_err(err)?).map_err(err)?.ce;
    let s2 = p.run(Stage::Train(StepKind::Step2)).map_err(err)?;
    p.run(Stage::Eval).map_err(err)?;

    let kl0 = s2["initial_eval"]["kl"].as_f64().ok_or("no initial KL")?;
    let agree0 = s2["initial_eval"]["agreement"].as_f64().ok_or("no initial agreement")?;
    let recs = records(dir, StepKind::Step2)?;
    let kl1 = final_kl(dir)?;
    let agree: Vec<f64> =
        std::iter::once(agree0).chain(recs.iter().filter_map(|r| r.eval.as_ref()?.agreement)).collect();
    let dips = agree.windows(2).filter(|w| w[1] <= w[0]).count();
    let mins = t0.elapsed().as_secs_f64() / 60.0;
    let pass = teacher_ce <= 2.2 && kl1 <= 0.25 * kl0 && dips <= 1 && mins < 30.0;
    let series: Vec<String> = agree.iter().map(|a| format!("{a:.3}")).collect();
    Ok(outcome(
        pass,
        format!(
            "teacher CE {teacher_ce:.3}; KL {kl0:.4} → {kl1:.4} ({:.1}%); agreement {} ({dips} non-monotone); {mins:.1} min",
            100.0 * kl1 / kl0,
            series.join(" → ")
        ),
    ))
}

fn c7_ablations(full: &Path, root: &Path) -> Check {
    let kl_full = final_kl(full)?;
    let fresh = |name: &str| -> Result<std::path::PathBuf, String> {
        let d = root.join(name);
        fs::create_dir_all(&d).map_err(err)?;
        fs::copy(full.join(TEACHER), d.join(TEACHER)).map_err(err)?;
        Ok(d)
    };

    // Step 1 skipped: its tokens go to step 2 so the total budget matches.
    let skip = fresh("skip_step1")?;
    let mut cfg = desk_config();
    let extra = cfg.plan(StepKind::Step1).token_budget;
    cfg.plans.get_mut("step2").unwrap().token_budget += extra;
    let mut p = Pipeline::new(cfg, &skip);
    run(&p, &[Stage::Transfer])?;
    p.de_novo = true;
    run(&p, &[Stage::Train(StepKind::Step2)])?;
    let kl_skip = final_kl(&skip)?;

    let denovo = fresh("de_novo")?;
    let mut p = Pipeline::new(desk_config(), &denovo);
    p.de_novo = true;
    run(&p, &[Stage::Transfer, Stage::Train(StepKind::Step1), Stage::Train(StepKind::Step2)])?;
    let kl_denovo = final_kl(&denovo)?;

    Ok(outcome(
        kl_full < kl_skip && kl_full < kl_denovo,
        format!("final KL: full {kl_full:.4} < skip-step1 {kl_skip:.4}; teacher transfer {kl_full:.4} < de-novo QKVO {kl_denovo:.4}"),
    ))
}

fn c8_schedules() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let mut pass = true;
    let p1 = TrainPlan::full_scale(StepKind::Step1);
    let at = |p: &TrainPlan, f: f64| p.lr_at((p.token_budget as f64 * f).round() as u64).unwrap();
    pass &= at(&p1, 0.0) == (1e-3, 1e-3) && close(at(&p1, 1.0).0, 1e-5) && close(at(&p1, 1.0).1, 1e-5);
    for step in [StepKind::Step2, StepKind::Step3] {
        let p = TrainPlan::full_scale(step);
        pass &= (0..=100).all(|i| at(&p, i as f64 / 100.0) == (1e-5, 1e-5));
    }
    let p2a = TrainPlan::full_scale(StepKind::Step2a);
    let grid = (0..=1000).map(|i| i as f64 / 1000.0);
    for f in grid {
        let (m, a) = at(&p2a, f);
        pass &= m == 1e-5;
        if f <= 0.833 {
            pass &= close(a, 1e-4);
        }
        if f >= 0.875 {
            pass &= close(a, 1e-5);
        }
    }
    Ok(outcome(pass, "step1 1e-3 → 1e-5 cosine, step2/3 flat 1e-5, step2a lr_att 1e-4 to 83.3% and 1e-5 from 87.5%"))
}

fn c9_relscore() -> Check {
    let a = relative_score(69.2, 75.8, 0.0).map_err(err)?;
    let b = relative_score(62.4, 71.7, 25.0).map_err(err)?;
    let out = Command::new(env!("CARGO_BIN_EXE_radlads"))
        .args(["relscore", "--s", "69.2", "--t", "75.8", "--r", "0"])
        .output()
        .map_err(err)?;
    let cli = String::from_utf8_lossy(&out.stdout).trim().to_string();
    Ok(outcome(
        (a - 91.3).abs() <= 0.05 && (b - 80.1).abs() <= 0.05 && cli == "91.3",
        format!("{a:.3}, {b:.3}; CLI prints {cli}"),
    ))
}

fn c10_bench(dir: &Path) -> Check {
    let p = Pipeline::new(desk_config(), dir);
    let b = p.run(Stage::Bench).map_err(err)?;
    let t = b["teacher"]["ratio"].as_f64().ok_or("no teacher ratio")?;
    let s = b["student_bench"]["ratio"].as_f64().ok_or("no student ratio")?;
    Ok(outcome(
        s <= 1.2 && t >= 1.5,
        format!(
            "latency(2048)/latency(256): student {s:.3} (state {} scalars), teacher {t:.3} (cache {} scalars)",
            b["student_bench"]["state_size"], b["teacher"]["state_size"]
        ),
    ))
}

fn c11_persistence(full: &Path, root: &Path) -> Check {
    let bytes = fs::read(full.join(TEACHER)).map_err(err)?;
    let archive = Archive::from_bytes(&bytes).map_err(err)?;
    let mut pass = archive.to_bytes() == bytes;
    let student = load_model::<f32>(
        &desk_config().student_spec(),
        &full.join(student_file(StepKind::Step2)),
    )
    .map_err(err)?;
    let path = root.join("roundtrip.radt");
    Archive::from_store(&student.store).write(&path).map_err(err)?;
    pass &= Archive::read(&path).map_err(err)? == Archive::from_store(&student.store);
    pass &= fs::read(&path).map_err(err)? == fs::read(full.join(student_file(StepKind::Step2))).map_err(err)?;

    let golden = Archive::read(&common::fixture("golden_v1.radt")).map_err(err)?;
    pass &= golden.len() == 3
        && matches!(golden.get("embed"), Some(AnyTensor::F32(t)) if t.data() == [1.0, -2.0, 0.5, 3.25, 0.0, -0.125]);

    let stages = [
        Stage::InitTeacher,
        Stage::PretrainTeacher,
        Stage::Transfer,
        Stage::Train(StepKind::Step1),
        Stage::Train(StepKind::Step2),
    ];
    let mut traces = Vec::new();
    for name in ["rerun_a", "rerun_b"] {
        let d = root.join(name);
        run(&Pipeline::new(common::tiny_config(), &d), &stages)?;
        let mut losses = Vec::new();
        for step in [StepKind::Pretrain, StepKind::Step1, StepKind::Step2] {
            losses.extend(records(&d, step)?.iter().map(|r| r.loss.to_bits()));
        }
        traces.push((losses, fs::read(d.join(student_file(StepKind::Step2))).map_err(err)?));
    }
    pass &= traces[0] == traces[1];
    Ok(outcome(
        pass,
        format!("archives bit-exact, golden fixture parses, rerun traces identical ({} losses)", traces[0].0.len()),
    ))
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().expect("tempdir");
    let full = root.path().join("full");
    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("recurrent/parallel equivalence", Box::new(c1_equivalence)),
        ("attention-matrix oracle", Box::new(c2_oracle)),
        ("gradient checks", Box::new(c3_gradients)),
        ("decay/gate ranges", Box::new(c4_ranges)),
        ("setup no-op", Box::new(c5_noop)),
        ("toy end-to-end conversion", Box::new(|| c6_conversion(&full))),
        ("ablation ordering", Box::new(|| c7_ablations(&full, root.path()))),
        ("schedule conformance", Box::new(c8_schedules)),
        ("relative score", Box::new(c9_relscore)),
        ("generation cost", Box::new(|| c10_bench(&full))),
        ("persistence", Box::new(|| c11_persistence(&full, root.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let (verdict, detail) = match check() {
            Ok(o) => (if o.pass { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        failed += (verdict == "FAIL") as usize;
        println!("criterion {:>2} {verdict}  {name}: {detail} [{:.1} s]", i + 1, t0.elapsed().as_secs_f64());
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
