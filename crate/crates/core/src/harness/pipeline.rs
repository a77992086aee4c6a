//! Artifact-level driver. Each stage reads its inputs from the output directory,
//! runs, and writes its archive and report files back atomically.
//!
//! ```text
//! init-teacher      -> teacher_init.radt
//! pretrain-teacher  teacher_init.radt -> teacher.radt, pretrain.jsonl
//! transfer          teacher.radt -> student_init.radt, transfer.json
//! step1             teacher.radt, student_init.radt -> student_step1.radt, step1.jsonl
//! step2 | step2a    teacher.radt, student_step1.radt -> student_step2[a].radt
//! step3 | step3a    student_step2.radt -> student_step3[a].radt
//! eval              teacher.radt, latest student -> eval.json
//! bench             teacher.radt, latest student -> bench.json
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{build_teacher, transfer_attention_weights, AlignmentModel, Model, ModelSpec, TransferMode};
use crate::tensor::{DType, Element};
use crate::train::{
    pretrain_teacher, run_step1, run_step2, run_step2a, run_step3, run_step3a, RunCtx, StepKind, TrainReport,
};

use super::archive::{write_atomic, Archive};
use super::config::RunConfig;
use super::corpus::{Batch, Corpus, Tokenizer};
use super::eval::{bench_generation, eval_agreement, eval_ce, BenchReport};

pub const TEACHER_INIT: &str = "teacher_init.radt";
pub const TEACHER: &str = "teacher.radt";
pub const STUDENT_INIT: &str = "student_init.radt";
pub const TRANSFER_INFO: &str = "transfer.json";
pub const EVAL_REPORT: &str = "eval.json";
pub const BENCH_REPORT: &str = "bench.json";

/// Offset of the student initialization seed from the base seed.
const STUDENT_SEED: u64 = 7;
/// Median window used for the latency ratio.
pub const BENCH_WINDOW: usize = 32;
pub const BENCH_EARLY: usize = 256;
pub const BENCH_LATE: usize = 2048;
/// Generation runs per model; each token keeps its fastest time.
pub const BENCH_RUNS: usize = 3;

pub fn student_file(step: StepKind) -> String {
    format!("student_{step}.radt")
}

/// Sampler seed for a training stage; steps that replace each other share one.
pub fn stage_seed(base: u64, step: StepKind) -> u64 {
    base + match step {
        StepKind::Pretrain => 1,
        StepKind::Step1 => 2,
        StepKind::Step2 | StepKind::Step2a => 3,
        StepKind::Step3 | StepKind::Step3a => 4,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    InitTeacher,
    PretrainTeacher,
    Transfer,
    Train(StepKind),
    Eval,
    Bench,
}

/// Written by the transfer stage; later stages read the student layout from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferInfo {
    pub mode: TransferMode,
    pub student: ModelSpec,
    pub teacher_params: usize,
    pub student_mixer_params: usize,
    pub student_other_params: usize,
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
    /// At transfer: fresh Q/K/V/O instead of teacher weights. At step2/step2a:
    /// start from the transferred student when step 1 was skipped.
    pub de_novo: bool,
    /// Student archive used by eval and bench instead of the latest one.
    pub checkpoint: Option<String>,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Self {
        Pipeline { cfg, out: out.into(), de_novo: false, checkpoint: None }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Runs one stage and returns a short JSON summary of what it did.
    pub fn run(&self, stage: Stage) -> Result<Value> {
        self.cfg.validate()?;
        fs::create_dir_all(&self.out)?;
        match self.cfg.dtype {
            DType::F32 => self.run_typed::<f32>(stage),
            DType::F64 => self.run_typed::<f64>(stage),
        }
    }

    fn run_typed<T: Element>(&self, stage: Stage) -> Result<Value> {
        match stage {
            Stage::InitTeacher => {
                let teacher = build_teacher::<T>(&self.cfg.model, self.cfg.seed)?;
                self.save(&teacher, TEACHER_INIT)?;
                Ok(json!({ "artifact": TEACHER_INIT, "params": teacher.store.numel() }))
            }
            Stage::PretrainTeacher => {
                let mut teacher = self.load::<T>(&self.cfg.model, TEACHER_INIT, "init-teacher")?;
                let report = self.train(StepKind::Pretrain, |plan, ctx| pretrain_teacher(&mut teacher, plan, ctx))?;
                self.save(&teacher, TEACHER)?;
                Ok(summary(TEACHER, &report))
            }
            Stage::Transfer => self.transfer::<T>(),
            Stage::Train(step) => self.train_student::<T>(step),
            Stage::Eval => {
                let teacher = self.teacher::<T>()?;
                let (name, student) = self.latest_student::<T>()?;
                let heldout = self.heldout()?;
                let report = eval_agreement(&student, &teacher, &heldout)?;
                let out = json!({
                    "student": name,
                    "teacher_ce": eval_ce(&teacher, &heldout)?.ce,
                    "report": report,
                });
                self.write_json(EVAL_REPORT, &out)?;
                Ok(out)
            }
            Stage::Bench => {
                let teacher = self.teacher::<T>()?;
                let (name, student) = self.latest_student::<T>()?;
                let corpus = self.corpus()?;
                let n = self.cfg.bench_prompt_len.min(corpus.heldout.len());
                let prompt = &corpus.heldout[..n];
                let gen = self.cfg.bench_gen_len;
                let mut t = bench_generation(&teacher, prompt, gen)?;
                let mut s = bench_generation(&student, prompt, gen)?;
                for _ in 1..BENCH_RUNS {
                    t = t.fastest(&bench_generation(&teacher, prompt, gen)?)?;
                    s = s.fastest(&bench_generation(&student, prompt, gen)?)?;
                }
                let out = json!({
                    "student": name,
                    "teacher": bench_json(&t),
                    "student_bench": bench_json(&s),
                });
                self.write_json(BENCH_REPORT, &out)?;
                Ok(out)
            }
        }
    }

    fn transfer<T: Element>(&self) -> Result<Value> {
        let teacher = self.teacher::<T>()?;
        let spec = self.cfg.student_spec();
        let mode = if self.de_novo { TransferMode::DeNovo } else { TransferMode::Teacher };
        let student = transfer_attention_weights(&teacher, &spec, mode, self.cfg.seed + STUDENT_SEED)?;
        let (mixer, other) = student.param_counts();
        let info = TransferInfo {
            mode,
            student: spec,
            teacher_params: teacher.store.numel(),
            student_mixer_params: mixer,
            student_other_params: other,
        };
        self.save(&student, STUDENT_INIT)?;
        self.write_json(TRANSFER_INFO, &info)?;
        Ok(serde_json::to_value(&info).map_err(json_err)?)
    }

    fn train_student<T: Element>(&self, step: StepKind) -> Result<Value> {
        let spec = self.student_spec()?;
        let out_name = student_file(step);
        let report = match step {
            StepKind::Pretrain => return Err(Error::config("pretraining is the pretrain-teacher stage")),
            StepKind::Step1 => {
                let teacher = self.teacher::<T>()?;
                let student = self.load::<T>(&spec, STUDENT_INIT, "transfer")?;
                let mut al = AlignmentModel::new(&teacher, student)?;
                let r = self.train(step, |plan, ctx| run_step1(&mut al, plan, ctx))?;
                self.save(&al.student, &out_name)?;
                r
            }
            StepKind::Step2 | StepKind::Step2a => {
                let teacher = self.teacher::<T>()?;
                let step1 = student_file(StepKind::Step1);
                let mut student = if self.path(&step1).exists() {
                    self.load::<T>(&spec, &step1, "step1")?
                } else if self.de_novo {
                    self.load::<T>(&spec, STUDENT_INIT, "transfer")?
                } else {
                    return Err(Error::config(format!(
                        "{step} needs {step1}; run step1 first or pass --de-novo to distil the transferred student directly"
                    )));
                };
                let r = self.train(step, |plan, ctx| match step {
                    StepKind::Step2 => run_step2(&mut student, &teacher, plan, ctx),
                    _ => run_step2a(&mut student, &teacher, plan, ctx),
                })?;
                self.save(&student, &out_name)?;
                r
            }
            StepKind::Step3 | StepKind::Step3a => {
                let mut student = self.load::<T>(&spec, &student_file(StepKind::Step2), "step2")?;
                let r = self.train(step, |plan, ctx| match step {
                    StepKind::Step3 => run_step3(&mut student, plan, ctx),
                    _ => run_step3a(&mut student, plan, ctx),
                })?;
                self.save(&student, &out_name)?;
                r
            }
        };
        Ok(summary(&out_name, &report))
    }

    /// Runs `f` with the step's plan, held-out data and a JSON-lines log, which is
    /// renamed into place only when the step succeeds.
    fn train(&self, step: StepKind, f: impl FnOnce(&crate::train::TrainPlan, &mut RunCtx<'_>) -> Result<TrainReport>) -> Result<TrainReport> {
        let corpus = self.corpus()?;
        let heldout = self.heldout_from(&corpus)?;
        let log_path = self.path(&format!("{step}.jsonl"));
        let tmp = self.path(&format!(".{step}.jsonl.tmp"));
        let mut log = BufWriter::new(fs::File::create(&tmp)?);
        let report = {
            let mut ctx = RunCtx::new(&corpus, stage_seed(self.cfg.seed, step)).with_heldout(&heldout).with_log(&mut log);
            f(self.cfg.plan(step), &mut ctx)
        };
        log.flush()?;
        drop(log);
        match report {
            Ok(r) => {
                fs::rename(&tmp, &log_path)?;
                Ok(r)
            }
            Err(e) => {
                let _ = fs::remove_file(&tmp);
                Err(e)
            }
        }
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let tok = match &self.cfg.vocab {
            Some(p) => Tokenizer::from_vocab_file(p)?,
            None => Tokenizer::Bytes,
        };
        if tok.vocab_size() != self.cfg.model.vocab_size {
            return Err(Error::config(format!(
                "tokenizer has {} entries but model.vocab_size is {}",
                tok.vocab_size(),
                self.cfg.model.vocab_size
            )));
        }
        Corpus::from_file(&self.cfg.corpus, &tok, self.cfg.heldout_frac)
    }

    pub fn heldout(&self) -> Result<Vec<Batch>> {
        self.heldout_from(&self.corpus()?)
    }

    fn heldout_from(&self, corpus: &Corpus) -> Result<Vec<Batch>> {
        corpus.heldout_batches(self.cfg.eval_seq_len, self.cfg.eval_windows, self.cfg.eval_batch)
    }

    pub fn teacher<T: Element>(&self) -> Result<Model<T>> {
        self.load(&self.cfg.model, TEACHER, "pretrain-teacher")
    }

    /// Student layout recorded at transfer; it must agree with the configured mixer.
    pub fn student_spec(&self) -> Result<ModelSpec> {
        let path = self.path(TRANSFER_INFO);
        let text = fs::read_to_string(&path)
            .map_err(|_| Error::config(format!("{} not found; run transfer first", path.display())))?;
        let info: TransferInfo = serde_json::from_str(&text).map_err(json_err)?;
        let want = self.cfg.student_spec();
        if info.student != want {
            return Err(Error::config(format!(
                "student in {} is {} (rope {:?}) but the configuration asks for {} (rope {:?}); rerun transfer",
                path.display(),
                info.student.mixer_kind,
                info.student.rope,
                want.mixer_kind,
                want.rope
            )));
        }
        Ok(info.student)
    }

    /// The named checkpoint, or the most advanced student archive present.
    pub fn latest_student<T: Element>(&self) -> Result<(String, Model<T>)> {
        let spec = self.student_spec()?;
        let name = match &self.checkpoint {
            Some(c) => c.clone(),
            None => [StepKind::Step3, StepKind::Step3a, StepKind::Step2a, StepKind::Step2, StepKind::Step1]
                .into_iter()
                .map(student_file)
                .chain([STUDENT_INIT.to_string()])
                .find(|n| self.path(n).exists())
                .unwrap_or_else(|| STUDENT_INIT.to_string()),
        };
        let model = self.load(&spec, &name, "transfer")?;
        Ok((name, model))
    }

    fn load<T: Element>(&self, spec: &ModelSpec, name: &str, producer: &str) -> Result<Model<T>> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::config(format!("{} not found; run {producer} first", path.display())));
        }
        load_model(spec, &path)
    }

    fn save<T: Element>(&self, model: &Model<T>, name: &str) -> Result<()> {
        Archive::from_store(&model.store).write(&self.path(name))?;
        Ok(())
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(json_err)?;
        text.push('\n');
        write_atomic(&self.path(name), text.as_bytes())?;
        Ok(())
    }
}

/// Model of layout `spec` with parameters read from an archive.
pub fn load_model<T: Element>(spec: &ModelSpec, path: &Path) -> Result<Model<T>> {
    let mut model = Model::<T>::init(spec.clone(), 0)?;
    Archive::read(path)?.load_into(&mut model.store)?;
    Ok(model)
}

fn summary(artifact: &str, r: &TrainReport) -> Value {
    json!({
        "artifact": artifact,
        "trainable": r.trainable,
        "intervals": r.records.len(),
        "final_loss": r.records.last().map(|x| x.loss),
        "initial_eval": r.initial_eval,
        "final_eval": r.final_eval(),
    })
}

fn bench_json(b: &BenchReport) -> Value {
    json!({
        "prompt_len": b.prompt_len,
        "gen_len": b.gen_len,
        "state_size": b.state_size,
        "latency_early": b.latency_at(BENCH_EARLY, BENCH_WINDOW),
        "latency_late": b.latency_at(BENCH_LATE, BENCH_WINDOW),
        "ratio": b.ratio(BENCH_EARLY, BENCH_LATE, BENCH_WINDOW).unwrap_or_else(|| b.summary_ratio(BENCH_WINDOW)),
        "per_token": b.per_token,
    })
}

fn json_err(e: serde_json::Error) -> Error {
    Error::invalid(format!("json: {e}"))
}
