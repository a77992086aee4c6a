use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use radlads::error::Error;
use radlads::harness::config::{parse_dtype, parse_rope, RunConfig};
use radlads::harness::eval::relative_score;
use radlads::harness::oracle::oracle_suite;
use radlads::harness::pipeline::{Pipeline, Stage};
use radlads::mixers::MixerKind;
use radlads::train::StepKind;

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Converts a softmax-attention transformer into a recurrent model by distillation.
#[derive(Parser, Debug)]
#[command(name = "radlads", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// key = value configuration file; defaults apply to missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// overrides the configured base seed
    #[arg(long)]
    seed: Option<u64>,
    /// artifact directory
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// transfer: fresh Q/K/V/O; step2/step2a: start from the transferred student
    #[arg(long)]
    de_novo: bool,
    /// f32 or f64
    #[arg(long)]
    dtype: Option<String>,
    /// rad_rwkv6, rad_rwkv7 or linatt
    #[arg(long)]
    mixer: Option<String>,
    /// on or off
    #[arg(long)]
    rope: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Fresh softmax teacher
    InitTeacher(#[command(flatten)] Common),
    /// Next-token training of the teacher on the corpus
    PretrainTeacher(#[command(flatten)] Common),
    /// Student initialized from the teacher
    Transfer(#[command(flatten)] Common),
    /// Per-layer hidden-state alignment
    Step1(#[command(flatten)] Common),
    /// Logit distillation
    Step2(#[command(flatten)] Common),
    /// Long-context distillation with split learning rates
    Step2a(#[command(flatten)] Common),
    /// Long-context fine-tuning
    Step3(#[command(flatten)] Common),
    /// Long-context fine-tuning of decay and tokenshift only
    Step3a(#[command(flatten)] Common),
    /// Held-out KL, agreement and CE of a student against the teacher
    Eval {
        #[command(flatten)]
        common: Common,
        /// student archive name inside --out (default: most advanced present)
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Recurrent kernels against reference forms, plus decay/gate ranges
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
    },
    /// Per-token generation latency of teacher and student
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// 100·(s − r)/(t − r)
    Relscore {
        #[arg(long, allow_hyphen_values = true)]
        s: f64,
        #[arg(long, allow_hyphen_values = true)]
        t: f64,
        #[arg(long, allow_hyphen_values = true)]
        r: f64,
    },
}

fn load_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.dtype {
        cfg.dtype = parse_dtype(d)?;
    }
    if let Some(m) = &c.mixer {
        cfg.student_mixer = m.parse::<MixerKind>()?;
    }
    if let Some(r) = &c.rope {
        cfg.student_rope = parse_rope(r)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pipeline(c: &Common, checkpoint: Option<String>) -> Result<Pipeline, Error> {
    let mut p = Pipeline::new(load_config(c)?, &c.out);
    p.de_novo = c.de_novo;
    p.checkpoint = checkpoint;
    Ok(p)
}

fn stage(c: &Common, s: Stage, checkpoint: Option<String>) -> Result<(), Error> {
    let out = pipeline(c, checkpoint)?.run(s)?;
    println!("{}", serde_json::to_string_pretty(&out).unwrap_or_default());
    Ok(())
}

fn run(cmd: Cmd) -> Result<bool, Error> {
    let train = |c: &Common, k| stage(c, Stage::Train(k), None);
    match cmd {
        Cmd::InitTeacher(c) => stage(&c, Stage::InitTeacher, None)?,
        Cmd::PretrainTeacher(c) => stage(&c, Stage::PretrainTeacher, None)?,
        Cmd::Transfer(c) => stage(&c, Stage::Transfer, None)?,
        Cmd::Step1(c) => train(&c, StepKind::Step1)?,
        Cmd::Step2(c) => train(&c, StepKind::Step2)?,
        Cmd::Step2a(c) => train(&c, StepKind::Step2a)?,
        Cmd::Step3(c) => train(&c, StepKind::Step3)?,
        Cmd::Step3a(c) => train(&c, StepKind::Step3a)?,
        Cmd::Eval { common, checkpoint } => stage(&common, Stage::Eval, checkpoint)?,
        Cmd::Bench { common, checkpoint } => stage(&common, Stage::Bench, checkpoint)?,
        Cmd::OracleCheck { common, draws } => {
            let cfg = load_config(&common)?;
            let s = oracle_suite(cfg.seed, draws)?;
            for k in &s.kernels {
                println!(
                    "{:<8} {} f64 {:.3e}  f32 {:.3e}  ({} cases)",
                    format!("{:?}", k.kernel),
                    verdict(k.passed()),
                    k.max_diff_f64,
                    k.max_diff_f32,
                    k.cases
                );
            }
            println!("oracle   {} diag {:.3e}  removal {:.3e}", verdict(s.oracle.passed()), s.oracle.diag, s.oracle.removal);
            let r = &s.ranges;
            println!(
                "ranges   {} rwkv6 w [{:.6e}, {:.9}]  rwkv7 w [{:.6}, {:.9}]  a [{:.3e}, {:.9}]  |‖κ‖−1| {:.1e}  ({} draws)",
                verdict(r.passed()),
                r.rwkv6_w.0,
                r.rwkv6_w.1,
                r.rwkv7_w.0,
                r.rwkv7_w.1,
                r.rwkv7_a.0,
                r.rwkv7_a.1,
                r.kappa_norm_err,
                r.draws
            );
            return Ok(s.passed());
        }
        Cmd::Relscore { s, t, r } => println!("{:.1}", relative_score(s, t, r)?),
    }
    Ok(true)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VALIDATION),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_VALIDATION })
        }
    }
}
