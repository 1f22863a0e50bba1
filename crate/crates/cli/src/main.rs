//! `somni`: corpus generation, staged training, streaming inference, evaluation
//! and gradient checks.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 numeric failure.

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use somni_core::data::{
    decode_features, gen_corpus, load_checkpoint, read_checkpoint, save_checkpoint, Corpus, CorpusManifest, Split,
    TaskMix,
};
use somni_core::eval::{eval_suite, Suite};
use somni_core::model::{FusionType, FusionWindow, ModelConfig, OmniModel};
use somni_core::numerics::gradcheck::GradCheckOptions;
use somni_core::numerics::OpKind;
use somni_core::streaming::{modality_route, spawn_session, Inputs, ModelBackend, Output, Session, SessionConfig, SessionInput};
use somni_core::training::{ctc_gradcheck, train_stage, FullModelCheck, ReportLine, Stage, TrainConfig, TrainData};
use somni_core::vocab::TokenId;
use somni_core::{OmniError, Scalar};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "somni", version, about = "Speech-text omni model on a desk-scale decoder-only transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    GenData(GenDataArgs),
    /// Check every record of a corpus directory.
    Validate(ValidateArgs),
    /// Run one training stage (or all three).
    Train(TrainArgs),
    /// Stream one interaction and print its event trace.
    Infer(InferArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Finite-difference checks of the CTC and full-model gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_dev: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    /// Family weights: asr,echo,recall,vision.
    #[arg(long, default_value = "1,1,1,1")]
    task_mix: TaskMix,
    #[arg(long, default_value_t = 64)]
    text_size: u32,
    #[arg(long, default_value_t = 32)]
    unit_size: u32,
    #[arg(long, default_value_t = 16)]
    vision_tokens: usize,
    #[arg(long, default_value_t = 32)]
    vision_dim: usize,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// 1, 2, 3 or all.
    #[arg(long)]
    stage: String,
    /// Training configuration (TOML); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for `stageN.ckpt` and `stageN.report.jsonl`.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to start from instead of `<out>/stage{N-1}.ckpt`.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Overrides the step count of every stage run.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// text, speech, vision+text or vision+speech.
    #[arg(long, default_value = "speech")]
    modality_in: String,
    /// text or speech.
    #[arg(long, default_value = "text")]
    modality_out: Output,
    /// JSON object with `text`, `units` and/or `vision` (base64); a corpus
    /// record line also works. `-` reads standard input.
    #[arg(long)]
    input: PathBuf,
    /// Write the trace here instead of standard output.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Wait-k lag.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Fusion window (a number or `inf`).
    #[arg(long, default_value = "5")]
    w: FusionWindow,
    /// Fusion type; must fit the checkpoint's parameters (defaults to it).
    #[arg(long)]
    fusion: Option<FusionType>,
    #[arg(long, default_value_t = 20)]
    max_units_per_token: usize,
    #[arg(long, default_value_t = 32)]
    max_text_tokens: usize,
    /// 0 decodes greedily.
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write `wall_ns` as 0 so traces are reproducible byte for byte.
    #[arg(long)]
    no_timing: bool,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// asr, recall (speech in), consistency, all, or a task such as S2T.
    #[arg(long, default_value = "all")]
    task: Suite,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Records per metric.
    #[arg(long, default_value_t = 500)]
    limit: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value = "5")]
    w: FusionWindow,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
}

#[derive(Args)]
struct GradcheckArgs {
    /// TOML whose `[model]` table sets the checked model (tiny by default).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Break one backward rule on purpose (negative control): matmul,
    /// attention, rms_norm, silu, softmax, cross_entropy, ctc.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<OmniError> for Failure {
    fn from(e: OmniError) -> Self {
        let code = match &e {
            OmniError::Config(_) => EXIT_USAGE,
            OmniError::Numeric(_) | OmniError::Graph(_) | OmniError::Scheduling(_) | OmniError::Training(_) => {
                EXIT_NUMERIC
            }
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure {
            code: EXIT_DATA,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SOMNI_LOG", "info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Validate(a) => validate(a),
        Command::Train(a) => match a.precision {
            Precision::F32 => train::<f32>(a),
            Precision::F64 => train::<f64>(a),
        },
        Command::Infer(a) => match a.precision {
            Precision::F32 => infer::<f32>(a),
            Precision::F64 => infer::<f64>(a),
        },
        Command::Eval(a) => match a.precision {
            Precision::F32 => eval::<f32>(a),
            Precision::F64 => eval::<f64>(a),
        },
        Command::Gradcheck(a) => gradcheck(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let manifest = CorpusManifest {
        seed: a.seed,
        text_size: a.text_size,
        unit_size: a.unit_size,
        vision_tokens: a.vision_tokens,
        vision_dim: a.vision_dim,
        task_mix: a.task_mix,
        n_train: a.n_train,
        n_dev: a.n_dev,
        n_test: a.n_test,
    };
    gen_corpus(&a.out, &manifest)?;
    println!(
        "{}",
        serde_json::json!({"out": a.out, "train": a.n_train, "dev": a.n_dev, "test": a.n_test})
    );
    Ok(())
}

fn validate(a: ValidateArgs) -> CliResult {
    let corpus = Corpus::load(&a.data)?;
    let n = corpus.validate()?;
    println!("{}", serde_json::json!({"valid": true, "records": n}));
    Ok(())
}

fn parse_stages(s: &str) -> CliResult<Vec<Stage>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Stage::ALL.to_vec());
    }
    let n: u8 = s.parse().map_err(|_| usage(format!("--stage must be 1, 2, 3 or all (got {s:?})")))?;
    Ok(vec![Stage::try_from(n)?])
}

/// The model a stage starts from: fresh for stage 1, otherwise the previous
/// stage's checkpoint.
fn starting_model<T: Scalar>(a: &TrainArgs, stage: Stage, cfg: &TrainConfig, seed: u64) -> CliResult<OmniModel<T>> {
    let prior = match (&a.init, stage) {
        (Some(p), _) => p.clone(),
        (None, Stage::One) => return Ok(OmniModel::new(cfg.model.clone(), seed)?),
        (None, s) => a.out.join(format!("stage{}.ckpt", s.number() - 1)),
    };
    if !prior.exists() {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!(
                "stage {stage} needs the stage {} checkpoint {} (run that stage first or pass --init)",
                stage.number() - 1,
                prior.display()
            ),
        });
    }
    let (model, meta) = load_checkpoint::<T>(&prior)?;
    if a.init.is_none() && meta.stage + 1 != stage.number() {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!("{} holds stage {}, stage {stage} needs stage {}", prior.display(), meta.stage, stage.number() - 1),
        });
    }
    if a.config.is_some() && meta.config != cfg.model {
        log::warn!("model section of --config differs from {}; using the checkpoint's", prior.display());
    }
    Ok(model)
}

fn train<T: Scalar>(a: TrainArgs) -> CliResult {
    let stages = parse_stages(&a.stage)?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        for s in Stage::ALL {
            cfg.stage_mut(s).steps = n;
        }
    }
    let corpus = Corpus::load(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let mut model: Option<OmniModel<T>> = None;
    for stage in stages {
        let mut m = match model.take() {
            Some(m) => m,
            None => starting_model::<T>(&a, stage, &cfg, cfg.seed)?,
        };
        let report_path = a.out.join(format!("stage{}.report.jsonl", stage.number()));
        let mut report = BufWriter::new(File::create(&report_path)?);
        let mut write_err = None;
        let rep = train_stage(&mut m, stage, cfg.stage(stage), TrainData::from(&corpus), cfg.seed, &mut |line| {
            if let ReportLine::Step { step, loss, .. } = line {
                if step % 50 == 0 {
                    log::info!("stage {stage} step {step} loss {loss:.4}");
                }
            }
            if let Err(e) = writeln!(report, "{}", line.to_json_line()).and_then(|_| report.flush()) {
                write_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = write_err {
            return Err(e.into());
        }
        let ckpt = a.out.join(format!("stage{}.ckpt", stage.number()));
        save_checkpoint(&ckpt, &m, stage.number(), cfg.seed)?;
        if let Some(s) = rep.summary() {
            println!("{}", s.to_json_line());
        }
        log::info!("wrote {} and {}", ckpt.display(), report_path.display());
        model = Some(m);
    }
    Ok(())
}

/// Interaction input: a bare object or a corpus record.
#[derive(Deserialize, Default)]
struct InferInput {
    #[serde(default, alias = "input_text")]
    text: Option<Vec<TokenId>>,
    #[serde(default, alias = "input_units")]
    units: Option<Vec<TokenId>>,
    /// Base64 little-endian f32 features.
    #[serde(default, alias = "vision_features")]
    vision: Option<String>,
}

fn read_input(path: &Path) -> CliResult<InferInput> {
    let mut s = String::new();
    if path == Path::new("-") {
        io::stdin().read_to_string(&mut s)?;
    } else {
        s = fs::read_to_string(path).map_err(|e| Failure {
            code: EXIT_DATA,
            message: format!("{}: {e}", path.display()),
        })?;
    }
    let first = s.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    serde_json::from_str(first).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("input {}: {e}", path.display()),
    })
}

fn model_for<T: Scalar>(path: &Path, fusion: Option<FusionType>) -> CliResult<OmniModel<T>> {
    let ck = read_checkpoint(path)?;
    let mut config: ModelConfig = ck.meta.config.clone();
    if let Some(f) = fusion {
        if f != config.fusion_type {
            log::warn!("checkpoint was trained with fusion {}; running {f}", config.fusion_type);
        }
        config.fusion_type = f;
    }
    let trained = ck.meta.config.fusion_type;
    Ok(ck.into_model_with(config).map_err(|e| {
        usage(format!("fusion does not fit the checkpoint (trained with {trained}): {e}"))
    })?.0)
}

fn infer<T: Scalar>(a: InferArgs) -> CliResult {
    let inputs = Inputs::parse(&a.modality_in)?;
    let route = modality_route(inputs, a.modality_out)?;
    let model = model_for::<T>(&a.model, a.fusion)?;
    let c = model.config().clone();
    let raw = read_input(&a.input)?;
    let missing = |what: &str| usage(format!("--modality-in {} needs {what} in the input", a.modality_in));
    let vision = match (inputs.vision, &raw.vision) {
        (true, Some(v)) => Some(decode_features(v, c.vision_tokens_per_image, c.vision_feature_dim)?),
        (true, None) => return Err(missing("vision")),
        (false, _) => None,
    };
    if inputs.speech && raw.units.as_ref().is_none_or(|u| u.is_empty()) {
        return Err(missing("units"));
    }
    if inputs.text && raw.text.as_ref().is_none_or(|t| t.is_empty()) {
        return Err(missing("text"));
    }
    let input = SessionInput {
        vision,
        units: if inputs.speech { raw.units.unwrap_or_default() } else { Vec::new() },
        text: if inputs.text { raw.text.unwrap_or_default() } else { Vec::new() },
    };
    let config = SessionConfig {
        wait_k: a.k,
        window: a.w,
        max_units_per_token: a.max_units_per_token,
        max_text_tokens: a.max_text_tokens,
        temperature: a.temperature,
        seed: a.seed,
        emit_chunks: true,
    };
    let session = Session::new(ModelBackend::new(Arc::new(model)), route, input, config)?;
    let mut out: Box<dyn Write> = match &a.trace {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    let (rx, handle) = spawn_session(session, 64);
    let mut failure = None;
    for ev in rx {
        match ev {
            Ok(e) => {
                writeln!(out, "{}", e.to_json_line(!a.no_timing))?;
                out.flush()?;
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    handle.join().map_err(|_| Failure {
        code: EXIT_NUMERIC,
        message: "session thread panicked".into(),
    })?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn eval<T: Scalar>(a: EvalArgs) -> CliResult {
    let (model, _) = load_checkpoint::<T>(&a.model)?;
    let corpus = Corpus::load(&a.data)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Dev => Split::Dev,
        SplitArg::Test => Split::Test,
    };
    let records = corpus.split(split);
    if records.is_empty() {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!("the {} split of {} is empty", split.name(), a.data.display()),
        });
    }
    let c = model.config().clone();
    let config = SessionConfig {
        wait_k: a.k,
        window: a.w,
        max_units_per_token: c.max_units_per_token,
        ..SessionConfig::default()
    };
    for r in eval_suite(&Arc::new(model), &corpus.world, records, a.task, a.limit, &config)? {
        println!("{}", serde_json::to_string(&r).map_err(OmniError::from)?);
    }
    Ok(())
}

fn fault_kind(name: &str) -> CliResult<OpKind> {
    Ok(match name {
        "matmul" => OpKind::MatMul,
        "attention" => OpKind::Attention,
        "rms_norm" => OpKind::RmsNorm,
        "silu" => OpKind::Silu,
        "softmax" => OpKind::Softmax,
        "cross_entropy" => OpKind::CrossEntropy,
        "ctc" => OpKind::Custom,
        other => return Err(usage(format!("unknown fault {other:?}"))),
    })
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let config = match &a.config {
        Some(p) => TrainConfig::load(p)?.model,
        None => ModelConfig::tiny(),
    };
    let fault = a.inject_fault.as_deref().map(fault_kind).transpose()?;
    let opts = GradCheckOptions {
        tolerance: a.tolerance,
        ..GradCheckOptions::default()
    };
    let mut all_passed = true;
    for i in 0..a.instances as u64 {
        let seed = a.seed.wrapping_mul(7919).wrapping_add(i);
        let ctc_opts = GradCheckOptions {
            max_probes: 64,
            seed,
            ..opts.clone()
        };
        let r = ctc_gradcheck(5, 4, seed, &ctc_opts, fault)?;
        all_passed &= r.passed;
        println!(
            "{}",
            serde_json::json!({"check": "ctc", "instance": i, "max_rel_err": r.worst(), "passed": r.passed})
        );
        let check = FullModelCheck {
            config: config.clone(),
            seed: a.seed,
        };
        let r = check.run(i, &opts, fault)?;
        all_passed &= r.passed;
        println!(
            "{}",
            serde_json::json!({
                "check": "model", "instance": i, "groups": r.groups, "max_rel_err": r.worst(), "passed": r.passed
            })
        );
    }
    println!(
        "{}",
        serde_json::json!({"instances": a.instances, "tolerance": a.tolerance, "passed": all_passed})
    );
    if all_passed {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_NUMERIC,
            message: "gradient check failed".into(),
        })
    }
}
