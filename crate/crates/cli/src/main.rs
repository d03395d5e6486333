use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use emphasis_core::cbhg::CbhgConfig;
use emphasis_core::codec::{write_wav, AnalysisConfig};
use emphasis_core::corpus::{generate_corpus, load_corpus, save_corpus, split_train_val, ToyLanguageSpec};
use emphasis_core::frontend::{read_label_file, LabelUtterance, LinguisticSchema};
use emphasis_core::models::{load_acoustic, load_duration, AcousticConfig, AcousticModel, DurationConfig, DurationModel};
use emphasis_core::synthesis::{bench, check_cascade, synthesize_utterance};
use emphasis_core::trainer::{ablate_grouping, evaluate, train_acoustic, train_duration, LossHistory, TrainConfig};
use emphasis_core::verify::{run_suite, Level};
use emphasis_core::vocoder::Vocoder;
use emphasis_core::Error;
use serde_json::json;

const OUTPUT_VERSION: u32 = 1;
const VAL_FRACTION: f64 = 0.05;

#[derive(Parser)]
#[command(name = "emphasis", version, about = "Emotional speech synthesis cascade on a toy language")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusSize {
    /// 200 utterances.
    Small,
    /// 2000 utterances.
    Bench,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Duration,
    Acoustic,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelSize {
    Full,
    /// Shrunken trunks, for smoke tests.
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum VocoderArg {
    Sf,
    Gl,
}

impl From<VocoderArg> for Vocoder {
    fn from(v: VocoderArg) -> Self {
        match v {
            VocoderArg::Sf => Vocoder::SourceFilter,
            VocoderArg::Gl => Vocoder::GriffinLim,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Layers,
    Models,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic toy-language corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        /// Overrides the count implied by --size.
        #[arg(long)]
        utterances: Option<usize>,
        #[arg(long, env = "EMPHASIS_SEED", default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value = "small")]
        size: CorpusSize,
    },
    /// Train the duration or acoustic model; writes a checkpoint and a JSON loss history.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, env = "EMPHASIS_SEED", default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        patience: usize,
        /// Loss history path; defaults to `<out>.history.json`.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        model_size: ModelSize,
    },
    /// Synthesize one utterance of a label file to a WAV.
    Synth {
        #[arg(long)]
        duration_ckpt: PathBuf,
        #[arg(long)]
        acoustic_ckpt: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "sf")]
        vocoder: VocoderArg,
        #[arg(long, env = "EMPHASIS_SEED", default_value_t = 7)]
        seed: u64,
        /// Utterance to synthesize when the label file holds several.
        #[arg(long)]
        id: Option<String>,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        #[arg(long, value_enum)]
        level: LevelArg,
        #[arg(long, env = "EMPHASIS_SEED", default_value_t = 7)]
        seed: u64,
        /// Corrupt the backward pass of a component (negative control).
        #[arg(long, hide = true)]
        inject_fault: Vec<String>,
    },
    /// Time the synthesis cascade and report the real-time ratio.
    Bench {
        #[arg(long)]
        duration_ckpt: PathBuf,
        #[arg(long)]
        acoustic_ckpt: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, value_enum, default_value = "sf")]
        vocoder: VocoderArg,
        #[arg(long, env = "EMPHASIS_SEED", default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a trained cascade on a corpus.
    Eval {
        #[arg(long)]
        duration_ckpt: PathBuf,
        #[arg(long)]
        acoustic_ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train grouped and single-bank acoustic models and compare them.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, env = "EMPHASIS_SEED", default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        patience: usize,
        /// Fraction of utterances held out for the comparison metrics.
        #[arg(long, default_value_t = VAL_FRACTION)]
        val_fraction: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        model_size: ModelSize,
    },
}

enum Failure {
    Core(Error),
    Usage(String),
    Io(PathBuf, std::io::Error),
    Verify(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Io(..) => 3,
            Failure::Verify(_) => 6,
            Failure::Core(e) => match e {
                Error::Argument(_) | Error::Config(_) => 2,
                Error::Io { .. } | Error::Format { .. } => 3,
                Error::Training(_) => 4,
                Error::SchemaMismatch { .. } | Error::Encoding { .. } => 5,
                _ => 1,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Usage(m) => m.clone(),
            Failure::Io(p, e) => format!("I/O error on {}: {e}", p.display()),
            Failure::Verify(names) => format!("gradient check failed for: {}", names.join(", ")),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json"));
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).expect("json");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Failure::Io(path.to_path_buf(), e))
}

fn emit(value: &impl serde::Serialize, out: Option<&Path>) -> CmdResult {
    print_json(&serde_json::to_value(value).expect("json"));
    match out {
        Some(p) => write_json(p, value),
        None => Ok(()),
    }
}

fn duration_config(schema: LinguisticSchema, size: ModelSize, seed: u64) -> DurationConfig {
    match size {
        ModelSize::Full => DurationConfig::new(schema, seed),
        ModelSize::Tiny => DurationConfig::tiny(schema, seed),
    }
}

fn acoustic_config(schema: LinguisticSchema, analysis: AnalysisConfig, size: ModelSize, seed: u64) -> AcousticConfig {
    let trunk = match size {
        ModelSize::Full => CbhgConfig::acoustic(),
        ModelSize::Tiny => CbhgConfig::tiny_acoustic(),
    };
    AcousticConfig { trunk, analysis, ..AcousticConfig::new(schema, seed) }
}

fn gen_corpus(out: &Path, utterances: Option<usize>, seed: u64, size: CorpusSize) -> CmdResult {
    let n = utterances.unwrap_or(match size {
        CorpusSize::Small => 200,
        CorpusSize::Bench => 2000,
    });
    if n == 0 {
        return Err(Failure::Usage("--utterances must be at least 1".into()));
    }
    let schema = LinguisticSchema::default_toy();
    let analysis = AnalysisConfig::default();
    let corpus = generate_corpus(&ToyLanguageSpec::standard(), &schema, &analysis, n, seed)?;
    save_corpus(&corpus, out)?;
    let mut emotions = std::collections::BTreeMap::new();
    for u in &corpus.utterances {
        *emotions.entry(u.emotion.name()).or_insert(0usize) += 1;
    }
    print_json(&json!({
        "version": OUTPUT_VERSION,
        "out": out,
        "utterances": corpus.len(),
        "seed": seed,
        "emotions": emotions,
        "frames": corpus.utterances.iter().map(|u| u.frames.len()).sum::<usize>(),
    }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    stage: Stage,
    corpus_dir: &Path,
    out: &Path,
    epochs: usize,
    lr: f64,
    seed: u64,
    patience: usize,
    history: Option<PathBuf>,
    size: ModelSize,
) -> CmdResult {
    let corpus = load_corpus(corpus_dir)?;
    let (tr, va) = split_train_val(&corpus, VAL_FRACTION, seed)?;
    let cfg = TrainConfig { epochs, lr, seed, patience, checkpoint: Some(out.to_path_buf()), ..TrainConfig::default() };
    let hist = match stage {
        Stage::Duration => {
            let mut m = DurationModel::new(duration_config(corpus.schema.clone(), size, seed))?;
            train_duration(&mut m, &tr, &va, &cfg)?.history
        }
        Stage::Acoustic => {
            let c = acoustic_config(corpus.schema.clone(), corpus.analysis.clone(), size, seed);
            let mut m = AcousticModel::new(c)?;
            train_acoustic(&mut m, &tr, &va, &cfg)?.history
        }
    };
    let history_path = history.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".history.json");
        PathBuf::from(s)
    });
    hist.write(&history_path)?;
    print_summary(&hist, out, &history_path);
    Ok(())
}

fn print_summary(h: &LossHistory, ckpt: &Path, history: &Path) {
    let last = h.epochs.last().expect("at least one epoch");
    print_json(&json!({
        "version": OUTPUT_VERSION,
        "stage": h.stage,
        "checkpoint": ckpt,
        "history": history,
        "epochs_run": h.epochs.len(),
        "final_train_loss": last.train.total,
        "final_val_loss": last.val.total,
        "best_epoch": h.best_epoch,
        "best_val_loss": h.best_val_loss,
        "stopped_early": h.stopped_early,
    }));
}

fn load_cascade(d: &Path, a: &Path) -> Result<(DurationModel, AcousticModel), Failure> {
    let dur = load_duration(d)?;
    let ac = load_acoustic(a)?;
    check_cascade(&dur, &ac)?;
    Ok((dur, ac))
}

fn pick<'a>(utts: &'a [LabelUtterance], id: Option<&str>) -> Result<&'a LabelUtterance, Failure> {
    match (id, utts) {
        (Some(id), _) => utts
            .iter()
            .find(|u| u.id == id)
            .ok_or_else(|| Failure::Usage(format!("label file has no utterance `{id}`"))),
        (None, [one]) => Ok(one),
        (None, []) => Err(Failure::Usage("label file holds no utterances".into())),
        (None, _) => Err(Failure::Usage(format!("label file holds {} utterances; choose one with --id", utts.len()))),
    }
}

#[allow(clippy::too_many_arguments)]
fn synth(d: &Path, a: &Path, labels: &Path, out: &Path, vocoder: Vocoder, seed: u64, id: Option<&str>) -> CmdResult {
    let (dur, ac) = load_cascade(d, a)?;
    let utts = read_label_file(labels)?;
    let utt = pick(&utts, id)?;
    let s = synthesize_utterance(&dur, &ac, utt, vocoder, seed)?;
    let sr = ac.config.analysis.sample_rate;
    write_wav(out, &s.waveform, sr)?;
    print_json(&json!({
        "version": OUTPUT_VERSION,
        "id": utt.id,
        "out": out,
        "phonemes": s.durations.len(),
        "predicted_frames": s.durations.total(),
        "durations": s.durations.frames(),
        "samples": s.waveform.len(),
        "audio_seconds": s.audio_seconds(sr),
        "vocoder": vocoder,
    }));
    Ok(())
}

fn grad_check(level: LevelArg, seed: u64, faults: &[String]) -> CmdResult {
    let level = match level {
        LevelArg::Layers => Level::Layers,
        LevelArg::Models => Level::Models,
    };
    let summary = run_suite(level, seed, faults)?;
    for c in &summary.components {
        eprintln!(
            "{:<16} max rel err {:.3e} (< {:.0e}) {}",
            c.name,
            c.max_rel_error,
            c.threshold,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    print_json(&serde_json::to_value(&summary).expect("json"));
    if summary.passed {
        Ok(())
    } else {
        Err(Failure::Verify(summary.failing().into_iter().map(String::from).collect()))
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenCorpus { out, utterances, seed, size } => gen_corpus(&out, utterances, seed, size),
        Command::Train { stage, corpus, out, epochs, lr, seed, patience, history, model_size } => {
            train(stage, &corpus, &out, epochs, lr, seed, patience, history, model_size)
        }
        Command::Synth { duration_ckpt, acoustic_ckpt, labels, out, vocoder, seed, id } => {
            synth(&duration_ckpt, &acoustic_ckpt, &labels, &out, vocoder.into(), seed, id.as_deref())
        }
        Command::GradCheck { level, seed, inject_fault } => grad_check(level, seed, &inject_fault),
        Command::Bench { duration_ckpt, acoustic_ckpt, labels, repeats, vocoder, seed, out } => {
            let (dur, ac) = load_cascade(&duration_ckpt, &acoustic_ckpt)?;
            let utts = read_label_file(&labels)?;
            let report = bench(&dur, &ac, &utts, vocoder.into(), repeats, seed)?;
            emit(&report, out.as_deref())
        }
        Command::Eval { duration_ckpt, acoustic_ckpt, corpus, out } => {
            let (dur, ac) = load_cascade(&duration_ckpt, &acoustic_ckpt)?;
            let data = load_corpus(&corpus)?;
            let report = evaluate(&dur, &ac, &data)?;
            emit(&report, out.as_deref())
        }
        Command::Ablate { corpus, epochs, lr, seed, patience, val_fraction, out, model_size } => {
            if !(0.0..1.0).contains(&val_fraction) {
                return Err(Failure::Usage(format!("--val-fraction must be in [0, 1), got {val_fraction}")));
            }
            let data = load_corpus(&corpus)?;
            let (tr, va) = split_train_val(&data, val_fraction, seed)?;
            let cfg = TrainConfig { epochs, lr, seed, patience, ..TrainConfig::default() };
            let ac = acoustic_config(data.schema.clone(), data.analysis.clone(), model_size, seed);
            let report = ablate_grouping(&tr, &va, &ac, &cfg)?;
            emit(&report, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
