use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use sspool_core::dsp::{self, AugmentConfig, AugmentDraw};
use sspool_core::eval::{self, ProbeConfig, Representation, SegmentationConfig};
use sspool_core::fsutil;
use sspool_core::softpool::{boundaries_csv, matrix_csv, unnormalized_kernel};
use sspool_core::synth::{self, CorpusConfig, MANIFEST_FILE, TRIPLES_FILE};
use sspool_core::trainer::{self, Checkpoint, TrainConfig};

use crate::error::{CliError, Context};

#[derive(Debug, Parser)]
#[command(name = "sspool", version, about = "Boundary-predicting soft pooling on synthetic speech")]
pub struct Cli {
    /// Worker threads for data-parallel stages [default: available cores]
    #[arg(long, global = true, env = "SSPOOL_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with labels and a manifest
    Synth(SynthArgs),
    /// Augment one WAV and write the result with its alignment map
    Augment(AugmentArgs),
    /// Train a model from a manifest
    Train(TrainArgs),
    /// Score predicted boundaries against reference labels
    EvalSeg(EvalSegArgs),
    /// ABX error on a triples file
    EvalAbx(EvalAbxArgs),
    /// Linear speaker-probe accuracy
    EvalProbe(EvalProbeArgs),
    /// Dump boundary probabilities and unnormalized attention for one WAV
    DumpPooling(DumpPoolingArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Minutes of audio to generate (ignored when --utterances is set)
    #[arg(long, default_value_t = 30.0)]
    minutes: f64,
    /// Exact number of utterances
    #[arg(long)]
    utterances: Option<usize>,
    #[arg(long, default_value_t = 4)]
    speakers: usize,
    /// Size of the unit inventory
    #[arg(long, default_value_t = 20)]
    units: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also render this many ABX triples into <out>/abx
    #[arg(long, default_value_t = 0)]
    abx_triples: usize,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Input WAV
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    segments: usize,
    #[arg(long, default_value_t = 0.8)]
    stretch_min: f64,
    #[arg(long, default_value_t = 1.25)]
    stretch_max: f64,
    #[arg(long, default_value_t = -2.0, allow_negative_numbers = true)]
    pitch_min: f64,
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    pitch_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Objective {
    Joint,
    Cpc,
    Contr,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON training configuration [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus manifest
    #[arg(long)]
    data: PathBuf,
    /// Run directory
    #[arg(long)]
    out: PathBuf,
    /// Override the step count [default: from config]
    #[arg(long)]
    steps: Option<u64>,
    /// Override the batch size [default: from config]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override the seed [default: from config]
    #[arg(long)]
    seed: Option<u64>,
    /// Override the learning rate [default: from config]
    #[arg(long)]
    lr: Option<f64>,
    /// Override which losses are active [default: from config]
    #[arg(long, value_enum)]
    objective: Option<Objective>,
}

#[derive(Debug, Args)]
struct SegFlags {
    /// Matching tolerance in seconds
    #[arg(long, default_value_t = 0.02)]
    tolerance: f64,
    /// Minimum boundary probability for a peak
    #[arg(long, default_value_t = SegmentationConfig::default().threshold)]
    threshold: f64,
    /// Peaks closer than this many frames are merged
    #[arg(long, default_value_t = SegmentationConfig::default().min_gap_frames)]
    min_gap: usize,
}

#[derive(Debug, Args)]
struct EvalSegArgs {
    /// Checkpoint to evaluate (required unless --oracle)
    #[arg(long, required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    /// Score the reference boundaries against themselves
    #[arg(long, conflicts_with = "ckpt")]
    oracle: bool,
    /// Corpus manifest
    #[arg(long)]
    data: PathBuf,
    /// Directory of TIMIT-style .PHN files named after each WAV
    #[arg(long)]
    phn_dir: Option<PathBuf>,
    #[command(flatten)]
    seg: SegFlags,
    /// Also write the JSON report here
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Repr {
    Z,
    C,
    S,
}

impl From<Repr> for Representation {
    fn from(r: Repr) -> Self {
        match r {
            Repr::Z => Representation::Z,
            Repr::C => Representation::C,
            Repr::S => Representation::S,
        }
    }
}

#[derive(Debug, Args)]
struct EvalAbxArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// triples.jsonl written by `synth --abx-triples`
    #[arg(long)]
    triples: PathBuf,
    /// Representation to compare
    #[arg(long, value_enum, default_value_t = Repr::Z)]
    repr: Repr,
    /// Also write the JSON report here
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus manifest
    #[arg(long)]
    data: PathBuf,
    /// Representation to probe
    #[arg(long, value_enum, default_value_t = Repr::Z)]
    repr: Repr,
    /// Seed of the train/test split
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of each speaker's utterances held out
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    /// Also write the JSON report here
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DumpPoolingArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input WAV
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fsutil::write_atomic_str(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
    s.push('\n');
    write_text(path, &s)
}

fn emit(v: &Value, report: Option<&Path>) -> Result<(), CliError> {
    if let Some(p) = report {
        write_json(p, v)?;
    }
    println!("{}", serde_json::to_string_pretty(v).expect("values serialize"));
    Ok(())
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).context(format!("loading checkpoint {}", path.display()))
}

impl Cli {
    pub fn run(self) -> Result<(), CliError> {
        if let Some(n) = self.threads {
            if n == 0 {
                return Err(CliError::Usage("--threads must be at least 1".into()));
            }
            // fails only if a pool already exists, which cannot happen here
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        match self.command {
            Command::Synth(a) => synth_cmd(a),
            Command::Augment(a) => augment_cmd(a),
            Command::Train(a) => train_cmd(a),
            Command::EvalSeg(a) => eval_seg_cmd(a),
            Command::EvalAbx(a) => eval_abx_cmd(a),
            Command::EvalProbe(a) => eval_probe_cmd(a),
            Command::DumpPooling(a) => dump_pooling_cmd(a),
        }
    }
}

fn synth_cmd(a: SynthArgs) -> Result<(), CliError> {
    let config = CorpusConfig {
        n_utterances: a.utterances,
        minutes: Some(a.minutes),
        n_speakers: a.speakers,
        n_units: a.units,
        seed: a.seed,
        ..Default::default()
    };
    config.validate().context("corpus configuration")?;
    let entries = synth::generate_corpus(&config, &a.out).context(format!("writing corpus to {}", a.out.display()))?;
    let manifest = a.out.join(MANIFEST_FILE);
    let triples = if a.abx_triples > 0 {
        let dir = a.out.join("abx");
        synth::generate_abx_triples(&manifest, a.abx_triples, a.seed, &dir).context("rendering ABX triples")?;
        Some(dir.join(TRIPLES_FILE))
    } else {
        None
    };
    emit(
        &json!({
            "manifest": manifest,
            "n_utterances": entries.len(),
            "triples": triples,
            "n_triples": a.abx_triples,
            "config": to_value(&config),
        }),
        None,
    )
}

fn augment_cmd(a: AugmentArgs) -> Result<(), CliError> {
    let config = AugmentConfig {
        n_segments: a.segments,
        stretch_range: (a.stretch_min, a.stretch_max),
        pitch_range_semitones: (a.pitch_min, a.pitch_max),
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let audio = dsp::load_wav(&a.input).context(format!("reading {}", a.input.display()))?;
    let draw = AugmentDraw::sample(&config, a.seed);
    let (out, map) = dsp::augment_with(&audio, &draw).context("augmenting")?;
    let wav = a.out.join("augmented.wav");
    let bytes = dsp::wav_bytes(&out).context("encoding wav")?;
    fsutil::write_atomic(&wav, &bytes).map_err(|source| CliError::Io { path: wav.clone(), source })?;
    let csv = a.out.join("alignment.csv");
    write_text(&csv, &map.to_csv())?;
    let report = json!({
        "input": a.input,
        "augmented": wav,
        "alignment": csv,
        "seed": a.seed,
        "rates": draw.rates,
        "semitones": draw.semitones,
        "original_seconds": audio.duration(),
        "augmented_seconds": out.duration(),
        "config": to_value(&config),
    });
    emit(&report, Some(&a.out.join("augment.json")))
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let mut config = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| CliError::Io { path: p.clone(), source })?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|source| CliError::Json { path: p.clone(), source })?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.steps {
        config.steps = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.lr {
        config.lr = v;
    }
    if let Some(o) = a.objective {
        config.cpc_on = o != Objective::Contr;
        config.contr_on = o != Objective::Cpc;
    }
    config.validate().context("training configuration")?;
    write_json(&a.out.join("config.json"), &to_value(&config))?;
    let summary = trainer::train(&config, &a.data, &a.out).context(format!("training on {}", a.data.display()))?;
    emit(
        &json!({
            "checkpoint": a.out.join(trainer::FINAL_CHECKPOINT),
            "step": summary.checkpoint.step,
            "metrics": a.out.join(trainer::METRICS_FILE),
            "final": summary.metrics.last().map(to_value),
            "collapse_warnings": summary.collapse_warnings,
            "config": to_value(&config),
        }),
        None,
    )
}

fn eval_seg_cmd(a: EvalSegArgs) -> Result<(), CliError> {
    let cfg = SegmentationConfig {
        tolerance: a.seg.tolerance,
        threshold: a.seg.threshold,
        min_gap_frames: a.seg.min_gap,
        ..Default::default()
    };
    if !(cfg.tolerance >= 0.0) {
        return Err(CliError::Usage(format!("--tolerance {} must be non-negative", cfg.tolerance)));
    }
    let score = match &a.ckpt {
        Some(ckpt) => {
            let model = load_checkpoint(ckpt)?.model().context("rebuilding model")?;
            eval::evaluate_segmentation(&model, &a.data, a.phn_dir.as_deref(), &cfg)
        }
        None => eval::evaluate_segmentation_with(&a.data, a.phn_dir.as_deref(), &cfg, |_, r| Ok(r.to_vec())),
    }
    .context("segmentation")?;
    let mut v = to_value(&score);
    v["checkpoint"] = json!(a.ckpt);
    v["oracle"] = json!(a.oracle);
    v["data"] = json!(a.data);
    v["phn_dir"] = json!(a.phn_dir);
    v["config"] = to_value(&cfg);
    emit(&v, a.report.as_deref())
}

fn eval_abx_cmd(a: EvalAbxArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&a.ckpt)?.model().context("rebuilding model")?;
    let triples = synth::load_abx_triples(&a.triples).context(format!("reading {}", a.triples.display()))?;
    let base = a.triples.parent().unwrap_or(Path::new("."));
    let res = eval::abx_error(&model, &triples, base, a.repr.into()).context("ABX")?;
    let mut v = to_value(&res);
    v["checkpoint"] = json!(a.ckpt);
    v["triples"] = json!(a.triples);
    v["repr"] = to_value(&Representation::from(a.repr));
    emit(&v, a.report.as_deref())
}

fn eval_probe_cmd(a: EvalProbeArgs) -> Result<(), CliError> {
    let cfg = ProbeConfig { seed: a.seed, test_fraction: a.test_fraction, ..Default::default() };
    let model = load_checkpoint(&a.ckpt)?.model().context("rebuilding model")?;
    let accuracy = eval::speaker_probe(&model, &a.data, &cfg, a.repr.into()).context("speaker probe")?;
    emit(
        &json!({
            "accuracy": accuracy,
            "checkpoint": a.ckpt,
            "data": a.data,
            "repr": to_value(&Representation::from(a.repr)),
            "config": to_value(&cfg),
        }),
        a.report.as_deref(),
    )
}

fn dump_pooling_cmd(a: DumpPoolingArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let model = ckpt.model().context("rebuilding model")?;
    let audio = dsp::load_wav(&a.input).context(format!("reading {}", a.input.display()))?;
    let probs = eval::boundary_probs(&model, &audio).context("boundary prediction")?;
    let att = &ckpt.config.attention;
    let heads = att.heads(probs.len());
    let probs64: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
    let kernel = unnormalized_kernel(&probs64, heads, att.sigma).context("attention kernel")?;
    let bpath = a.out.join("boundaries.csv");
    write_text(&bpath, &boundaries_csv(&probs))?;
    let apath = a.out.join("attention.csv");
    write_text(&apath, &matrix_csv(&kernel))?;
    let report = json!({
        "input": a.input,
        "checkpoint": a.ckpt,
        "boundaries": bpath,
        "attention": apath,
        "frames": probs.len(),
        "heads": heads,
        "sigma": att.sigma,
        "boundary_sum": probs64.iter().sum::<f64>(),
    });
    emit(&report, Some(&a.out.join("pooling.json")))
}
