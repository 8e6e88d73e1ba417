//! Command-line surface: dataset building, codec/model training, synthesis,
//! transcription, evaluation, and embedding interpolation.

mod config;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use config::RunConfig;
use melsynth::codec::{load_codec, rvq_train, save_codec, MelAnalyzer};
use melsynth::dataset::{build_dataset, build_toy_bank, gen_corpus, load_corpus_dir, read_manifest, CorpusParams};
use melsynth::eval::{evaluate_run, transcribe_pcm, EvalConfig, EvalContext};
use melsynth::midi_tok::{read_midi_file, tokenize, write_midi_file, MidiVocab};
use melsynth::model::{load_checkpoint, AdamConfig, Mode, ModelConfig};
use melsynth::pipeline::{
    collect_codec_frames, prepare_examples, synthesize_clip, train_and_save, TrainRunConfig,
};
use melsynth::sampler::{GuidanceConfig, GuidanceMode, SamplerConfig};
use melsynth::timbre::{
    interpolate, load_embedding_file, save_embedding_file, SpectralFeaturizer, TimbreEmbedding,
};

/// Exit-code categories: 2 usage/config, 3 data/file, 4 checkpoint/mode
/// mismatch, 1 anything else.
#[derive(Debug, Clone, Copy)]
enum Category {
    Usage = 2,
    Data = 3,
    Checkpoint = 4,
    Internal = 1,
}

struct CliError {
    category: Category,
    source: anyhow::Error,
}

type CliResult = Result<(), CliError>;

trait Categorize<T> {
    fn usage(self) -> Result<T, CliError>;
    fn data(self) -> Result<T, CliError>;
    fn ckpt(self) -> Result<T, CliError>;
    fn internal(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Categorize<T> for Result<T, E> {
    fn usage(self) -> Result<T, CliError> {
        self.map_err(|e| CliError { category: Category::Usage, source: e.into() })
    }
    fn data(self) -> Result<T, CliError> {
        self.map_err(|e| CliError { category: Category::Data, source: e.into() })
    }
    fn ckpt(self) -> Result<T, CliError> {
        self.map_err(|e| CliError { category: Category::Checkpoint, source: e.into() })
    }
    fn internal(self) -> Result<T, CliError> {
        self.map_err(|e| CliError { category: Category::Internal, source: e.into() })
    }
}

#[derive(Parser)]
#[command(
    name = "melsynth",
    about = "Desk-scale token-based neural synthesizer: render data, train the codec and transformer, synthesize, transcribe, evaluate",
    version
)]
struct Cli {
    /// Config file (TOML); defaults come from $MELSYNTH_CONFIG or built-ins.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// When set, snapshot the resolved config and seeds into this directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a paired dataset from the procedural bank and MIDI corpus.
    BuildDataset(BuildDatasetArgs),
    /// Train the RVQ codec on a dataset's target clips.
    TrainCodec(TrainCodecArgs),
    /// Train a transformer (conditional, unconditional, or transcription).
    Train(TrainArgs),
    /// Generate audio for a MIDI file under timbre conditioning.
    Synthesize(SynthesizeArgs),
    /// Transcribe audio to MIDI with a transcription checkpoint.
    Transcribe(TranscribeArgs),
    /// Score synthesized outputs against a dataset manifest.
    Evaluate(EvaluateArgs),
    /// Interpolate timbre embeddings and write the result.
    InterpolateEmbed(InterpolateArgs),
}

#[derive(Args)]
struct BuildDatasetArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base pair count.
    #[arg(long)]
    size: Option<usize>,
    /// Fraction of pairs that also get a wet (effects) copy; 1.0 doubles rows.
    #[arg(long)]
    augment_fraction: Option<f64>,
    /// Procedural instrument count.
    #[arg(long)]
    instruments: Option<usize>,
    /// Procedural corpus clip count.
    #[arg(long)]
    corpus_clips: Option<usize>,
    /// Use .mid files from this directory instead of the procedural corpus.
    #[arg(long)]
    corpus_dir: Option<PathBuf>,
    /// Build seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainCodecArgs {
    /// Dataset directory (with manifest.jsonl).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output codec checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Codebook depth D.
    #[arg(long)]
    depth: Option<usize>,
    /// Codebook size K_a.
    #[arg(long)]
    k_a: Option<usize>,
    /// k-means iterations per stage.
    #[arg(long)]
    iters: Option<usize>,
    /// Cap on clips scanned for training frames.
    #[arg(long)]
    max_clips: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMode {
    Cond,
    Uncond,
    Transcribe,
}

#[derive(Args)]
struct TrainArgs {
    /// Conditioning mode.
    #[arg(long, value_enum)]
    mode: TrainMode,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Codec checkpoint used to tokenize audio.
    #[arg(long)]
    codec: Option<PathBuf>,
    /// Output model checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Architecture preset: "toy" or "paper".
    #[arg(long)]
    preset: Option<String>,
    /// Train on one split only ("train" or "test"); default uses all rows.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Conditional model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Codec checkpoint.
    #[arg(long)]
    codec: Option<PathBuf>,
    /// Input MIDI file.
    #[arg(long)]
    midi: PathBuf,
    /// Output WAV path.
    #[arg(long)]
    out: PathBuf,
    /// Unconditional checkpoint (required for guidance).
    #[arg(long)]
    uncond: Option<PathBuf>,
    /// Reference audio for the timbre embedding.
    #[arg(long)]
    timbre_audio: Option<PathBuf>,
    /// Precomputed embedding file (text or .f32).
    #[arg(long)]
    timbre_file: Option<PathBuf>,
    /// Interpolation weight toward the file embedding when both sources are
    /// given: e = alpha * file + (1 - alpha) * audio.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Guidance strength.
    #[arg(long)]
    gamma: Option<f64>,
    /// Guidance schedule.
    #[arg(long, value_parser = ["none", "all", "first-note"])]
    guidance: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TranscribeArgs {
    /// Transcription model checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    codec: Option<PathBuf>,
    /// Input WAV.
    #[arg(long)]
    audio: PathBuf,
    /// Output MIDI path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory of synthesized outputs ({id}_{variant}.wav).
    #[arg(long)]
    outputs: Option<PathBuf>,
    /// Transcription checkpoint for the F-score column.
    #[arg(long)]
    transcriber: Option<PathBuf>,
    #[arg(long)]
    codec: Option<PathBuf>,
    /// Report path (line-delimited records); default outputs/report.jsonl.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InterpolateArgs {
    /// Audio side of the interpolation (e_a).
    #[arg(long)]
    timbre_audio: Option<PathBuf>,
    /// File side of the interpolation (e_t).
    #[arg(long)]
    timbre_file: Option<PathBuf>,
    /// e = alpha * e_t + (1 - alpha) * e_a.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Output embedding file (text format).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match RunConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(Category::Usage as u8);
        }
    };
    match run(cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.category as u8)
        }
    }
}

fn run(cli: Cli, mut cfg: RunConfig) -> CliResult {
    // fold command-line overrides into the config so the snapshot reflects
    // the resolved run
    apply_overrides(&cli.command, &mut cfg);
    if let Some(run_dir) = &cli.run_dir {
        cfg.snapshot(run_dir).internal()?;
    }
    match &cli.command {
        Command::BuildDataset(args) => cmd_build_dataset(args, &cfg),
        Command::TrainCodec(args) => cmd_train_codec(args, &cfg),
        Command::Train(args) => cmd_train(args, &cfg),
        Command::Synthesize(args) => cmd_synthesize(args, &cfg),
        Command::Transcribe(args) => cmd_transcribe(args, &cfg),
        Command::Evaluate(args) => cmd_evaluate(args, &cfg),
        Command::InterpolateEmbed(args) => cmd_interpolate(args, &cfg),
    }
}

fn apply_overrides(command: &Command, cfg: &mut RunConfig) {
    match command {
        Command::BuildDataset(a) => {
            if let Some(v) = &a.out {
                cfg.paths.dataset = v.clone();
            }
            if let Some(v) = a.size {
                cfg.dataset.size = v;
            }
            if let Some(v) = a.augment_fraction {
                cfg.dataset.augment_fraction = v;
            }
            if let Some(v) = a.instruments {
                cfg.dataset.instruments = v;
            }
            if let Some(v) = a.corpus_clips {
                cfg.dataset.corpus_clips = v;
            }
            if let Some(v) = a.seed {
                cfg.seeds.build = v;
            }
        }
        Command::TrainCodec(a) => {
            if let Some(v) = &a.dataset {
                cfg.paths.dataset = v.clone();
            }
            if let Some(v) = a.depth {
                cfg.codec.depth = v;
            }
            if let Some(v) = a.k_a {
                cfg.codec.k_a = v;
            }
            if let Some(v) = a.iters {
                cfg.codec.iters = v;
            }
            if let Some(v) = a.max_clips {
                cfg.codec.max_clips = v;
            }
            if let Some(v) = a.seed {
                cfg.seeds.codec = v;
            }
        }
        Command::Train(a) => {
            if let Some(v) = &a.dataset {
                cfg.paths.dataset = v.clone();
            }
            if let Some(v) = a.steps {
                cfg.train.steps = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = a.lr {
                cfg.train.lr = v;
            }
            if let Some(v) = &a.preset {
                cfg.model.preset = v.clone();
            }
            if let Some(v) = a.seed {
                cfg.seeds.train = v;
            }
        }
        Command::Synthesize(a) => {
            if let Some(v) = a.top_p {
                cfg.sampler.top_p = v;
            }
            if let Some(v) = a.temperature {
                cfg.sampler.temperature = v;
            }
            if let Some(v) = a.gamma {
                cfg.guidance.gamma = v;
            }
            if let Some(v) = &a.guidance {
                cfg.guidance.mode = v.clone();
            }
            if let Some(v) = a.seed {
                cfg.seeds.sample = v;
            }
        }
        Command::Evaluate(a) => {
            if let Some(v) = &a.dataset {
                cfg.paths.dataset = v.clone();
            }
            if let Some(v) = &a.outputs {
                cfg.paths.outputs = v.clone();
            }
        }
        Command::Transcribe(_) | Command::InterpolateEmbed(_) => {}
    }
}

fn cmd_build_dataset(args: &BuildDatasetArgs, cfg: &RunConfig) -> CliResult {
    let out = &cfg.paths.dataset;
    let bank = build_toy_bank(cfg.dataset.instruments, cfg.seeds.bank, cfg.frame.sample_rate)
        .usage()?;
    let corpus = match &args.corpus_dir {
        Some(dir) => load_corpus_dir(dir).data()?,
        None => gen_corpus(
            cfg.dataset.corpus_clips,
            &CorpusParams {
                notes_min: cfg.dataset.notes_min,
                notes_max: cfg.dataset.notes_max,
                pitch_lo: cfg.dataset.pitch_lo,
                pitch_hi: cfg.dataset.pitch_hi,
                onset_grid_ticks: cfg.dataset.onset_grid_ticks,
                dur_min_ticks: cfg.dataset.dur_min_ticks,
                dur_max_ticks: cfg.dataset.dur_max_ticks,
                dur_grid_ticks: cfg.dataset.dur_grid_ticks,
            },
            cfg.seeds.corpus,
        ),
    };
    let rows = build_dataset(
        &bank,
        &corpus,
        cfg.dataset.size,
        cfg.dataset.augment_fraction,
        out,
        cfg.seeds.build,
    )
    .data()?;
    println!(
        "wrote {} manifest rows ({} base pairs) to {}",
        rows.len(),
        cfg.dataset.size,
        out.display()
    );
    Ok(())
}

fn default_codec_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoints.join("codec.bin")
}

fn cmd_train_codec(args: &TrainCodecArgs, cfg: &RunConfig) -> CliResult {
    let dataset = &cfg.paths.dataset;
    let manifest = read_manifest(&dataset.join("manifest.jsonl")).data()?;
    let spec = cfg.frame.to_spec();
    let analyzer = MelAnalyzer::new(spec).usage()?;
    let frames = collect_codec_frames(dataset, &manifest, &analyzer, cfg.codec.max_clips).data()?;
    println!("training RVQ on {} mel frames", frames.nrows());
    let codec = rvq_train(&frames, spec, cfg.codec.depth, cfg.codec.k_a, cfg.codec.iters, cfg.seeds.codec)
        .data()?;
    let mses = melsynth::codec::residual_mse_by_depth(&codec, &frames).internal()?;
    for (d, mse) in mses.iter().enumerate() {
        println!("  residual mse after stage {}: {mse:.6}", d + 1);
    }
    let out = args.out.clone().unwrap_or_else(|| default_codec_path(cfg));
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| anyhow!(e)).data()?;
    }
    save_codec(&codec, &out).data()?;
    println!("codec checkpoint: {}", out.display());
    Ok(())
}

fn preset_config(name: &str, mode: Mode) -> Result<ModelConfig, CliError> {
    match name {
        "toy" => Ok(ModelConfig::toy(mode)),
        "paper" => Ok(ModelConfig::paper(mode)),
        other => Err(anyhow!("unknown preset {other:?}; use \"toy\" or \"paper\""))
            .usage(),
    }
}

fn cmd_train(args: &TrainArgs, cfg: &RunConfig) -> CliResult {
    let mode = match args.mode {
        TrainMode::Cond => Mode::Conditional,
        TrainMode::Uncond => Mode::Unconditional,
        TrainMode::Transcribe => Mode::Transcription,
    };
    let codec_path = args.codec.clone().unwrap_or_else(|| default_codec_path(cfg));
    let codec = load_codec(&codec_path).ckpt()?;
    let analyzer = MelAnalyzer::new(codec.spec).usage()?;
    let featurizer =
        SpectralFeaturizer::new(cfg.model.d_clap, codec.spec.sample_rate).usage()?;
    let vocab = MidiVocab::standard();
    let dataset = &cfg.paths.dataset;
    let manifest = read_manifest(&dataset.join("manifest.jsonl")).data()?;
    let examples = prepare_examples(
        dataset,
        &manifest,
        &analyzer,
        &codec,
        &featurizer,
        &vocab,
        args.split.as_deref(),
    )
    .data()?;
    println!("prepared {} examples", examples.len());

    let mut model_cfg = preset_config(&cfg.model.preset, mode)?;
    model_cfg.depth = codec.depth();
    model_cfg.k_a = codec.k_a();
    model_cfg.d_clap = cfg.model.d_clap;
    let run = TrainRunConfig {
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        adam: AdamConfig { lr: cfg.train.lr, ..AdamConfig::default() },
        seed: cfg.seeds.train,
        log_every: cfg.train.log_every,
    };
    let out = args.out.clone().unwrap_or_else(|| {
        let name = match mode {
            Mode::Conditional => "cond.ckpt",
            Mode::Unconditional => "uncond.ckpt",
            Mode::Transcription => "transcribe.ckpt",
        };
        cfg.paths.checkpoints.join(name)
    });
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| anyhow!(e)).data()?;
    }
    let summary =
        train_and_save(model_cfg, &vocab, codec.spec, &examples, &run, &out).internal()?;
    println!(
        "trained {:?} for {} steps: loss/token {:.4} -> {:.4}",
        mode, summary.steps, summary.initial_loss, summary.final_loss
    );
    println!("model checkpoint: {}", out.display());
    Ok(())
}

/// Resolve the timbre embedding from --timbre-audio / --timbre-file /
/// --alpha per the interpolation rule.
fn resolve_timbre(
    audio: Option<&Path>,
    file: Option<&Path>,
    alpha: Option<f64>,
    d_clap: usize,
    sample_rate: u32,
) -> Result<TimbreEmbedding, CliError> {
    let featurizer = SpectralFeaturizer::new(d_clap, sample_rate).usage()?;
    let e_audio = match audio {
        Some(p) => {
            let pcm = melsynth::audio::read_wav(p).data()?;
            Some(featurizer.embed_audio(&pcm).data()?)
        }
        None => None,
    };
    let e_file = match file {
        Some(p) => Some(load_embedding_file(p, d_clap).data()?),
        None => None,
    };
    match (e_audio, e_file) {
        (Some(a), Some(t)) => interpolate(&a, &t, alpha.unwrap_or(0.5)).data(),
        (Some(a), None) => Ok(a),
        (None, Some(t)) => Ok(t),
        (None, None) => {
            Err(anyhow!("provide --timbre-audio and/or --timbre-file")).usage()
        }
    }
}

fn parse_guidance_mode(name: &str) -> Result<GuidanceMode, CliError> {
    match name {
        "none" => Ok(GuidanceMode::None),
        "all" => Ok(GuidanceMode::AllSteps),
        "first-note" => Ok(GuidanceMode::FirstNote),
        other => Err(anyhow!("unknown guidance mode {other:?}")).usage(),
    }
}

fn cmd_synthesize(args: &SynthesizeArgs, cfg: &RunConfig) -> CliResult {
    let cond = load_checkpoint(&args.model).ckpt()?;
    if cond.mode() != Mode::Conditional {
        return Err(anyhow!(
            "--model must be a conditional checkpoint, got {:?}",
            cond.mode()
        ))
        .ckpt();
    }
    let codec_path = args.codec.clone().unwrap_or_else(|| default_codec_path(cfg));
    let codec = load_codec(&codec_path).ckpt()?;
    let analyzer = MelAnalyzer::new(codec.spec).usage()?;
    let uncond = match &args.uncond {
        Some(p) => Some(load_checkpoint(p).ckpt()?),
        None => None,
    };
    let notes = read_midi_file(&args.midi).data()?;
    let midi = tokenize(&notes, &cond.vocab);
    let timbre = resolve_timbre(
        args.timbre_audio.as_deref(),
        args.timbre_file.as_deref(),
        args.alpha,
        cond.cfg.d_clap,
        codec.spec.sample_rate,
    )?;
    let sampler = SamplerConfig {
        top_p: cfg.sampler.top_p,
        temperature: cfg.sampler.temperature,
        seed: cfg.seeds.sample,
        max_frames: if cfg.sampler.max_frames == 0 { usize::MAX } else { cfg.sampler.max_frames },
    };
    let guidance = GuidanceConfig {
        gamma: cfg.guidance.gamma,
        mode: parse_guidance_mode(&cfg.guidance.mode)?,
    };
    let (pcm, tokens, stats) = synthesize_clip(
        &cond,
        uncond.as_ref(),
        &analyzer,
        &codec,
        &timbre,
        &midi,
        &sampler,
        &guidance,
    )
    .ckpt()?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| anyhow!(e)).data()?;
        }
    }
    melsynth::audio::write_wav(&pcm, &args.out).data()?;
    println!(
        "synthesized {} frames x {} codebooks (seed {}, guided steps: {:?}) -> {}",
        tokens.n(),
        tokens.depth(),
        stats.seed,
        stats.guided_steps,
        args.out.display()
    );
    Ok(())
}

fn cmd_transcribe(args: &TranscribeArgs, cfg: &RunConfig) -> CliResult {
    let model = load_checkpoint(&args.model).ckpt()?;
    if model.mode() != Mode::Transcription {
        return Err(anyhow!(
            "--model must be a transcription checkpoint, got {:?}",
            model.mode()
        ))
        .ckpt();
    }
    let codec_path = args.codec.clone().unwrap_or_else(|| default_codec_path(cfg));
    let codec = load_codec(&codec_path).ckpt()?;
    let analyzer = MelAnalyzer::new(codec.spec).usage()?;
    let pcm = melsynth::audio::read_wav(&args.audio).data()?;
    let result = transcribe_pcm(&model, &analyzer, &codec, &pcm).internal()?;
    write_midi_file(&result.notes, &args.out).data()?;
    println!(
        "transcribed {} notes ({} malformed groups dropped) -> {}",
        result.notes.len(),
        result.dropped_groups,
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs, cfg: &RunConfig) -> CliResult {
    let dataset = &cfg.paths.dataset;
    let outputs = &cfg.paths.outputs;
    let manifest = read_manifest(&dataset.join("manifest.jsonl")).data()?;
    let codec_path = args.codec.clone().unwrap_or_else(|| default_codec_path(cfg));
    let codec = load_codec(&codec_path).ckpt()?;
    let analyzer = MelAnalyzer::new(codec.spec).usage()?;
    let featurizer =
        SpectralFeaturizer::new(cfg.model.d_clap, codec.spec.sample_rate).usage()?;
    let transcriber = match &args.transcriber {
        Some(p) => {
            let m = load_checkpoint(p).ckpt()?;
            if m.mode() != Mode::Transcription {
                return Err(anyhow!("--transcriber must be a transcription checkpoint")).ckpt();
            }
            Some(m)
        }
        None => None,
    };
    let ctx = EvalContext {
        featurizer: &featurizer,
        analyzer: &analyzer,
        codec: &codec,
        transcriber: transcriber.as_ref(),
        cfg: EvalConfig::default(),
    };
    let report = evaluate_run(&ctx, &manifest, dataset, outputs).data()?;
    let report_path = args.report.clone().unwrap_or_else(|| outputs.join("report.jsonl"));
    report
        .write_jsonl(&report_path)
        .with_context(|| format!("writing {}", report_path.display()))
        .data()?;
    print!("{}", report.summary_table());
    println!("per-row report: {}", report_path.display());
    Ok(())
}

fn cmd_interpolate(args: &InterpolateArgs, cfg: &RunConfig) -> CliResult {
    let e = resolve_timbre(
        args.timbre_audio.as_deref(),
        args.timbre_file.as_deref(),
        Some(args.alpha),
        cfg.model.d_clap,
        cfg.frame.sample_rate,
    )?;
    save_embedding_file(&e, &args.out).data()?;
    println!("wrote {}-dim embedding to {}", e.dim(), args.out.display());
    Ok(())
}
