//! End-to-end glue: turn a rendered dataset into training examples, run the
//! training loops, and drive synthesis from checkpoints. The CLI and the
//! acceptance experiment both sit on top of this.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

use crate::audio::{read_wav, Pcm};
use crate::codec::{delay_apply, AudioTokens, FrameSpec, MelAnalyzer, RvqCodec};
use crate::dataset::ManifestRow;
use crate::midi_tok::{read_midi_file, tokenize, MidiTokenSeq, MidiVocab, NoteSequence};
use crate::model::{
    save_checkpoint, train_step, AdamConfig, AdamState, Mode, Model, ModelConfig, TrainExample,
};
use crate::sampler::{generate, GenStats, GuidanceConfig, SamplerConfig};
use crate::timbre::{SpectralFeaturizer, TimbreEmbedding};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no examples matched (split filter {0:?})")]
    NoExamples(Option<String>),
    #[error("checkpoint was built for K_a={ckpt_ka}, D={ckpt_d}; codec has K_a={codec_ka}, D={codec_d}")]
    CodecModelMismatch { ckpt_ka: usize, ckpt_d: usize, codec_ka: usize, codec_d: usize },
    #[error("checkpoint frame spec {ckpt:?} != codec frame spec {codec:?}")]
    FrameSpecMismatch { ckpt: FrameSpec, codec: FrameSpec },
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
    #[error(transparent)]
    Midi(#[from] crate::midi_tok::MidiTokError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Sampler(#[from] crate::sampler::SamplerError),
    #[error(transparent)]
    Timbre(#[from] crate::timbre::TimbreError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

/// One manifest row with everything tokenized and embedded.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub row: ManifestRow,
    pub notes: NoteSequence,
    pub midi: MidiTokenSeq,
    /// Target audio tokens in DELAYED layout.
    pub audio: AudioTokens,
    /// Embedding of the reference clip (same instrument, different notes).
    pub reference_embedding: TimbreEmbedding,
    pub target_pcm: Pcm,
    pub reference_pcm: Pcm,
}

/// Load, analyze, encode, and embed every manifest row (optionally filtered
/// by split).
pub fn prepare_examples(
    dataset_dir: &Path,
    manifest: &[ManifestRow],
    analyzer: &MelAnalyzer,
    codec: &RvqCodec,
    featurizer: &SpectralFeaturizer,
    vocab: &MidiVocab,
    split: Option<&str>,
) -> Result<Vec<PreparedExample>, PipelineError> {
    let selected: Vec<&ManifestRow> =
        manifest.iter().filter(|row| !split.is_some_and(|s| s != row.split)).collect();
    let out: Vec<PreparedExample> = selected
        .par_iter()
        .map(|row| -> Result<PreparedExample, PipelineError> {
            let target_pcm = read_wav(&dataset_dir.join(&row.tgt_wav))?;
            let reference_pcm = read_wav(&dataset_dir.join(&row.ref_wav))?;
            let notes = read_midi_file(&dataset_dir.join(&row.midi))?;
            let midi = tokenize(&notes, vocab);
            let mel = analyzer.analyze(&target_pcm)?;
            let aligned = crate::codec::encode(codec, &mel)?;
            let audio = delay_apply(&aligned)?;
            let reference_embedding = featurizer.embed_audio(&reference_pcm)?;
            Ok(PreparedExample {
                row: (*row).clone(),
                notes,
                midi,
                audio,
                reference_embedding,
                target_pcm,
                reference_pcm,
            })
        })
        .collect::<Result<_, _>>()?;
    if out.is_empty() {
        return Err(PipelineError::NoExamples(split.map(String::from)));
    }
    Ok(out)
}

/// Stack the mel frames of every target clip, for codec training.
pub fn collect_codec_frames(
    dataset_dir: &Path,
    manifest: &[ManifestRow],
    analyzer: &MelAnalyzer,
    max_clips: usize,
) -> Result<Array2<f64>, PipelineError> {
    let mel_bins = analyzer.spec.mel_bins as usize;
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for row in manifest.iter().take(max_clips.max(1)) {
        let pcm = read_wav(&dataset_dir.join(&row.tgt_wav))?;
        let mel = analyzer.analyze(&pcm)?;
        rows.extend(mel.iter());
        n += mel.nrows();
    }
    Ok(Array2::from_shape_vec((n, mel_bins), rows).expect("row-major mel frames"))
}

fn to_train_example(mode: Mode, ex: &PreparedExample) -> TrainExample {
    TrainExample {
        timbre: matches!(mode, Mode::Conditional).then(|| ex.reference_embedding.clone()),
        midi: (!matches!(mode, Mode::Unconditional)).then(|| ex.midi.clone()),
        audio: ex.audio.clone(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainRunConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Print a progress line every this many steps (0 = quiet).
    pub log_every: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Train a fresh model of the given mode over the prepared examples,
/// sampling batches in a seeded shuffle order.
pub fn train_model(
    mut cfg: ModelConfig,
    vocab: &MidiVocab,
    frame_spec: FrameSpec,
    examples: &[PreparedExample],
    run: &TrainRunConfig,
) -> Result<(Model, TrainSummary), PipelineError> {
    cfg.k_m = vocab.k_m as usize;
    let mut model = Model::new(cfg, vocab.clone(), frame_spec, run.seed)?;
    let mut adam = AdamState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut initial = None;
    let mut last = 0.0;
    for step in 0..run.steps {
        let mut batch = Vec::with_capacity(run.batch_size);
        for _ in 0..run.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(to_train_example(cfg.mode, &examples[order[cursor]]));
            cursor += 1;
        }
        let stats = train_step(&mut model, &batch, &run.adam, &mut adam, &mut rng)?;
        initial.get_or_insert(stats.loss.mean);
        last = stats.loss.mean;
        if run.log_every > 0 && (step + 1) % run.log_every == 0 {
            eprintln!(
                "step {}/{}: loss/token {:.4}",
                step + 1,
                run.steps,
                stats.loss.mean
            );
        }
    }
    Ok((
        model,
        TrainSummary { initial_loss: initial.unwrap_or(0.0), final_loss: last, steps: run.steps },
    ))
}

pub fn train_and_save(
    cfg: ModelConfig,
    vocab: &MidiVocab,
    frame_spec: FrameSpec,
    examples: &[PreparedExample],
    run: &TrainRunConfig,
    out: &Path,
) -> Result<TrainSummary, PipelineError> {
    let (model, summary) = train_model(cfg, vocab, frame_spec, examples, run)?;
    save_checkpoint(&model, out)?;
    Ok(summary)
}

/// Validate that a checkpoint can consume this codec's token stream.
pub fn check_model_codec_compat(model: &Model, codec: &RvqCodec) -> Result<(), PipelineError> {
    if model.cfg.k_a != codec.k_a() || model.cfg.depth != codec.depth() {
        return Err(PipelineError::CodecModelMismatch {
            ckpt_ka: model.cfg.k_a,
            ckpt_d: model.cfg.depth,
            codec_ka: codec.k_a(),
            codec_d: codec.depth(),
        });
    }
    if model.frame_spec != codec.spec {
        return Err(PipelineError::FrameSpecMismatch { ckpt: model.frame_spec, codec: codec.spec });
    }
    Ok(())
}

/// Generate tokens for one clip and decode them to audio.
pub fn synthesize_clip(
    cond: &Model,
    uncond: Option<&Model>,
    analyzer: &MelAnalyzer,
    codec: &RvqCodec,
    timbre: &TimbreEmbedding,
    midi: &MidiTokenSeq,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
) -> Result<(Pcm, AudioTokens, GenStats), PipelineError> {
    check_model_codec_compat(cond, codec)?;
    let (tokens, stats) = generate(cond, uncond, timbre, midi, sampler, guidance)?;
    let mel = crate::codec::decode(codec, &tokens)?;
    let pcm = analyzer.synthesize(&mel)?;
    Ok((pcm, tokens, stats))
}
