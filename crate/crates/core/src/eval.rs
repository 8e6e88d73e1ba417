//! Objective evaluation: multi-scale spectral loss, embedding cosine score,
//! and note-level F-score through the transcription model.

use ndarray::Array2;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::audio::{read_wav, Pcm};
use crate::codec::{delay_apply, AudioTokens, Layout, MelAnalyzer, RvqCodec};
use crate::dataset::ManifestRow;
use crate::midi_tok::{detokenize_lossy, read_midi_file, NoteSequence, TICK_SECONDS};
use crate::model::{Mode, Model, StepInput};
use crate::timbre::{SpectralFeaturizer, TimbreEmbedding};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("non-finite sample in input")]
    NonFiniteInput,
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("embedding dims differ: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("expected a {expected:?} checkpoint, got {got:?}")]
    ModeMismatch { expected: Mode, got: Mode },
    #[error("no outputs could be evaluated; missing: {}", .0.join(", "))]
    NothingToEvaluate(Vec<String>),
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
    #[error(transparent)]
    Timbre(#[from] crate::timbre::TimbreError),
    #[error(transparent)]
    Midi(#[from] crate::midi_tok::MidiTokError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

// --- Multi-scale spectral loss -------------------------------------------------

/// DDSP recipe: six FFT sizes at 75% overlap, linear plus log magnitude L1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MssConfig {
    pub fft_sizes: Vec<usize>,
    pub overlap: f64,
    pub eps: f64,
}

impl Default for MssConfig {
    fn default() -> Self {
        Self { fft_sizes: vec![2048, 1024, 512, 256, 128, 64], overlap: 0.75, eps: 1e-7 }
    }
}

fn magnitude_frames(samples: &[f32], size: usize, hop: usize) -> Array2<f64> {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(size);
    let bins = size / 2 + 1;
    let n_frames = if samples.len() <= size { 1 } else { (samples.len() - size) / hop + 1 };
    let window: Vec<f64> = (0..size)
        .map(|i| {
            let x = std::f64::consts::PI * i as f64 / size as f64;
            x.sin() * x.sin()
        })
        .collect();
    let mut out = Array2::zeros((n_frames, bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); size];
    for t in 0..n_frames {
        let start = t * hop;
        for i in 0..size {
            let s = samples.get(start + i).copied().unwrap_or(0.0) as f64;
            buf[i] = Complex64::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out[[t, k]] = buf[k].norm();
        }
    }
    out
}

/// Sum over FFT sizes of mean |S_a - S_b| + mean |log(S_a + eps) -
/// log(S_b + eps)|. The shorter input is zero-padded; the result is a
/// pseudometric (non-negative, symmetric, zero on identical inputs).
pub fn mss_loss(a: &Pcm, b: &Pcm, cfg: &MssConfig) -> Result<f64, EvalError> {
    if a.samples.iter().chain(&b.samples).any(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteInput);
    }
    let len = a.samples.len().max(b.samples.len());
    let pad = |p: &Pcm| {
        let mut v = p.samples.clone();
        v.resize(len, 0.0);
        v
    };
    let xa = pad(a);
    let xb = pad(b);
    let mut total = 0.0;
    for &size in &cfg.fft_sizes {
        let hop = ((1.0 - cfg.overlap) * size as f64).round().max(1.0) as usize;
        let sa = magnitude_frames(&xa, size, hop);
        let sb = magnitude_frames(&xb, size, hop);
        let n = sa.len() as f64;
        let mut lin = 0.0;
        let mut log = 0.0;
        for (va, vb) in sa.iter().zip(sb.iter()) {
            lin += (va - vb).abs();
            log += ((va + cfg.eps).ln() - (vb + cfg.eps).ln()).abs();
        }
        total += lin / n + log / n;
    }
    Ok(total)
}

/// Cosine similarity between two timbre embeddings.
pub fn clap_score(a: &TimbreEmbedding, b: &TimbreEmbedding) -> Result<f64, EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::DimMismatch { a: a.dim(), b: b.dim() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na < 1e-12 || nb < 1e-12 {
        return Err(EvalError::ZeroNorm);
    }
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

// --- Note matching --------------------------------------------------------------

/// Transcription matching criteria including offset timing: onset within
/// 50 ms, offset within max(50 ms, 20% of the reference duration), pitch
/// exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteMatchConfig {
    pub onset_tol_s: f64,
    pub offset_min_tol_s: f64,
    pub offset_ratio: f64,
}

impl Default for NoteMatchConfig {
    fn default() -> Self {
        Self { onset_tol_s: 0.05, offset_min_tol_s: 0.05, offset_ratio: 0.2 }
    }
}

fn admissible(r: &crate::midi_tok::NoteEvent, e: &crate::midi_tok::NoteEvent, cfg: &NoteMatchConfig) -> bool {
    if r.pitch != e.pitch {
        return false;
    }
    let onset_diff = (r.onset_seconds() - e.onset_seconds()).abs();
    if onset_diff > cfg.onset_tol_s + 1e-12 {
        return false;
    }
    let dur = (r.offset_ticks - r.onset_ticks) as f64 * TICK_SECONDS;
    let offset_tol = cfg.offset_min_tol_s.max(cfg.offset_ratio * dur);
    (r.offset_seconds() - e.offset_seconds()).abs() <= offset_tol + 1e-12
}

/// Maximum bipartite matching between reference and estimated notes
/// (augmenting paths), then precision/recall/F. Both empty scores (1,1,1);
/// one side empty scores zeros.
pub fn match_notes(
    reference: &NoteSequence,
    estimate: &NoteSequence,
    cfg: &NoteMatchConfig,
) -> (f64, f64, f64) {
    let nr = reference.len();
    let ne = estimate.len();
    if nr == 0 && ne == 0 {
        return (1.0, 1.0, 1.0);
    }
    if nr == 0 || ne == 0 {
        return (0.0, 0.0, 0.0);
    }
    let adj: Vec<Vec<usize>> = estimate
        .notes()
        .iter()
        .map(|e| {
            reference
                .notes()
                .iter()
                .enumerate()
                .filter(|(_, r)| admissible(r, e, cfg))
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    // Kuhn's algorithm from the estimate side
    let mut ref_match: Vec<Option<usize>> = vec![None; nr];
    fn try_assign(
        e: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        ref_match: &mut [Option<usize>],
    ) -> bool {
        for &r in &adj[e] {
            if !seen[r] {
                seen[r] = true;
                if ref_match[r].is_none()
                    || try_assign(ref_match[r].unwrap(), adj, seen, ref_match)
                {
                    ref_match[r] = Some(e);
                    return true;
                }
            }
        }
        false
    }
    let mut matches = 0usize;
    for e in 0..ne {
        let mut seen = vec![false; nr];
        if try_assign(e, &adj, &mut seen, &mut ref_match) {
            matches += 1;
        }
    }
    let p = matches as f64 / ne as f64;
    let r = matches as f64 / nr as f64;
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

// --- Transcription ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Transcription {
    pub notes: NoteSequence,
    /// Malformed 4-token groups dropped from the decoded tail.
    pub dropped_groups: usize,
}

/// Greedy decode: feed the audio span, then emit MIDI tokens by argmax until
/// EOS_MIDI or the token budget; malformed tail groups are dropped.
pub fn transcribe_tokens(model: &Model, tokens: &AudioTokens) -> Result<Transcription, EvalError> {
    if model.mode() != Mode::Transcription {
        return Err(EvalError::ModeMismatch { expected: Mode::Transcription, got: model.mode() });
    }
    let delayed = match tokens.layout() {
        Layout::Delayed => tokens.clone(),
        Layout::Aligned => delay_apply(tokens)?,
    };
    let mut state = model.new_decode_state();
    for row in delayed.rows() {
        model.decode_step(&mut state, &StepInput::Audio(row.clone()), None)?;
    }
    let mut hidden = model.decode_step(&mut state, &StepInput::BosMidi, None)?;
    let budget = model.cfg.max_seq.saturating_sub(delayed.num_rows() + 1);
    let mut out_tokens = Vec::new();
    for _ in 0..budget {
        let logits = model.midi_logits_one(&hidden);
        let id = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i as u32)
            .expect("non-empty logits");
        if id == model.vocab.eos_midi {
            break;
        }
        out_tokens.push(id);
        if out_tokens.len() >= budget {
            break;
        }
        hidden = model.decode_step(&mut state, &StepInput::Midi(id), None)?;
    }
    let (notes, dropped_groups) = detokenize_lossy(&out_tokens, &model.vocab);
    Ok(Transcription { notes, dropped_groups })
}

/// Transcribe raw audio by encoding it through the codec first.
pub fn transcribe_pcm(
    model: &Model,
    analyzer: &MelAnalyzer,
    codec: &RvqCodec,
    pcm: &Pcm,
) -> Result<Transcription, EvalError> {
    let mel = analyzer.analyze(pcm)?;
    let tokens = crate::codec::encode(codec, &mel)?;
    transcribe_tokens(model, &tokens)
}

// --- Run evaluation ---------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct EvalConfig {
    pub mss: MssConfig,
    pub notes: NoteMatchConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowEval {
    pub id: u64,
    pub variant: String,
    pub ref_eq_tgt: bool,
    pub mss: f64,
    pub clap: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f_score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSummary {
    pub ref_eq_tgt: bool,
    pub variant: String,
    pub n: usize,
    pub mss_mean: f64,
    pub clap_mean: f64,
    pub f_mean: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<RowEval>,
    pub groups: Vec<GroupSummary>,
    pub missing: Vec<String>,
}

/// Everything needed to score one run.
pub struct EvalContext<'a> {
    pub featurizer: &'a SpectralFeaturizer,
    pub analyzer: &'a MelAnalyzer,
    pub codec: &'a RvqCodec,
    pub transcriber: Option<&'a Model>,
    pub cfg: EvalConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OutputSidecar {
    ref_eq_tgt: bool,
}

/// Score synthesized outputs against manifest targets. For every row the
/// output is `outputs_dir/{id}_{variant}.wav`, with an optional
/// `{id}_{variant}.json` sidecar marking the ref=tgt condition. Missing
/// files are listed and the rest still evaluated; an entirely missing run
/// is an error naming every row.
pub fn evaluate_run(
    ctx: &EvalContext,
    manifest: &[ManifestRow],
    dataset_dir: &Path,
    outputs_dir: &Path,
) -> Result<EvalReport, EvalError> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    let mut sorted: Vec<&ManifestRow> = manifest.iter().collect();
    sorted.sort_by_key(|r| (r.id, r.variant.clone()));
    for row in sorted {
        let out_name = format!("{}_{}.wav", row.id, row.variant);
        let out_path = outputs_dir.join(&out_name);
        if !out_path.exists() {
            missing.push(out_name);
            continue;
        }
        let synth = read_wav(&out_path)?;
        let target = read_wav(&dataset_dir.join(&row.tgt_wav))?;
        let mss = mss_loss(&target, &synth, &ctx.cfg.mss)?;
        let e_t = ctx.featurizer.embed_audio(&target)?;
        let e_s = ctx.featurizer.embed_audio(&synth)?;
        let clap = clap_score(&e_t, &e_s)?;
        let (precision, recall, f_score) = match ctx.transcriber {
            Some(model) => {
                let truth = read_midi_file(&dataset_dir.join(&row.midi))?;
                let est = transcribe_pcm(model, ctx.analyzer, ctx.codec, &synth)?;
                let (p, r, f) = match_notes(&truth, &est.notes, &ctx.cfg.notes);
                (Some(p), Some(r), Some(f))
            }
            None => (None, None, None),
        };
        let ref_eq_tgt = {
            let sidecar = outputs_dir.join(format!("{}_{}.json", row.id, row.variant));
            match std::fs::read_to_string(&sidecar) {
                Ok(text) => serde_json::from_str::<OutputSidecar>(&text)
                    .map(|s| s.ref_eq_tgt)
                    .unwrap_or(false),
                Err(_) => false,
            }
        };
        rows.push(RowEval {
            id: row.id,
            variant: row.variant.clone(),
            ref_eq_tgt,
            mss,
            clap,
            precision,
            recall,
            f_score,
        });
    }
    if rows.is_empty() {
        return Err(EvalError::NothingToEvaluate(missing));
    }
    let mut groups = Vec::new();
    for ref_eq_tgt in [true, false] {
        for variant in ["dry", "wet"] {
            let sel: Vec<&RowEval> = rows
                .iter()
                .filter(|r| r.ref_eq_tgt == ref_eq_tgt && r.variant == variant)
                .collect();
            if sel.is_empty() {
                continue;
            }
            let n = sel.len() as f64;
            let f_vals: Vec<f64> = sel.iter().filter_map(|r| r.f_score).collect();
            groups.push(GroupSummary {
                ref_eq_tgt,
                variant: variant.into(),
                n: sel.len(),
                mss_mean: sel.iter().map(|r| r.mss).sum::<f64>() / n,
                clap_mean: sel.iter().map(|r| r.clap).sum::<f64>() / n,
                f_mean: (!f_vals.is_empty())
                    .then(|| f_vals.iter().sum::<f64>() / f_vals.len() as f64),
            });
        }
    }
    Ok(EvalReport { rows, groups, missing })
}

impl EvalReport {
    /// Human-readable summary mirroring the objective-evaluation table
    /// column order.
    pub fn summary_table(&self) -> String {
        let mut out = String::from(
            "Ref=Tgt | Ref Dry/Wet | MSS Loss (v) | CLAP Score (^) | F-Score (^) | n\n",
        );
        for g in &self.groups {
            let f = g.f_mean.map_or("   -  ".into(), |f| format!("{f:.4}"));
            out.push_str(&format!(
                "{:7} | {:11} | {:12.4} | {:14.4} | {} | {}\n",
                g.ref_eq_tgt, g.variant, g.mss_mean, g.clap_mean, f, g.n
            ));
        }
        if !self.missing.is_empty() {
            out.push_str(&format!("missing outputs: {}\n", self.missing.join(", ")));
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut text = String::new();
        for row in &self.rows {
            text.push_str(&serde_json::to_string(row).expect("row serializes"));
            text.push('\n');
        }
        std::fs::write(path, text)
    }
}
