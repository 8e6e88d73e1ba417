//! Paired (reference, target) clip rendering from a procedural note-sample
//! bank and a MIDI corpus, with a seeded EQ / distortion / reverb
//! augmentation chain applied identically to both sides of a pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::audio::{write_wav, AudioError, Pcm};
use crate::midi_tok::{velocity_gain, MidiTokError, NoteSequence, CLIP_TICKS, TICK_SECONDS};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("need at least {need} items, got {got}")]
    TooSmall { need: usize, got: usize },
    #[error("instrument {0} not in bank")]
    UnknownInstrument(usize),
    #[error("pitch {pitch} outside bank coverage {lo}..={hi} beyond shift range")]
    PitchOutOfCoverage { pitch: u8, lo: u8, hi: u8 },
    #[error("could not draw two distinct note sequences after {0} retries")]
    PairDrawFailed(usize),
    #[error("dataset size must be >= 1")]
    SizeZero,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    BadManifest { line: usize, message: String },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Midi(#[from] MidiTokError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

/// SplitMix64; derives stable per-item seeds from a build seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// --- Procedural instruments ---------------------------------------------------

/// Deterministic synthesis recipe: harmonic profile plus ADSR envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentRecipe {
    /// Harmonic amplitude rolloff exponent.
    pub decay_exp: f64,
    /// Gain applied to even harmonics (odd ones stay at 1).
    pub even_gain: f64,
    /// Number of harmonics before the Nyquist cap.
    pub max_harmonics: usize,
    /// Detune of the second oscillator in cents.
    pub detune_cents: f64,
    /// Fixed body-resonance center; emphasizes harmonics near it regardless
    /// of the note's pitch.
    pub formant_hz: f64,
    pub formant_gain: f64,
    /// Log-frequency width of the resonance.
    pub formant_sigma: f64,
    pub attack_s: f64,
    pub decay_s: f64,
    pub sustain: f64,
    pub release_s: f64,
}

/// Instrument recipes plus the pitch range they cover. Note samples are
/// synthesized on demand from the recipe (a lazy view of the
/// (pitch, velocity) -> pcm map), so renders stay bit-deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteSampleBank {
    pub instruments: Vec<InstrumentRecipe>,
    pub sample_rate: u32,
    pub pitch_lo: u8,
    pub pitch_hi: u8,
}

/// Build `n_instruments` deterministic recipes. Same seed, same bank.
pub fn build_toy_bank(n_instruments: usize, seed: u64, sample_rate: u32) -> Result<NoteSampleBank, DatasetError> {
    if n_instruments < 2 {
        return Err(DatasetError::TooSmall { need: 2, got: n_instruments });
    }
    let mut instruments = Vec::with_capacity(n_instruments);
    for i in 0..n_instruments {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        // spread brightness and odd/even balance across the bank so timbres
        // separate far more than note content does
        let frac = i as f64 / (n_instruments - 1).max(1) as f64;
        let decay_exp = 0.3 + 3.0 * frac + rng.gen_range(-0.05..0.05);
        let even_gain = if i % 2 == 0 { rng.gen_range(0.02..0.12) } else { rng.gen_range(0.85..1.0) };
        instruments.push(InstrumentRecipe {
            decay_exp,
            even_gain,
            max_harmonics: 3 + ((1.0 - frac) * 13.0) as usize + rng.gen_range(0..2),
            detune_cents: rng.gen_range(0.0..4.0),
            formant_hz: 400.0 * 8f64.powf(frac) * rng.gen_range(0.95..1.05),
            formant_gain: rng.gen_range(2.5..3.5),
            formant_sigma: rng.gen_range(0.3..0.45),
            attack_s: rng.gen_range(0.003..0.04),
            decay_s: rng.gen_range(0.05..0.3),
            sustain: rng.gen_range(0.5..0.9),
            release_s: rng.gen_range(0.03..0.12),
        });
    }
    Ok(NoteSampleBank { instruments, sample_rate, pitch_lo: 21, pitch_hi: 108 })
}

impl NoteSampleBank {
    /// Synthesize one note at unit velocity: harmonics under the recipe's
    /// profile shaped by the ADSR envelope. The signal runs for the note
    /// duration plus the release tail.
    pub fn note_pcm(
        &self,
        instrument: usize,
        pitch: u8,
        dur_s: f64,
    ) -> Result<Vec<f32>, DatasetError> {
        let recipe =
            self.instruments.get(instrument).ok_or(DatasetError::UnknownInstrument(instrument))?;
        // nearest-pitch shift fills small gaps outside the covered range
        let eff_pitch = if pitch < self.pitch_lo {
            if self.pitch_lo - pitch > 6 {
                return Err(DatasetError::PitchOutOfCoverage {
                    pitch,
                    lo: self.pitch_lo,
                    hi: self.pitch_hi,
                });
            }
            self.pitch_lo
        } else if pitch > self.pitch_hi {
            if pitch - self.pitch_hi > 6 {
                return Err(DatasetError::PitchOutOfCoverage {
                    pitch,
                    lo: self.pitch_lo,
                    hi: self.pitch_hi,
                });
            }
            self.pitch_hi
        } else {
            pitch
        };
        let sr = self.sample_rate as f64;
        let f0 = 440.0 * 2f64.powf((eff_pitch as f64 - 69.0) / 12.0);
        let detune = 2f64.powf(recipe.detune_cents / 1200.0);
        let n_total = ((dur_s + recipe.release_s) * sr).round() as usize;
        let n_hold = (dur_s * sr).round() as usize;

        // harmonic set capped below Nyquist
        let mut harmonics = Vec::new();
        let mut norm = 0.0;
        for k in 1..=recipe.max_harmonics {
            let f = f0 * k as f64;
            if f >= 0.45 * sr {
                break;
            }
            let resonance = {
                let x = (f / recipe.formant_hz).ln() / recipe.formant_sigma;
                1.0 + recipe.formant_gain * (-0.5 * x * x).exp()
            };
            let amp = (k as f64).powf(-recipe.decay_exp)
                * if k % 2 == 0 { recipe.even_gain } else { 1.0 }
                * resonance;
            norm += amp;
            harmonics.push((f, amp));
        }
        if harmonics.is_empty() {
            harmonics.push((f0.min(0.4 * sr), 1.0));
            norm = 1.0;
        }

        let mut out = vec![0.0f32; n_total];
        let two_pi = 2.0 * std::f64::consts::PI;
        for (i, s) in out.iter_mut().enumerate() {
            let t = i as f64 / sr;
            // ADSR
            let env = if i >= n_hold {
                let rel_t = (i - n_hold) as f64 / sr;
                recipe.sustain * (1.0 - rel_t / recipe.release_s).max(0.0)
            } else if t < recipe.attack_s {
                t / recipe.attack_s
            } else if t < recipe.attack_s + recipe.decay_s {
                1.0 - (1.0 - recipe.sustain) * (t - recipe.attack_s) / recipe.decay_s
            } else {
                recipe.sustain
            };
            let mut v = 0.0;
            for &(f, amp) in &harmonics {
                v += amp * (two_pi * f * t).sin();
                v += 0.3 * amp * (two_pi * f * detune * t).sin();
            }
            *s = (0.5 * env * v / (1.3 * norm)) as f32;
        }
        Ok(out)
    }
}

/// Overlap-add render of a note sequence into a 5 s clip. Each note is the
/// bank sample placed at its onset, enveloped to its offset, and scaled by
/// the velocity-bucket gain; the mix is peak-limited to -1 dBFS only if it
/// would otherwise clip.
pub fn render_clip(
    bank: &NoteSampleBank,
    instrument: usize,
    notes: &NoteSequence,
) -> Result<Pcm, DatasetError> {
    let sr = bank.sample_rate;
    let clip_len = (CLIP_TICKS as f64 * TICK_SECONDS * sr as f64).round() as usize;
    let mut mix = vec![0.0f32; clip_len];
    for n in notes.notes() {
        let dur_s = (n.offset_ticks - n.onset_ticks) as f64 * TICK_SECONDS;
        let gain = velocity_gain(n.velocity_bucket);
        let sig = bank.note_pcm(instrument, n.pitch, dur_s)?;
        let start = (n.onset_seconds() * sr as f64).round() as usize;
        for (i, &v) in sig.iter().enumerate() {
            if start + i >= clip_len {
                break;
            }
            mix[start + i] += gain * v;
        }
    }
    let mut pcm = Pcm::new(mix, sr);
    pcm.limit_peak(0.891); // -1 dBFS
    Ok(pcm)
}

// --- Effect chain --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqBand {
    pub center_hz: f64,
    pub gain_db: f64,
    pub q: f64,
}

/// Sampled chain parameters. Every field is drawn even when its stage is
/// disabled, so the draw structure is seed-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectChainParams {
    pub eq_enabled: bool,
    pub eq_bands: [EqBand; 3],
    pub distortion_enabled: bool,
    pub drive: f64,
    pub reverb_enabled: bool,
    pub decay_s: f64,
    pub wet: f64,
    pub seed: u64,
}

impl EffectChainParams {
    pub fn disabled() -> Self {
        Self {
            eq_enabled: false,
            eq_bands: [EqBand { center_hz: 1000.0, gain_db: 0.0, q: 1.0 }; 3],
            distortion_enabled: false,
            drive: 1.0,
            reverb_enabled: false,
            decay_s: 1.0,
            wet: 0.0,
            seed: 0,
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.eq_enabled || self.distortion_enabled || self.reverb_enabled
    }
}

/// Draw chain parameters: each stage enabled independently with
/// probability 0.5, parameters from the documented ranges.
pub fn sample_effect_chain(seed: u64) -> EffectChainParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eq_enabled = rng.gen_range(0.0..1.0) < 0.5;
    let mut eq_bands = [EqBand { center_hz: 0.0, gain_db: 0.0, q: 0.0 }; 3];
    for band in &mut eq_bands {
        let log_lo = 100f64.ln();
        let log_hi = 8000f64.ln();
        band.center_hz = (log_lo + (log_hi - log_lo) * rng.gen_range(0.0..1.0)).exp();
        band.gain_db = rng.gen_range(-9.0..9.0);
        band.q = rng.gen_range(0.5..4.0);
    }
    let distortion_enabled = rng.gen_range(0.0..1.0) < 0.5;
    let drive = rng.gen_range(1.0..10.0);
    let reverb_enabled = rng.gen_range(0.0..1.0) < 0.5;
    let decay_s = rng.gen_range(0.3..2.0);
    let wet = rng.gen_range(0.1..0.5);
    EffectChainParams {
        eq_enabled,
        eq_bands,
        distortion_enabled,
        drive,
        reverb_enabled,
        decay_s,
        wet,
        seed,
    }
}

/// RBJ peaking biquad, direct form I with f64 state.
fn peaking_biquad(samples: &mut [f32], sr: f64, band: &EqBand) {
    let a = 10f64.powf(band.gain_db / 40.0);
    let w0 = 2.0 * std::f64::consts::PI * band.center_hz / sr;
    let alpha = w0.sin() / (2.0 * band.q);
    let cos_w0 = w0.cos();
    let b0 = 1.0 + alpha * a;
    let b1 = -2.0 * cos_w0;
    let b2 = 1.0 - alpha * a;
    let a0 = 1.0 + alpha / a;
    let a1 = -2.0 * cos_w0;
    let a2 = 1.0 - alpha / a;
    let (b0, b1, b2, a1, a2) = (b0 / a0, b1 / a0, b2 / a0, a1 / a0, a2 / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for s in samples.iter_mut() {
        let x = *s as f64;
        let y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x;
        y2 = y1;
        y1 = y;
        *s = y as f32;
    }
}

/// Smooth saturating waveshaper, normalized so full scale maps to full scale.
fn waveshape(samples: &mut [f32], drive: f64) {
    let norm = drive.tanh();
    for s in samples.iter_mut() {
        *s = ((*s as f64 * drive).tanh() / norm) as f32;
    }
}

/// Schroeder reverberator: four parallel feedback combs into two series
/// allpasses, mixed wet/dry. Output keeps the input length.
fn schroeder_reverb(samples: &[f32], sr: f64, decay_s: f64, wet: f64) -> Vec<f32> {
    const COMB_MS: [f64; 4] = [29.7, 37.1, 41.1, 43.7];
    const ALLPASS_MS: [f64; 2] = [5.0, 1.7];
    let n = samples.len();
    let mut wet_sum = vec![0.0f64; n];
    for &ms in &COMB_MS {
        let delay = ((ms / 1000.0) * sr).round() as usize;
        let g = 10f64.powf(-3.0 * (ms / 1000.0) / decay_s);
        let mut buf = vec![0.0f64; delay.max(1)];
        let mut idx = 0usize;
        for i in 0..n {
            let delayed = buf[idx];
            let v = samples[i] as f64 + g * delayed;
            buf[idx] = v;
            idx = (idx + 1) % buf.len();
            wet_sum[i] += delayed;
        }
    }
    for v in wet_sum.iter_mut() {
        *v *= 0.25;
    }
    for &ms in &ALLPASS_MS {
        let delay = ((ms / 1000.0) * sr).round() as usize;
        let g = 0.7;
        let mut buf = vec![0.0f64; delay.max(1)];
        let mut idx = 0usize;
        for v in wet_sum.iter_mut() {
            let delayed = buf[idx];
            let y = -g * *v + delayed;
            buf[idx] = *v + g * y;
            idx = (idx + 1) % buf.len();
            *v = y;
        }
    }
    samples
        .iter()
        .zip(&wet_sum)
        .map(|(&dry, &w)| ((1.0 - wet) * dry as f64 + wet * w) as f32)
        .collect()
}

/// Apply the chain in fixed order EQ -> distortion -> reverb. With every
/// stage disabled this is the exact identity.
pub fn apply_effects(pcm: &Pcm, params: &EffectChainParams) -> Pcm {
    if !params.any_enabled() {
        return pcm.clone();
    }
    let sr = pcm.sample_rate as f64;
    let mut samples = pcm.samples.clone();
    if params.eq_enabled {
        for band in &params.eq_bands {
            peaking_biquad(&mut samples, sr, band);
        }
    }
    if params.distortion_enabled {
        waveshape(&mut samples, params.drive);
    }
    if params.reverb_enabled {
        samples = schroeder_reverb(&samples, sr, params.decay_s, params.wet);
    }
    let mut out = Pcm::new(samples, pcm.sample_rate);
    out.limit_peak(0.99);
    out
}

// --- Corpus ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub notes_min: usize,
    pub notes_max: usize,
    pub pitch_lo: u8,
    pub pitch_hi: u8,
    /// Onsets land on multiples of this many 10 ms ticks.
    pub onset_grid_ticks: u16,
    pub dur_min_ticks: u16,
    pub dur_max_ticks: u16,
    /// Durations land on multiples of this many ticks.
    pub dur_grid_ticks: u16,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            notes_min: 1,
            notes_max: 16,
            pitch_lo: 36,
            pitch_hi: 84,
            onset_grid_ticks: 1,
            dur_min_ticks: 10,
            dur_max_ticks: 200,
            dur_grid_ticks: 1,
        }
    }
}

/// Generate a deterministic corpus of random clips.
pub fn gen_corpus(n_clips: usize, params: &CorpusParams, seed: u64) -> Vec<NoteSequence> {
    let mut out = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let n_notes = rng.gen_range(params.notes_min..=params.notes_max);
        let mut notes = Vec::with_capacity(n_notes);
        let grid = params.onset_grid_ticks.max(1);
        let max_slot = (CLIP_TICKS - 1 - params.dur_min_ticks) / grid;
        let dur_grid = params.dur_grid_ticks.max(1);
        for _ in 0..n_notes {
            let onset = rng.gen_range(0..=max_slot) * grid;
            let dur_lo = params.dur_min_ticks.div_ceil(dur_grid);
            let dur_hi = (params.dur_max_ticks / dur_grid).max(dur_lo);
            let dur = rng.gen_range(dur_lo..=dur_hi) * dur_grid;
            let offset = (onset + dur).min(CLIP_TICKS - 1).max(onset + 1);
            let pitch = rng.gen_range(params.pitch_lo..=params.pitch_hi);
            let bucket = rng.gen_range(0..4u8);
            if let Ok(n) = crate::midi_tok::NoteEvent::new(onset, offset, pitch, bucket) {
                notes.push(n);
            }
        }
        out.push(NoteSequence::new_dedup(notes));
    }
    out
}

/// Load every `.mid` file in a directory as a corpus, sorted by file name.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<NoteSequence>, DatasetError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mid"))
        .collect();
    paths.sort();
    paths.iter().map(|p| crate::midi_tok::read_midi_file(p).map_err(Into::into)).collect()
}

// --- Pairs and dataset builds ------------------------------------------------

/// A reference/target pair: same instrument, same effects, different notes.
#[derive(Debug, Clone)]
pub struct PairedExample {
    pub reference_pcm: Pcm,
    pub target_pcm: Pcm,
    pub reference_notes: NoteSequence,
    pub target_notes: NoteSequence,
    pub instrument_id: usize,
    pub effects: EffectChainParams,
}

/// Draw two distinct clips, render both with one instrument, and (when
/// augmenting) pass both through one sampled effect chain.
pub fn make_pair(
    bank: &NoteSampleBank,
    corpus: &[NoteSequence],
    instrument: usize,
    augment: bool,
    seed: u64,
) -> Result<PairedExample, DatasetError> {
    if corpus.len() < 2 {
        return Err(DatasetError::TooSmall { need: 2, got: corpus.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ri = rng.gen_range(0..corpus.len());
    let mut ti = rng.gen_range(0..corpus.len());
    let mut retries = 0;
    while corpus[ti] == corpus[ri] {
        retries += 1;
        if retries > 16 {
            return Err(DatasetError::PairDrawFailed(16));
        }
        ti = rng.gen_range(0..corpus.len());
    }
    let effects = if augment {
        sample_effect_chain(derive_seed(seed, 0xEFFEC7))
    } else {
        EffectChainParams::disabled()
    };
    let reference_dry = render_clip(bank, instrument, &corpus[ri])?;
    let target_dry = render_clip(bank, instrument, &corpus[ti])?;
    Ok(PairedExample {
        reference_pcm: apply_effects(&reference_dry, &effects),
        target_pcm: apply_effects(&target_dry, &effects),
        reference_notes: corpus[ri].clone(),
        target_notes: corpus[ti].clone(),
        instrument_id: instrument,
        effects,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: u64,
    pub instrument: usize,
    pub variant: String, // "dry" | "wet"
    pub ref_wav: String,
    pub tgt_wav: String,
    pub midi: String,
    pub effects: EffectChainParams,
    pub split: String, // "train" | "test"
}

/// Render `size` base pairs into `out_dir`; the first
/// `round(augment_fraction * size)` also get a wet copy under the same id,
/// so `augment_fraction = 1.0` doubles the row count. Pure function of
/// (bank, corpus, size, augment_fraction, seed).
pub fn build_dataset(
    bank: &NoteSampleBank,
    corpus: &[NoteSequence],
    size: usize,
    augment_fraction: f64,
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<ManifestRow>, DatasetError> {
    if size == 0 {
        return Err(DatasetError::SizeZero);
    }
    if corpus.len() < 2 {
        return Err(DatasetError::TooSmall { need: 2, got: corpus.len() });
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let n_wet = (augment_fraction * size as f64).round() as usize;
    // examples are independent and seeded per id, so the parallel build
    // produces the same artifacts as a serial one
    let per_id: Vec<Vec<ManifestRow>> = (0..size as u64)
        .into_par_iter()
        .map(|id| -> Result<Vec<ManifestRow>, DatasetError> {
            let instrument = (id as usize) % bank.instruments.len();
            let pair_seed = derive_seed(seed, id);
            let split = if id % 10 == 9 { "test" } else { "train" };
            let mut rows = Vec::with_capacity(2);

            let dry = make_pair(bank, corpus, instrument, false, pair_seed)?;
            let midi_path = out_dir.join(format!("{id}.mid"));
            crate::midi_tok::write_midi_file(&dry.target_notes, &midi_path)?;
            let ref_dry = out_dir.join(format!("{id}_ref_dry.wav"));
            let tgt_dry = out_dir.join(format!("{id}_tgt_dry.wav"));
            write_wav(&dry.reference_pcm, &ref_dry)?;
            write_wav(&dry.target_pcm, &tgt_dry)?;
            rows.push(ManifestRow {
                id,
                instrument,
                variant: "dry".into(),
                ref_wav: ref_dry.file_name().unwrap().to_string_lossy().into_owned(),
                tgt_wav: tgt_dry.file_name().unwrap().to_string_lossy().into_owned(),
                midi: midi_path.file_name().unwrap().to_string_lossy().into_owned(),
                effects: dry.effects.clone(),
                split: split.into(),
            });

            if (id as usize) < n_wet {
                // same pair, one sampled chain applied to both sides
                let wet = make_pair(bank, corpus, instrument, true, pair_seed)?;
                debug_assert_eq!(wet.target_notes, dry.target_notes);
                let ref_wet = out_dir.join(format!("{id}_ref_wet.wav"));
                let tgt_wet = out_dir.join(format!("{id}_tgt_wet.wav"));
                write_wav(&wet.reference_pcm, &ref_wet)?;
                write_wav(&wet.target_pcm, &tgt_wet)?;
                rows.push(ManifestRow {
                    id,
                    instrument,
                    variant: "wet".into(),
                    ref_wav: ref_wet.file_name().unwrap().to_string_lossy().into_owned(),
                    tgt_wav: tgt_wet.file_name().unwrap().to_string_lossy().into_owned(),
                    midi: midi_path.file_name().unwrap().to_string_lossy().into_owned(),
                    effects: wet.effects.clone(),
                    split: split.into(),
                });
            }
            Ok(rows)
        })
        .collect::<Result<_, _>>()?;
    let rows: Vec<ManifestRow> = per_id.into_iter().flatten().collect();
    write_manifest(&rows, &out_dir.join("manifest.jsonl"))?;
    Ok(rows)
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<(), DatasetError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("manifest row serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| DatasetError::BadManifest { line: i + 1, message: e.to_string() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi_tok::NoteEvent;

    fn small_bank() -> NoteSampleBank {
        build_toy_bank(4, 7, 16000).unwrap()
    }

    #[test]
    fn bank_build_is_deterministic_and_rejects_tiny() {
        assert!(matches!(build_toy_bank(1, 0, 16000), Err(DatasetError::TooSmall { .. })));
        let a = build_toy_bank(4, 7, 16000).unwrap();
        let b = build_toy_bank(4, 7, 16000).unwrap();
        assert_eq!(a, b);
        let c = build_toy_bank(4, 8, 16000).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bank_instruments_are_timbrally_distinct() {
        let bank = small_bank();
        let f = crate::timbre::SpectralFeaturizer::new(64, 16000).unwrap();
        let notes = NoteSequence::new(vec![NoteEvent::new(0, 200, 60, 3).unwrap()]).unwrap();
        let embeds: Vec<_> = (0..4)
            .map(|i| f.embed_audio(&render_clip(&bank, i, &notes).unwrap()).unwrap())
            .collect();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let cos = embeds[i].cosine(&embeds[j]).unwrap();
                assert!(cos < 0.99, "instruments {i},{j} cosine {cos}");
            }
        }
    }

    #[test]
    fn render_empty_sequence_is_silence() {
        let bank = small_bank();
        let pcm = render_clip(&bank, 0, &NoteSequence::empty()).unwrap();
        assert_eq!(pcm.samples.len(), 80_000);
        assert!(pcm.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn render_single_note_places_enveloped_sample() {
        let bank = small_bank();
        let notes =
            NoteSequence::new(vec![NoteEvent::new(100, 200, 60, 3).unwrap()]).unwrap();
        let pcm = render_clip(&bank, 1, &notes).unwrap();
        // silent before onset
        assert!(pcm.samples[..16_000].iter().all(|&s| s == 0.0));
        // matches the bank sample at unit velocity gain
        let sig = bank.note_pcm(1, 60, 1.0).unwrap();
        for (i, &v) in sig.iter().enumerate() {
            let j = 16_000 + i;
            if j >= pcm.samples.len() {
                break;
            }
            assert_eq!(pcm.samples[j], v, "sample {i}");
        }
    }

    #[test]
    fn render_is_linear_in_notes() {
        let bank = small_bank();
        let a = NoteEvent::new(50, 150, 60, 1).unwrap();
        let b = NoteEvent::new(50, 150, 67, 1).unwrap();
        let both = render_clip(&bank, 2, &NoteSequence::new(vec![a, b]).unwrap()).unwrap();
        let ra = render_clip(&bank, 2, &NoteSequence::new(vec![a]).unwrap()).unwrap();
        let rb = render_clip(&bank, 2, &NoteSequence::new(vec![b]).unwrap()).unwrap();
        let max_err = both
            .samples
            .iter()
            .zip(ra.samples.iter().zip(&rb.samples))
            .map(|(&s, (&x, &y))| (s - (x + y)).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 1e-6, "max_err={max_err}");
    }

    #[test]
    fn pitch_coverage_error_beyond_shift_range() {
        let bank = small_bank(); // covers 21..=108
        assert!(bank.note_pcm(0, 16, 0.2).is_ok()); // shifted to 21
        assert!(matches!(
            bank.note_pcm(0, 3, 0.2),
            Err(DatasetError::PitchOutOfCoverage { .. })
        ));
    }

    #[test]
    fn effects_disabled_is_exact_identity() {
        let bank = small_bank();
        let notes = NoteSequence::new(vec![NoteEvent::new(0, 100, 72, 2).unwrap()]).unwrap();
        let pcm = render_clip(&bank, 0, &notes).unwrap();
        let out = apply_effects(&pcm, &EffectChainParams::disabled());
        assert_eq!(out.samples, pcm.samples);
    }

    #[test]
    fn effects_are_seed_deterministic() {
        let p1 = sample_effect_chain(99);
        let p2 = sample_effect_chain(99);
        assert_eq!(p1, p2);
        let bank = small_bank();
        let notes = NoteSequence::new(vec![NoteEvent::new(0, 150, 60, 3).unwrap()]).unwrap();
        let pcm = render_clip(&bank, 0, &notes).unwrap();
        assert_eq!(apply_effects(&pcm, &p1).samples, apply_effects(&pcm, &p2).samples);
    }

    #[test]
    fn effect_enable_rates_near_half() {
        let n = 10_000;
        let (mut eq, mut dist, mut rev) = (0, 0, 0);
        for seed in 0..n {
            let p = sample_effect_chain(seed);
            eq += p.eq_enabled as usize;
            dist += p.distortion_enabled as usize;
            rev += p.reverb_enabled as usize;
        }
        for (name, count) in [("eq", eq), ("dist", dist), ("reverb", rev)] {
            let rate = count as f64 / n as f64;
            assert!((rate - 0.5).abs() <= 0.02, "{name} rate {rate}");
        }
    }

    #[test]
    fn make_pair_shares_instrument_and_effects() {
        let bank = small_bank();
        let corpus = gen_corpus(8, &CorpusParams::default(), 3);
        let pair = make_pair(&bank, &corpus, 2, true, 17).unwrap();
        assert_eq!(pair.instrument_id, 2);
        assert_ne!(pair.reference_notes, pair.target_notes);
        // augment=false disables everything
        let dry = make_pair(&bank, &corpus, 2, false, 17).unwrap();
        assert!(!dry.effects.any_enabled());
        // same seed redraws the same pair
        let again = make_pair(&bank, &corpus, 2, true, 17).unwrap();
        assert_eq!(again.effects, pair.effects);
        assert_eq!(again.target_pcm, pair.target_pcm);
    }

    #[test]
    fn build_dataset_doubles_with_full_augment() {
        let bank = small_bank();
        let corpus = gen_corpus(8, &CorpusParams::default(), 5);
        let dir = tempfile::tempdir().unwrap();
        let rows = build_dataset(&bank, &corpus, 10, 1.0, dir.path(), 11).unwrap();
        assert_eq!(rows.len(), 20);
        assert_eq!(rows.iter().filter(|r| r.variant == "dry").count(), 10);
        assert_eq!(rows.iter().filter(|r| r.variant == "wet").count(), 10);
        // manifest re-read: every referenced file exists and parses
        let manifest = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest, rows);
        for row in &manifest {
            let r = crate::audio::read_wav(&dir.path().join(&row.ref_wav)).unwrap();
            let t = crate::audio::read_wav(&dir.path().join(&row.tgt_wav)).unwrap();
            assert_eq!(r.sample_rate, 16000);
            assert_eq!(t.samples.len(), 80_000);
            crate::midi_tok::read_midi_file(&dir.path().join(&row.midi)).unwrap();
        }
    }

    #[test]
    fn build_dataset_rejects_zero_size() {
        let bank = small_bank();
        let corpus = gen_corpus(4, &CorpusParams::default(), 5);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_dataset(&bank, &corpus, 0, 0.0, dir.path(), 1),
            Err(DatasetError::SizeZero)
        ));
    }

    #[test]
    fn build_dataset_is_reproducible() {
        let bank = small_bank();
        let corpus = gen_corpus(6, &CorpusParams::default(), 5);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = build_dataset(&bank, &corpus, 4, 0.5, d1.path(), 21).unwrap();
        let r2 = build_dataset(&bank, &corpus, 4, 0.5, d2.path(), 21).unwrap();
        assert_eq!(r1, r2);
        for row in &r1 {
            let a = std::fs::read(d1.path().join(&row.tgt_wav)).unwrap();
            let b = std::fs::read(d2.path().join(&row.tgt_wav)).unwrap();
            assert_eq!(a, b, "wav bytes differ for {}", row.tgt_wav);
        }
    }
}
