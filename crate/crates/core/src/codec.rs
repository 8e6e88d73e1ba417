//! Toy residual-vector-quantization codec over log-mel frames.
//!
//! Exposes the same token interface as a neural codec: a clip becomes an
//! `N x D` grid of ids in `{0..K_a-1}`, plus the delay-pattern layout
//! transform used to schedule multi-codebook autoregression.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex64, Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

use crate::audio::Pcm;

/// Log-magnitude floor: -80 dB relative to full scale.
pub const LOG_FLOOR_DB: f64 = -80.0;

/// Grid sentinel for the delay-pattern triangle; maps to the shared PAD
/// special on the model side.
pub const PAD_TOKEN: u16 = u16::MAX;

pub const CODEC_MAGIC: &[u8; 8] = b"MSCODEC\0";
pub const CODEC_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("non-finite sample in input")]
    NonFiniteInput,
    #[error("input is {got:.3}s but the frame spec covers at most {max:.3}s")]
    InputTooLong { got: f64, max: f64 },
    #[error("sample rate {got} does not match frame spec rate {expected}")]
    SampleRateMismatch { got: u32, expected: u32 },
    #[error("hop {hop} exceeds window {window}")]
    BadFrameSpec { hop: u32, window: u32 },
    #[error("codec is not trained")]
    NotTrained,
    #[error("degenerate training input: all {0} frames are identical")]
    DegenerateTraining(usize),
    #[error("codebook size {k_a} exceeds the {distinct} distinct frames available")]
    NotEnoughDistinctFrames { distinct: usize, k_a: usize },
    #[error("token id {id} out of range for codebook size {k_a}")]
    IdOutOfRange { id: u16, k_a: usize },
    #[error("PAD id in ALIGNED layout at row {row}, codebook {col}")]
    PadInAligned { row: usize, col: usize },
    #[error("expected {expected:?} layout, got {got:?}")]
    WrongLayout { expected: Layout, got: Layout },
    #[error("malformed PAD triangle at row {row}, codebook {col}")]
    MalformedDelayPattern { row: usize, col: usize },
    #[error("frame has {got} mel bins, codec expects {expected}")]
    FrameDimMismatch { got: usize, expected: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Analysis frame geometry. Defaults give 50 frames/s and N = 250 for a
/// 5 s clip at 16 kHz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub sample_rate: u32,
    pub hop: u32,
    pub window: u32,
    pub mel_bins: u32,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self { sample_rate: 16000, hop: 320, window: 1024, mel_bins: 64 }
    }
}

impl FrameSpec {
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.hop > self.window || self.hop == 0 {
            return Err(CodecError::BadFrameSpec { hop: self.hop, window: self.window });
        }
        Ok(())
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Frame count for a buffer of `samples` samples: ceil(samples / hop).
    pub fn frames_for(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop as usize)
    }

    /// Frame count of a full 5 s clip.
    pub fn clip_frames(&self) -> usize {
        (5.0 * self.sample_rate as f64 / self.hop as f64).ceil() as usize
    }

    pub fn clip_samples(&self) -> usize {
        (5.0 * self.sample_rate as f64).round() as usize
    }
}

/// HTK mel scale.
fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular mel filters for a given spec.
/// Shared with tests as the closed-form oracle for bin placement.
pub fn mel_center_frequencies(mel_bins: usize, sample_rate: u32) -> Vec<f64> {
    let max_mel = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=mel_bins)
        .map(|b| mel_to_hz(max_mel * b as f64 / (mel_bins + 1) as f64))
        .collect()
}

/// STFT + mel filterbank analyzer. Immutable after construction and safe to
/// share across threads.
pub struct MelAnalyzer {
    pub spec: FrameSpec,
    window: Vec<f64>,
    window_norm: f64,
    filters: Array2<f64>, // mel_bins x (window/2 + 1)
    fft_fwd: Arc<dyn Fft<f64>>,
    fft_inv: Arc<dyn Fft<f64>>,
}

impl MelAnalyzer {
    pub fn new(spec: FrameSpec) -> Result<Self, CodecError> {
        spec.validate()?;
        let win_len = spec.window as usize;
        let window: Vec<f64> = (0..win_len)
            .map(|i| {
                let x = std::f64::consts::PI * i as f64 / win_len as f64;
                x.sin() * x.sin()
            })
            .collect();
        let window_norm = 2.0 / window.iter().sum::<f64>();
        let filters = Self::build_filterbank(&spec);
        let mut planner = FftPlanner::new();
        Ok(Self {
            spec,
            window,
            window_norm,
            filters,
            fft_fwd: planner.plan_fft_forward(win_len),
            fft_inv: planner.plan_fft_inverse(win_len),
        })
    }

    fn build_filterbank(spec: &FrameSpec) -> Array2<f64> {
        let bins = spec.window as usize / 2 + 1;
        let mel_bins = spec.mel_bins as usize;
        let sr = spec.sample_rate as f64;
        let max_mel = hz_to_mel(sr / 2.0);
        // mel_bins + 2 edge points, uniformly spaced in mel
        let edges_hz: Vec<f64> = (0..mel_bins + 2)
            .map(|i| mel_to_hz(max_mel * i as f64 / (mel_bins + 1) as f64))
            .collect();
        let mut filters = Array2::zeros((mel_bins, bins));
        for b in 0..mel_bins {
            let (lo, center, hi) = (edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]);
            for k in 0..bins {
                let f = k as f64 * sr / spec.window as f64;
                let w = if f >= lo && f <= center && center > lo {
                    (f - lo) / (center - lo)
                } else if f > center && f <= hi && hi > center {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                filters[[b, k]] = w;
            }
        }
        filters
    }

    pub fn log_floor(&self) -> f64 {
        (10f64.powf(LOG_FLOOR_DB / 20.0)).ln()
    }

    /// The log-floor row produced by silence.
    pub fn floor_frame(&self) -> Array1<f64> {
        Array1::from_elem(self.spec.mel_bins as usize, self.log_floor())
    }

    /// Linear magnitude spectrogram, frames x (window/2 + 1). Frame `t` is
    /// left-aligned at sample `t * hop`, zero-padded past the signal end.
    fn magnitude_spectrogram(&self, samples: &[f32]) -> Array2<f64> {
        let win_len = self.spec.window as usize;
        let hop = self.spec.hop as usize;
        let bins = win_len / 2 + 1;
        let n_frames = self.spec.frames_for(samples.len()).max(0);
        let mut mags = Array2::zeros((n_frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); win_len];
        for t in 0..n_frames {
            let start = t * hop;
            for i in 0..win_len {
                let s = samples.get(start + i).copied().unwrap_or(0.0) as f64;
                buf[i] = Complex64::new(s * self.window[i], 0.0);
            }
            self.fft_fwd.process(&mut buf);
            for k in 0..bins {
                mags[[t, k]] = buf[k].norm() * self.window_norm;
            }
        }
        mags
    }

    /// Log-mel frames, N x mel_bins, floored at -80 dBFS.
    pub fn analyze(&self, pcm: &Pcm) -> Result<Array2<f64>, CodecError> {
        if pcm.samples.iter().any(|s| !s.is_finite()) {
            return Err(CodecError::NonFiniteInput);
        }
        if pcm.sample_rate != self.spec.sample_rate {
            return Err(CodecError::SampleRateMismatch {
                got: pcm.sample_rate,
                expected: self.spec.sample_rate,
            });
        }
        let max_samples = self.spec.clip_samples();
        if pcm.samples.len() > max_samples {
            return Err(CodecError::InputTooLong {
                got: pcm.duration_seconds(),
                max: 5.0,
            });
        }
        let mags = self.magnitude_spectrogram(&pcm.samples);
        let floor_mag = 10f64.powf(LOG_FLOOR_DB / 20.0);
        let mel = mags.dot(&self.filters.t());
        Ok(mel.mapv(|v| v.max(floor_mag).ln()))
    }

    /// Invert log-mel frames back to PCM: approximate mel inverse followed by
    /// Griffin-Lim phase reconstruction (`GRIFFIN_LIM_ITERS` iterations).
    pub fn synthesize(&self, log_mel: &Array2<f64>) -> Result<Pcm, CodecError> {
        const GRIFFIN_LIM_ITERS: usize = 32;
        let mel_bins = self.spec.mel_bins as usize;
        if log_mel.ncols() != mel_bins {
            return Err(CodecError::FrameDimMismatch { got: log_mel.ncols(), expected: mel_bins });
        }
        let n_frames = log_mel.nrows();
        let bins = self.spec.window as usize / 2 + 1;
        let floor_mag = 10f64.powf(LOG_FLOOR_DB / 20.0);

        // approximate pseudo-inverse of the filterbank: transpose with
        // column normalization
        let mel_mag = log_mel.mapv(|v| v.exp().max(0.0));
        let col_sums = self.filters.sum_axis(Axis(0));
        let mut target_mag = Array2::zeros((n_frames, bins));
        for t in 0..n_frames {
            for k in 0..bins {
                let denom = col_sums[k];
                if denom > 1e-9 {
                    let mut acc = 0.0;
                    for b in 0..mel_bins {
                        acc += self.filters[[b, k]] * mel_mag[[t, b]];
                    }
                    let v = acc / denom;
                    target_mag[[t, k]] = if v <= floor_mag * 1.0001 { 0.0 } else { v };
                }
            }
        }

        // Griffin-Lim with zero initial phase
        let mut phase = Array2::from_elem((n_frames, bins), 0.0f64);
        let out_len = n_frames * self.spec.hop as usize;
        let mut samples = vec![0.0f64; out_len];
        for it in 0..GRIFFIN_LIM_ITERS {
            samples = self.istft(&target_mag, &phase, out_len);
            if it + 1 == GRIFFIN_LIM_ITERS {
                break;
            }
            let f32s: Vec<f32> = samples.iter().map(|&s| s as f32).collect();
            let spec = self.complex_spectrogram(&f32s, n_frames);
            for t in 0..n_frames {
                for k in 0..bins {
                    phase[[t, k]] = spec[[t, k]].arg();
                }
            }
        }
        let mut pcm = Pcm::new(samples.iter().map(|&s| s as f32).collect(), self.spec.sample_rate);
        pcm.limit_peak(0.99);
        Ok(pcm)
    }

    fn complex_spectrogram(&self, samples: &[f32], n_frames: usize) -> Array2<Complex64> {
        let win_len = self.spec.window as usize;
        let hop = self.spec.hop as usize;
        let bins = win_len / 2 + 1;
        let mut out = Array2::from_elem((n_frames, bins), Complex64::new(0.0, 0.0));
        let mut buf = vec![Complex64::new(0.0, 0.0); win_len];
        for t in 0..n_frames {
            let start = t * hop;
            for i in 0..win_len {
                let s = samples.get(start + i).copied().unwrap_or(0.0) as f64;
                buf[i] = Complex64::new(s * self.window[i], 0.0);
            }
            self.fft_fwd.process(&mut buf);
            for k in 0..bins {
                out[[t, k]] = buf[k];
            }
        }
        out
    }

    /// Weighted overlap-add inverse STFT.
    fn istft(&self, mag: &Array2<f64>, phase: &Array2<f64>, out_len: usize) -> Vec<f64> {
        let win_len = self.spec.window as usize;
        let hop = self.spec.hop as usize;
        let bins = win_len / 2 + 1;
        let n_frames = mag.nrows();
        let mut acc = vec![0.0f64; out_len + win_len];
        let mut win_acc = vec![0.0f64; out_len + win_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); win_len];
        let inv_norm = 1.0 / (self.window_norm * win_len as f64);
        for t in 0..n_frames {
            for k in 0..bins {
                let c = Complex64::from_polar(mag[[t, k]], phase[[t, k]]);
                buf[k] = c;
                if k > 0 && k < win_len - k {
                    buf[win_len - k] = c.conj();
                }
            }
            self.fft_inv.process(&mut buf);
            let start = t * hop;
            for i in 0..win_len {
                let v = buf[i].re * inv_norm;
                acc[start + i] += v * self.window[i];
                win_acc[start + i] += self.window[i] * self.window[i];
            }
        }
        (0..out_len)
            .map(|i| if win_acc[i] > 1e-9 { acc[i] / win_acc[i] } else { 0.0 })
            .collect()
    }
}

// --- Residual vector quantization -------------------------------------------

/// A trained stack of `depth` codebooks, each with `k_a` entries of
/// `mel_bins` coefficients. Entries are stored as f32 (the checkpoint
/// precision); all distance arithmetic runs in f64.
#[derive(Debug, Clone)]
pub struct RvqCodec {
    pub spec: FrameSpec,
    codebooks: Vec<Array2<f32>>, // depth x (k_a x mel_bins)
    trained: bool,
}

impl RvqCodec {
    pub fn depth(&self) -> usize {
        self.codebooks.len()
    }

    pub fn k_a(&self) -> usize {
        self.codebooks.first().map_or(0, |c| c.nrows())
    }

    pub fn mel_bins(&self) -> usize {
        self.codebooks.first().map_or(0, |c| c.ncols())
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn codebook(&self, d: usize) -> &Array2<f32> {
        &self.codebooks[d]
    }
}

/// Train a `depth`-stage RVQ on mel frames: stage d runs k-means on the
/// residuals left by stages 0..d. Initialization picks random distinct
/// frames with a fixed seed; argmin ties break toward the lowest id.
pub fn rvq_train(
    frames: &Array2<f64>,
    spec: FrameSpec,
    depth: usize,
    k_a: usize,
    iters: usize,
    seed: u64,
) -> Result<RvqCodec, CodecError> {
    assert!(depth >= 1 && k_a >= 1);
    if frames.ncols() != spec.mel_bins as usize {
        return Err(CodecError::FrameDimMismatch {
            got: frames.ncols(),
            expected: spec.mel_bins as usize,
        });
    }
    let n = frames.nrows();
    let distinct = count_distinct_rows(frames);
    if distinct <= 1 {
        return Err(CodecError::DegenerateTraining(n));
    }
    if k_a > distinct {
        return Err(CodecError::NotEnoughDistinctFrames { distinct, k_a });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual = frames.to_owned();
    let mut codebooks = Vec::with_capacity(depth);
    for _ in 0..depth {
        let centroids = kmeans(&residual, k_a, iters, &mut rng);
        // subtract the assigned centroid to form the next stage's residual
        let assign = assign_nearest(&residual, &centroids);
        for (i, &c) in assign.iter().enumerate() {
            for j in 0..residual.ncols() {
                residual[[i, j]] -= centroids[[c, j]];
            }
        }
        codebooks.push(centroids.mapv(|v| v as f32));
    }
    Ok(RvqCodec { spec, codebooks, trained: true })
}

fn count_distinct_rows(frames: &Array2<f64>) -> usize {
    let mut seen = std::collections::HashSet::new();
    for row in frames.rows() {
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        seen.insert(key);
    }
    seen.len()
}

/// Nearest-centroid assignment, ties to the lowest id.
fn assign_nearest(points: &Array2<f64>, centroids: &Array2<f64>) -> Vec<usize> {
    // argmin ||p - c||^2 = argmin (||c||^2 - 2 p.c)
    let c_norms: Vec<f64> = centroids
        .rows()
        .into_iter()
        .map(|c| c.iter().map(|v| v * v).sum())
        .collect();
    let dots = points.dot(&centroids.t()); // n x k
    let mut out = Vec::with_capacity(points.nrows());
    for row in dots.rows() {
        let mut best = 0usize;
        let mut best_v = f64::INFINITY;
        for (k, &dot) in row.iter().enumerate() {
            let v = c_norms[k] - 2.0 * dot;
            if v < best_v {
                best_v = v;
                best = k;
            }
        }
        out.push(best);
    }
    out
}

fn kmeans(points: &Array2<f64>, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let dim = points.ncols();
    // k-means++ init: first centroid random, the rest sampled with
    // probability proportional to squared distance from the chosen set.
    // Coincident rows carry zero weight, so picks stay distinct.
    let mut centroids = Array2::zeros((k, dim));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| p.iter().zip(points.row(first).iter()).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let mut filled = 1;
    while filled < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.gen_range(0.0..total);
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        centroids.row_mut(filled).assign(&points.row(pick));
        for (i, w) in d2.iter_mut().enumerate() {
            let dist: f64 = points
                .row(i)
                .iter()
                .zip(points.row(pick).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            *w = w.min(dist);
        }
        filled += 1;
    }
    // fewer distinct rows than k is rejected upstream for stage 0; deeper
    // stages may collapse, so pad deterministically with jittered copies
    while filled < k {
        let src = filled % n;
        let jitter = 1e-6 * (filled as f64 + 1.0);
        for j in 0..dim {
            centroids[[filled, j]] = points[[src, j]] + jitter;
        }
        filled += 1;
    }

    for _ in 0..iters.max(1) {
        let assign = assign_nearest(points, &centroids);
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for j in 0..dim {
                sums[[c, j]] += points[[i, j]];
            }
        }
        // reseed empty clusters with the points farthest from their centroid
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empties.is_empty() {
            let mut dist: Vec<(f64, usize)> = assign
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let d: f64 = points
                        .row(i)
                        .iter()
                        .zip(centroids.row(c).iter())
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum();
                    (d, i)
                })
                .collect();
            dist.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for (slot, &c) in empties.iter().enumerate() {
                let i = dist[slot.min(dist.len() - 1)].1;
                sums.row_mut(c).assign(&points.row(i));
                counts[c] = 1;
            }
        }
        for c in 0..k {
            for j in 0..dim {
                centroids[[c, j]] = sums[[c, j]] / counts[c] as f64;
            }
        }
    }
    centroids
}

// --- Token grids and the delay pattern --------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    Aligned,
    Delayed,
}

/// An integer token grid: `rows x depth` ids, either time-aligned (`N` rows)
/// or in the MusicGen delay layout (`N + D - 1` rows with a PAD triangle).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioTokens {
    grid: Vec<Vec<u16>>,
    layout: Layout,
    n: usize,
    d: usize,
}

impl AudioTokens {
    pub fn aligned(grid: Vec<Vec<u16>>, d: usize) -> Result<Self, CodecError> {
        let n = grid.len();
        for (row, r) in grid.iter().enumerate() {
            assert_eq!(r.len(), d, "grid row width mismatch");
            if let Some(col) = r.iter().position(|&id| id == PAD_TOKEN) {
                return Err(CodecError::PadInAligned { row, col });
            }
        }
        Ok(Self { grid, layout: Layout::Aligned, n, d })
    }

    /// Assemble a DELAYED grid directly (rows = N + D - 1); the PAD triangle
    /// is validated on [`delay_undo`].
    pub fn delayed(grid: Vec<Vec<u16>>, d: usize) -> Result<Self, CodecError> {
        let rows = grid.len();
        if rows + 1 <= d {
            return Err(CodecError::MalformedDelayPattern { row: rows, col: 0 });
        }
        for r in &grid {
            assert_eq!(r.len(), d, "grid row width mismatch");
        }
        Ok(Self { grid, layout: Layout::Delayed, n: rows + 1 - d, d })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Time frames N (aligned row count, regardless of layout).
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn depth(&self) -> usize {
        self.d
    }

    pub fn rows(&self) -> &[Vec<u16>] {
        &self.grid
    }

    /// Number of rows in the current layout.
    pub fn num_rows(&self) -> usize {
        self.grid.len()
    }
}

#[cfg(test)]
pub(crate) fn delayed_for_tests(grid: Vec<Vec<u16>>, n: usize, d: usize) -> AudioTokens {
    AudioTokens { grid, layout: Layout::Delayed, n, d }
}

/// Shift codebook d (0-based) down by d rows; vacated cells become PAD.
/// The result has `N + D - 1` rows.
pub fn delay_apply(tokens: &AudioTokens) -> Result<AudioTokens, CodecError> {
    if tokens.layout != Layout::Aligned {
        return Err(CodecError::WrongLayout { expected: Layout::Aligned, got: tokens.layout });
    }
    let (n, d) = (tokens.n, tokens.d);
    let rows = n + d - 1;
    let mut grid = vec![vec![PAD_TOKEN; d]; rows];
    for t in 0..rows {
        for c in 0..d {
            if t >= c && t - c < n {
                grid[t][c] = tokens.grid[t - c][c];
            }
        }
    }
    Ok(AudioTokens { grid, layout: Layout::Delayed, n, d })
}

/// Exact inverse of [`delay_apply`]; the PAD triangle must be intact.
pub fn delay_undo(tokens: &AudioTokens) -> Result<AudioTokens, CodecError> {
    if tokens.layout != Layout::Delayed {
        return Err(CodecError::WrongLayout { expected: Layout::Delayed, got: tokens.layout });
    }
    let (n, d) = (tokens.n, tokens.d);
    let rows = n + d - 1;
    let mut grid = vec![vec![0u16; d]; n];
    for t in 0..rows {
        for c in 0..d {
            let in_band = t >= c && t - c < n;
            let id = tokens.grid[t][c];
            if in_band {
                if id == PAD_TOKEN {
                    return Err(CodecError::MalformedDelayPattern { row: t, col: c });
                }
                grid[t - c][c] = id;
            } else if id != PAD_TOKEN {
                return Err(CodecError::MalformedDelayPattern { row: t, col: c });
            }
        }
    }
    Ok(AudioTokens { grid, layout: Layout::Aligned, n, d })
}

/// Greedy residual encoding: at each stage take the entry minimizing the
/// remaining residual (ties to the lowest id).
pub fn encode(codec: &RvqCodec, frames: &Array2<f64>) -> Result<AudioTokens, CodecError> {
    if !codec.trained {
        return Err(CodecError::NotTrained);
    }
    if frames.ncols() != codec.mel_bins() {
        return Err(CodecError::FrameDimMismatch { got: frames.ncols(), expected: codec.mel_bins() });
    }
    let n = frames.nrows();
    let d = codec.depth();
    let mut grid = vec![vec![0u16; d]; n];
    let mut residual = frames.to_owned();
    for (stage, cb) in codec.codebooks.iter().enumerate() {
        let cb64 = cb.mapv(|v| v as f64);
        let assign = assign_nearest(&residual, &cb64);
        for (i, &c) in assign.iter().enumerate() {
            grid[i][stage] = c as u16;
            for j in 0..residual.ncols() {
                residual[[i, j]] -= cb64[[c, j]];
            }
        }
    }
    AudioTokens::aligned(grid, d)
}

/// Sum of indexed codebook entries per frame. Requires the ALIGNED layout.
pub fn decode(codec: &RvqCodec, tokens: &AudioTokens) -> Result<Array2<f64>, CodecError> {
    if !codec.trained {
        return Err(CodecError::NotTrained);
    }
    if tokens.layout != Layout::Aligned {
        return Err(CodecError::WrongLayout { expected: Layout::Aligned, got: tokens.layout });
    }
    assert_eq!(tokens.d, codec.depth());
    let mut out = Array2::zeros((tokens.n, codec.mel_bins()));
    for (i, row) in tokens.grid.iter().enumerate() {
        for (stage, &id) in row.iter().enumerate() {
            if id as usize >= codec.k_a() {
                return Err(CodecError::IdOutOfRange { id, k_a: codec.k_a() });
            }
            let entry = codec.codebooks[stage].row(id as usize);
            for j in 0..codec.mel_bins() {
                out[[i, j]] += entry[j] as f64;
            }
        }
    }
    Ok(out)
}

/// Mean squared residual after truncating to the first `d` stages; used to
/// check that depth only removes energy.
pub fn residual_mse_by_depth(codec: &RvqCodec, frames: &Array2<f64>) -> Result<Vec<f64>, CodecError> {
    if !codec.trained {
        return Err(CodecError::NotTrained);
    }
    let mut residual = frames.to_owned();
    let mut out = Vec::with_capacity(codec.depth());
    for cb in &codec.codebooks {
        let cb64 = cb.mapv(|v| v as f64);
        let assign = assign_nearest(&residual, &cb64);
        for (i, &c) in assign.iter().enumerate() {
            for j in 0..residual.ncols() {
                residual[[i, j]] -= cb64[[c, j]];
            }
        }
        let mse = residual.iter().map(|v| v * v).sum::<f64>() / residual.len() as f64;
        out.push(mse);
    }
    Ok(out)
}

// --- Checkpoint --------------------------------------------------------------

pub fn save_codec(codec: &RvqCodec, path: &Path) -> Result<(), CodecError> {
    let io_err = |source| CodecError::Io { path: path.display().to_string(), source };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    write_codec(codec, &mut w).map_err(io_err)
}

fn write_codec<W: Write>(codec: &RvqCodec, w: &mut W) -> std::io::Result<()> {
    use crate::binio::*;
    w.write_all(CODEC_MAGIC)?;
    write_u32(w, CODEC_VERSION)?;
    write_u32(w, codec.depth() as u32)?;
    write_u32(w, codec.k_a() as u32)?;
    write_u32(w, codec.mel_bins() as u32)?;
    write_u32(w, codec.spec.sample_rate)?;
    write_u32(w, codec.spec.hop)?;
    write_u32(w, codec.spec.window)?;
    write_u32(w, codec.spec.mel_bins)?;
    for cb in &codec.codebooks {
        write_f32_slice(w, cb.as_slice().expect("codebook is contiguous"))?;
    }
    Ok(())
}

pub fn load_codec(path: &Path) -> Result<RvqCodec, CodecError> {
    let io_err = |source| CodecError::Io { path: path.display().to_string(), source };
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    read_codec(&mut r)
}

fn read_codec<R: Read>(r: &mut R) -> Result<RvqCodec, CodecError> {
    use crate::binio::*;
    let bad = |m: &str| CodecError::BadCheckpoint(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != CODEC_MAGIC {
        return Err(bad("wrong magic"));
    }
    let version = read_u32(r).map_err(|_| bad("truncated header"))?;
    if version != CODEC_VERSION {
        return Err(CodecError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let depth = read_u32(r).map_err(|_| bad("truncated header"))? as usize;
    let k_a = read_u32(r).map_err(|_| bad("truncated header"))? as usize;
    let mel_bins = read_u32(r).map_err(|_| bad("truncated header"))? as usize;
    let spec = FrameSpec {
        sample_rate: read_u32(r).map_err(|_| bad("truncated header"))?,
        hop: read_u32(r).map_err(|_| bad("truncated header"))?,
        window: read_u32(r).map_err(|_| bad("truncated header"))?,
        mel_bins: read_u32(r).map_err(|_| bad("truncated header"))?,
    };
    if spec.mel_bins as usize != mel_bins {
        return Err(bad("mel_bins mismatch between codec and frame spec"));
    }
    if depth == 0 || k_a == 0 || mel_bins == 0 || depth > 64 || k_a > 1 << 20 {
        return Err(bad("implausible dimensions"));
    }
    let mut codebooks = Vec::with_capacity(depth);
    for _ in 0..depth {
        let flat = read_f32_vec(r, k_a * mel_bins).map_err(|_| bad("truncated codebooks"))?;
        codebooks.push(
            Array2::from_shape_vec((k_a, mel_bins), flat).expect("shape matches read length"),
        );
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail).map_err(|_| bad("io"))? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(RvqCodec { spec, codebooks, trained: true })
}
