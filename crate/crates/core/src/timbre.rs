//! Timbre embeddings: a deterministic spectral featurizer stands in for the
//! pretrained audio encoder, precomputed embedding files carry the text
//! modality, and a trainable 2-layer projection maps either into the model
//! width.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

use crate::audio::Pcm;
use crate::codec::{CodecError, FrameSpec, MelAnalyzer};
use crate::nn::{gelu_backward, gelu_forward, Linear, Param};

/// Default embedding width of the toy featurizer.
pub const DEFAULT_D_CLAP: usize = 64;
/// Minimum audio length accepted by the featurizer.
pub const MIN_EMBED_SECONDS: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TimbreError {
    #[error("audio too short: {got:.3}s < {min:.3}s", min = MIN_EMBED_SECONDS)]
    TooShort { got: f64 },
    #[error("embedding dimension {got} does not match configured {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("non-finite value at position {0} in embedding")]
    NonFinite(usize),
    #[error("embedding width {0} too small; need at least 6 (2 mel stats + 4 scalars)")]
    WidthTooSmall(usize),
    #[error("this provider has no audio front end; use an embedding file")]
    NoAudioFrontEnd,
    #[error("malformed embedding file {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    Audio,
    TextFile,
    Interpolated,
}

/// A fixed-length timbre vector `e` with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TimbreEmbedding {
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
}

impl TimbreEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &TimbreEmbedding) -> Result<f64, TimbreError> {
        if self.dim() != other.dim() {
            return Err(TimbreError::DimensionMismatch { got: other.dim(), expected: self.dim() });
        }
        let dot: f64 = self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum();
        Ok(dot / (self.norm() * other.norm()))
    }
}

/// Deterministic audio featurizer: per-band log-mel mean and standard
/// deviation plus spectral centroid/bandwidth statistics, L2-normalized.
/// Width d splits as (d - 4) / 2 mel bands for means, the same for
/// deviations, and 4 scalar statistics.
pub struct SpectralFeaturizer {
    d_clap: usize,
    analyzer: MelAnalyzer,
    centers_norm: Vec<f64>,
}

impl SpectralFeaturizer {
    pub fn new(d_clap: usize, sample_rate: u32) -> Result<Self, TimbreError> {
        if d_clap < 6 || (d_clap - 4) % 2 != 0 {
            return Err(TimbreError::WidthTooSmall(d_clap));
        }
        let mel_bins = (d_clap - 4) / 2;
        let spec = FrameSpec {
            sample_rate,
            hop: sample_rate / 50,
            window: 1024.min(sample_rate.next_power_of_two()),
            mel_bins: mel_bins as u32,
        };
        let analyzer = MelAnalyzer::new(spec)?;
        let nyquist = sample_rate as f64 / 2.0;
        let centers_norm = crate::codec::mel_center_frequencies(mel_bins, sample_rate)
            .into_iter()
            .map(|f| f / nyquist)
            .collect();
        Ok(Self { d_clap, analyzer, centers_norm })
    }

    pub fn d_clap(&self) -> usize {
        self.d_clap
    }

    /// The canonical unit vector returned for silent input.
    pub fn canonical_silence(&self) -> TimbreEmbedding {
        let v = 1.0 / (self.d_clap as f64).sqrt();
        TimbreEmbedding { vector: vec![v; self.d_clap], source: EmbeddingSource::Audio }
    }

    /// Embed audio. Pure in the samples: identical input gives an identical,
    /// unit-norm vector. Silence maps to [`Self::canonical_silence`].
    pub fn embed_audio(&self, pcm: &Pcm) -> Result<TimbreEmbedding, TimbreError> {
        if pcm.duration_seconds() < MIN_EMBED_SECONDS {
            return Err(TimbreError::TooShort { got: pcm.duration_seconds() });
        }
        let mel = self.analyzer.analyze(pcm)?;
        let floor = self.analyzer.log_floor();
        let floor_mag = floor.exp();
        let bands = self.centers_norm.len();
        let frames = mel.nrows() as f64;

        let mut mean = vec![0.0f64; bands];
        let mut m2 = vec![0.0f64; bands];
        let mut cents = Vec::with_capacity(mel.nrows());
        let mut bws = Vec::with_capacity(mel.nrows());
        for row in mel.rows() {
            let mut mass = 0.0;
            let mut cent = 0.0;
            for (b, &v) in row.iter().enumerate() {
                let lifted = v - floor;
                mean[b] += lifted;
                m2[b] += lifted * lifted;
                let mag = (v.exp() - floor_mag).max(0.0);
                mass += mag;
                cent += mag * self.centers_norm[b];
            }
            if mass > 1e-12 {
                let c = cent / mass;
                let mut var = 0.0;
                for (b, &v) in row.iter().enumerate() {
                    let mag = (v.exp() - floor_mag).max(0.0);
                    var += mag * (self.centers_norm[b] - c) * (self.centers_norm[b] - c);
                }
                cents.push(c);
                bws.push((var / mass).sqrt());
            } else {
                cents.push(0.0);
                bws.push(0.0);
            }
        }
        let mut features = Vec::with_capacity(self.d_clap);
        for b in 0..bands {
            features.push(mean[b] / frames);
        }
        for b in 0..bands {
            let var = (m2[b] / frames - (mean[b] / frames) * (mean[b] / frames)).max(0.0);
            features.push(var.sqrt());
        }
        let stat = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
            (m, v.sqrt())
        };
        let (cm, cs) = stat(&cents);
        let (bm, bs) = stat(&bws);
        features.extend_from_slice(&[cm, cs, bm, bs]);

        let norm = features.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return Ok(self.canonical_silence());
        }
        for v in &mut features {
            *v /= norm;
        }
        Ok(TimbreEmbedding { vector: features, source: EmbeddingSource::Audio })
    }
}

/// One interface over the two embedding providers: the spectral featurizer
/// (audio modality) or a directory of precomputed vectors (text or external
/// encoder output).
pub enum TimbreProvider {
    Featurizer(SpectralFeaturizer),
    PrecomputedFiles { d_clap: usize },
}

impl TimbreProvider {
    pub fn d_clap(&self) -> usize {
        match self {
            TimbreProvider::Featurizer(f) => f.d_clap(),
            TimbreProvider::PrecomputedFiles { d_clap } => *d_clap,
        }
    }

    pub fn embed_audio(&self, pcm: &Pcm) -> Result<TimbreEmbedding, TimbreError> {
        match self {
            TimbreProvider::Featurizer(f) => f.embed_audio(pcm),
            TimbreProvider::PrecomputedFiles { .. } => Err(TimbreError::NoAudioFrontEnd),
        }
    }

    pub fn load_file(&self, path: &Path) -> Result<TimbreEmbedding, TimbreError> {
        load_embedding_file(path, self.d_clap())
    }
}

/// Read an embedding file: either text (`dim=<d>` header then decimal
/// floats) or raw little-endian f32 when the extension is `.f32`.
pub fn load_embedding_file(path: &Path, expected_dim: usize) -> Result<TimbreEmbedding, TimbreError> {
    let io_err = |source| TimbreError::Io { path: path.display().to_string(), source };
    let malformed = |message: String| TimbreError::Malformed {
        path: path.display().to_string(),
        message,
    };
    let vector: Vec<f64> = if path.extension().is_some_and(|e| e == "f32") {
        let bytes = std::fs::read(path).map_err(io_err)?;
        if bytes.len() % 4 != 0 {
            return Err(malformed(format!("byte length {} not a multiple of 4", bytes.len())));
        }
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect()
    } else {
        let text = std::fs::read_to_string(path).map_err(io_err)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| malformed("empty file".into()))?;
        let dim: usize = header
            .trim()
            .strip_prefix("dim=")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| malformed(format!("bad header {header:?}, want dim=<d>")))?;
        let values: Result<Vec<f64>, _> = lines
            .flat_map(|l| l.split_whitespace())
            .map(|t| t.parse::<f64>())
            .collect();
        let values = values.map_err(|e| malformed(format!("bad float: {e}")))?;
        if values.len() != dim {
            return Err(malformed(format!("header says dim={dim} but found {} values", values.len())));
        }
        values
    };
    if vector.len() != expected_dim {
        return Err(TimbreError::DimensionMismatch { got: vector.len(), expected: expected_dim });
    }
    if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
        return Err(TimbreError::NonFinite(i));
    }
    Ok(TimbreEmbedding { vector, source: EmbeddingSource::TextFile })
}

/// Write the text embedding format (`dim=<d>` header then one float per line).
pub fn save_embedding_file(e: &TimbreEmbedding, path: &Path) -> Result<(), TimbreError> {
    let mut out = format!("dim={}\n", e.dim());
    for v in &e.vector {
        out.push_str(&format!("{v:.17e}\n"));
    }
    std::fs::write(path, out).map_err(|source| TimbreError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `e_alpha = alpha * e_t + (1 - alpha) * e_a`, exactly and without
/// renormalization. Alpha outside [0, 1] extrapolates.
pub fn interpolate(
    e_a: &TimbreEmbedding,
    e_t: &TimbreEmbedding,
    alpha: f64,
) -> Result<TimbreEmbedding, TimbreError> {
    if e_a.dim() != e_t.dim() {
        return Err(TimbreError::DimensionMismatch { got: e_t.dim(), expected: e_a.dim() });
    }
    if alpha == 0.0 {
        return Ok(TimbreEmbedding { vector: e_a.vector.clone(), source: e_a.source });
    }
    if alpha == 1.0 {
        return Ok(TimbreEmbedding { vector: e_t.vector.clone(), source: e_t.source });
    }
    // computed as e_a + alpha * (e_t - e_a): identical affine combination,
    // and interpolate(e, e, alpha) == e holds exactly for every alpha
    let vector = e_a
        .vector
        .iter()
        .zip(&e_t.vector)
        .map(|(a, t)| a + alpha * (t - a))
        .collect();
    Ok(TimbreEmbedding { vector, source: EmbeddingSource::Interpolated })
}

/// Two affine layers with a smooth-ramp nonlinearity between; maps
/// `e` (d_clap) to the transformer width `d_emb`. The weights belong to the
/// model checkpoint.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub fc1: Linear, // d_clap -> d_emb
    pub fc2: Linear, // d_emb -> d_emb
}

pub struct ProjectionCache {
    x: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
}

impl ProjectionHead {
    pub fn new(d_clap: usize, d_emb: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new("proj.fc1", d_clap, d_emb, 0.02, rng),
            fc2: Linear::new("proj.fc2", d_emb, d_emb, 0.02, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.fc1.weight.w.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.fc2.weight.w.ncols()
    }

    pub fn forward(&self, e: &TimbreEmbedding) -> (Array1<f64>, ProjectionCache) {
        let x = Array2::from_shape_vec((1, e.dim()), e.vector.clone()).expect("row vector");
        let h_pre = self.fc1.forward(&x);
        let h_act = gelu_forward(&h_pre);
        let y = self.fc2.forward(&h_act);
        (y.row(0).to_owned(), ProjectionCache { x, h_pre, h_act })
    }

    /// Backprop from dL/d(projected) into the two layers; the gradient with
    /// respect to `e` itself is discarded (the embedding is an input).
    pub fn backward(&mut self, cache: &ProjectionCache, dy: &Array1<f64>) {
        let dy2 = dy.clone().insert_axis(ndarray::Axis(0));
        let dh_act = self.fc2.backward(&cache.h_act, &dy2);
        let dh_pre = gelu_backward(&cache.h_pre, &dh_act);
        let _ = self.fc1.backward(&cache.x, &dh_pre);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.fc1.params_mut();
        ps.extend(self.fc2.params_mut());
        ps
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = self.fc1.params();
        ps.extend(self.fc2.params());
        ps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::sine;
    use rand::SeedableRng;

    fn emb(values: &[f64]) -> TimbreEmbedding {
        TimbreEmbedding { vector: values.to_vec(), source: EmbeddingSource::Audio }
    }

    #[test]
    fn featurizer_is_deterministic_and_unit_norm() {
        let f = SpectralFeaturizer::new(64, 16000).unwrap();
        let pcm = sine(220.0, 1.0, 0.7, 16000);
        let e1 = f.embed_audio(&pcm).unwrap();
        let e2 = f.embed_audio(&pcm).unwrap();
        assert_eq!(e1, e2);
        assert!((e1.norm() - 1.0).abs() < 1e-6);
        assert_eq!(e1.dim(), 64);
    }

    #[test]
    fn featurizer_separates_registers_more_than_phase() {
        let f = SpectralFeaturizer::new(64, 16000).unwrap();
        let low = f.embed_audio(&sine(220.0, 1.0, 0.7, 16000)).unwrap();
        let high = f.embed_audio(&sine(1760.0, 1.0, 0.7, 16000)).unwrap();
        // same frequency, quarter-period shifted start
        let shifted = {
            let sr = 16000u32;
            let n = (1.0 * sr as f64) as usize;
            let samples = (0..n)
                .map(|i| {
                    let t = i as f64 / sr as f64;
                    0.7 * ((2.0 * std::f64::consts::PI * 220.0 * t
                        + std::f64::consts::FRAC_PI_2)
                        .sin()) as f32
                })
                .collect();
            Pcm::new(samples, sr)
        };
        let same = f.embed_audio(&shifted).unwrap();
        let cross = low.cosine(&high).unwrap();
        let within = low.cosine(&same).unwrap();
        assert!(cross < within, "cross={cross} within={within}");
    }

    #[test]
    fn featurizer_flags_short_and_canonicalizes_silence() {
        let f = SpectralFeaturizer::new(64, 16000).unwrap();
        assert!(matches!(
            f.embed_audio(&Pcm::silence(0.2, 16000)),
            Err(TimbreError::TooShort { .. })
        ));
        let silent = f.embed_audio(&Pcm::silence(1.0, 16000)).unwrap();
        assert_eq!(silent, f.canonical_silence());
        assert!((silent.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn embedding_file_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        let e = emb(&[0.25, -1.5, 3.0, 0.0]);
        save_embedding_file(&e, &p).unwrap();
        let got = load_embedding_file(&p, 4).unwrap();
        assert_eq!(got.vector, e.vector);
        assert_eq!(got.source, EmbeddingSource::TextFile);
        // dimension mismatch
        assert!(matches!(
            load_embedding_file(&p, 8),
            Err(TimbreError::DimensionMismatch { got: 4, expected: 8 })
        ));
        // NaN rejected
        let bad = dir.path().join("nan.txt");
        std::fs::write(&bad, "dim=2\n1.0\nNaN\n").unwrap();
        assert!(matches!(load_embedding_file(&bad, 2), Err(TimbreError::NonFinite(1))));
    }

    #[test]
    fn embedding_raw_f32_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.f32");
        let vals = [1.0f32, -0.5, 0.25];
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&p, bytes).unwrap();
        let got = load_embedding_file(&p, 3).unwrap();
        assert_eq!(got.vector, vec![1.0, -0.5, 0.25]);
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let a = emb(&[1.0, 0.0]);
        let t = emb(&[0.0, 1.0]);
        assert_eq!(interpolate(&a, &t, 0.0).unwrap().vector, a.vector);
        assert_eq!(interpolate(&a, &t, 1.0).unwrap().vector, t.vector);
        assert_eq!(interpolate(&a, &t, 0.5).unwrap().vector, vec![0.5, 0.5]);
        // extrapolation permitted
        assert_eq!(interpolate(&a, &t, 2.0).unwrap().vector, vec![-1.0, 2.0]);
        // fixed point for all alpha
        for alpha in [-1.0, 0.3, 0.9, 5.0] {
            assert_eq!(interpolate(&a, &a, alpha).unwrap().vector, a.vector);
        }
        // linear in alpha: midpoint equals average of endpoints
        let m = interpolate(&a, &t, 0.5).unwrap();
        for i in 0..2 {
            assert!((m.vector[i] - 0.5 * (a.vector[i] + t.vector[i])).abs() < 1e-15);
        }
        assert!(interpolate(&a, &emb(&[1.0, 2.0, 3.0]), 0.5).is_err());
    }

    #[test]
    fn projection_zero_weights_yield_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = ProjectionHead::new(4, 3, &mut rng);
        head.fc1.weight.w.fill(0.0);
        head.fc1.bias.w.fill(0.0);
        head.fc2.weight.w.fill(0.0);
        head.fc2.bias.w.assign(&Array2::from_shape_vec((1, 3), vec![0.1, -0.2, 0.3]).unwrap());
        let (y, _) = head.forward(&emb(&[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(y.to_vec(), vec![0.1, -0.2, 0.3]);
    }

    #[test]
    fn projection_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut head = ProjectionHead::new(4, 4, &mut rng);
        let e = emb(&[0.3, -0.7, 1.1, 0.2]);
        // scalar loss: sum of squares of the projection
        let (y, cache) = head.forward(&e);
        let dy = y.mapv(|v| 2.0 * v);
        head.backward(&cache, &dy);

        let loss = |h: &ProjectionHead, e: &TimbreEmbedding| {
            let (y, _) = h.forward(e);
            y.iter().map(|v| v * v).sum::<f64>()
        };
        let eps = 1e-6;
        let mut max_rel = 0.0f64;
        let grads: Vec<(usize, usize, usize, f64)> = {
            let ps = head.params();
            let mut out = Vec::new();
            for (pi, p) in ps.iter().enumerate() {
                for r in 0..p.w.nrows() {
                    for c in 0..p.w.ncols() {
                        out.push((pi, r, c, p.g[[r, c]]));
                    }
                }
            }
            out
        };
        for (pi, r, c, analytic) in grads {
            let orig = head.params()[pi].w[[r, c]];
            head.params_mut()[pi].w[[r, c]] = orig + eps;
            let lp = loss(&head, &e);
            head.params_mut()[pi].w[[r, c]] = orig - eps;
            let lm = loss(&head, &e);
            head.params_mut()[pi].w[[r, c]] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }
}
