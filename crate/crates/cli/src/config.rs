//! Run configuration: one TOML file, every field optional with defaults;
//! command-line flags override file values.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_ENV: &str = "MELSYNTH_CONFIG";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub dataset: DatasetCfg,
    pub frame: FrameCfg,
    pub codec: CodecCfg,
    pub model: ModelCfg,
    pub train: TrainCfg,
    pub sampler: SamplerCfg,
    pub guidance: GuidanceCfg,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            dataset: DatasetCfg::default(),
            frame: FrameCfg::default(),
            codec: CodecCfg::default(),
            model: ModelCfg::default(),
            train: TrainCfg::default(),
            sampler: SamplerCfg::default(),
            guidance: GuidanceCfg::default(),
            seeds: Seeds::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            checkpoints: "checkpoints".into(),
            outputs: "outputs".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetCfg {
    pub instruments: usize,
    pub corpus_clips: usize,
    pub size: usize,
    pub augment_fraction: f64,
    pub notes_min: usize,
    pub notes_max: usize,
    pub pitch_lo: u8,
    pub pitch_hi: u8,
    pub onset_grid_ticks: u16,
    pub dur_min_ticks: u16,
    pub dur_max_ticks: u16,
    pub dur_grid_ticks: u16,
}

impl Default for DatasetCfg {
    fn default() -> Self {
        Self {
            instruments: 4,
            corpus_clips: 128,
            size: 512,
            augment_fraction: 0.0,
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

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameCfg {
    pub sample_rate: u32,
    pub hop: u32,
    pub window: u32,
    pub mel_bins: u32,
}

impl Default for FrameCfg {
    fn default() -> Self {
        Self { sample_rate: 16000, hop: 320, window: 1024, mel_bins: 64 }
    }
}

impl FrameCfg {
    pub fn to_spec(&self) -> melsynth::codec::FrameSpec {
        melsynth::codec::FrameSpec {
            sample_rate: self.sample_rate,
            hop: self.hop,
            window: self.window,
            mel_bins: self.mel_bins,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecCfg {
    pub depth: usize,
    pub k_a: usize,
    pub iters: usize,
    pub max_clips: usize,
}

impl Default for CodecCfg {
    fn default() -> Self {
        Self { depth: 4, k_a: 256, iters: 12, max_clips: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCfg {
    /// "toy" or "paper".
    pub preset: String,
    pub d_clap: usize,
}

impl Default for ModelCfg {
    fn default() -> Self {
        Self { preset: "toy".into(), d_clap: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCfg {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub log_every: usize,
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self { steps: 600, batch_size: 4, lr: 1e-4, log_every: 50 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerCfg {
    pub top_p: f64,
    pub temperature: f64,
    /// 0 means the full clip length.
    pub max_frames: usize,
}

impl Default for SamplerCfg {
    fn default() -> Self {
        Self { top_p: 0.95, temperature: 1.0, max_frames: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceCfg {
    pub gamma: f64,
    /// "none", "all", or "first-note".
    pub mode: String,
}

impl Default for GuidanceCfg {
    fn default() -> Self {
        Self { gamma: 1.0, mode: "none".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub bank: u64,
    pub corpus: u64,
    pub build: u64,
    pub codec: u64,
    pub train: u64,
    pub sample: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { bank: 1, corpus: 2, build: 3, codec: 4, train: 5, sample: 6 }
    }
}

impl RunConfig {
    /// Load from `--config`, else `$MELSYNTH_CONFIG`, else defaults.
    pub fn load(explicit: Option<&Path>) -> anyhow::Result<Self> {
        let path = explicit
            .map(PathBuf::from)
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?;
                let cfg: RunConfig = toml::from_str(&text)
                    .map_err(|e| anyhow::anyhow!("config {} is invalid: {e}", p.display()))?;
                Ok(cfg)
            }
            None => Ok(Self::default()),
        }
    }

    /// Snapshot the resolved configuration and seed record into a run
    /// directory.
    pub fn snapshot(&self, run_dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(run_dir)?;
        std::fs::write(
            run_dir.join("config.toml"),
            toml::to_string_pretty(self).expect("config serializes"),
        )?;
        std::fs::write(
            run_dir.join("seeds.txt"),
            format!(
                "bank={}\ncorpus={}\nbuild={}\ncodec={}\ntrain={}\nsample={}\n",
                self.seeds.bank,
                self.seeds.corpus,
                self.seeds.build,
                self.seeds.codec,
                self.seeds.train,
                self.seeds.sample
            ),
        )?;
        Ok(())
    }
}
