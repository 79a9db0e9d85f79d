//! Run configuration: one versioned TOML record for every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::control::{Architecture, ControlExtractorConfig, ControlNetBranchConfig};
use crate::datagen::{ControlKind, DatasetKey};
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::finetune::{PretrainConfig, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub schedule: ScheduleKind,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule: ScheduleKind::Linear,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.schedule)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub train_count: usize,
    /// Held-out split; its seed is `seed + 1`.
    pub eval_count: usize,
    pub size: usize,
    pub kind: ControlKind,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            train_count: 2000,
            eval_count: 64,
            size: 64,
            kind: ControlKind::Mask,
        }
    }
}

impl DataConfig {
    pub fn train_key(&self) -> DatasetKey {
        DatasetKey {
            seed: self.seed,
            count: self.train_count,
            size: self.size,
            kind: self.kind,
        }
    }

    pub fn eval_key(&self) -> DatasetKey {
        DatasetKey {
            seed: self.seed.wrapping_add(1),
            count: self.eval_count,
            ..self.train_key()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub seeds: Vec<u64>,
    /// End each run at its first evaluation that reaches the threshold.
    pub stop_at_threshold: bool,
    /// Train the baseline runs only up to the extractor runs' median
    /// threshold step; past that step no baseline outcome changes the verdict.
    pub truncate_after_verdict: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            seeds: vec![0, 1, 2],
            stop_at_threshold: true,
            truncate_after_verdict: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub iters: usize,
    pub warmup: usize,
    pub batch_size: usize,
    /// Independent benchmark repetitions; the ordering must hold in each.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            iters: 100,
            warmup: 10,
            batch_size: 1,
            repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub run_name: String,
    /// Seed of every freshly initialized weight.
    pub model_seed: u64,
    pub backbone: BackboneConfig,
    pub diffusion: DiffusionConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub extractor: ControlExtractorConfig,
    pub controlnet: ControlNetBranchConfig,
    pub compare: CompareConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: FORMAT_VERSION,
            run_name: "default".into(),
            model_seed: 0,
            backbone: BackboneConfig::default(),
            diffusion: DiffusionConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            extractor: ControlExtractorConfig::default(),
            controlnet: ControlNetBranchConfig::default(),
            compare: CompareConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Check every section and the agreements between them.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let name_ok = !self.run_name.is_empty()
            && self
                .run_name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            && !self.run_name.starts_with('.');
        if !name_ok {
            return Err(Error::Config(format!(
                "run_name `{}` must be non-empty ASCII letters, digits, `-`, `_` or `.`",
                self.run_name
            )));
        }
        self.backbone.validate()?;
        self.diffusion.schedule()?;
        self.train.validate()?;
        self.extractor.validate()?;
        self.controlnet.validate()?;
        if self.data.train_count == 0 || self.data.eval_count == 0 {
            return Err(Error::Config("data counts must be positive".into()));
        }
        if self.data.size != self.backbone.image_size {
            return Err(Error::Config(format!(
                "data.size {} differs from backbone.image_size {}",
                self.data.size, self.backbone.image_size
            )));
        }
        let port = self.backbone.port();
        let e = &self.extractor;
        if e.image_size != self.backbone.image_size
            || e.downsample_to != port.size
            || e.out_channels != port.channels
        {
            return Err(Error::Config(format!(
                "extractor maps {}px to ({}, {}px) but the injection port expects ({}, {}px) from {}px",
                e.image_size, e.out_channels, e.downsample_to, port.channels, port.size, self.backbone.image_size
            )));
        }
        if e.in_channels != self.controlnet.control_channels {
            return Err(Error::Config(
                "extractor.in_channels and controlnet.control_channels must agree".into(),
            ));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be positive".into()));
        }
        if self.compare.seeds.is_empty() {
            return Err(Error::Config("compare.seeds must not be empty".into()));
        }
        if self.bench.batch_size == 0 {
            return Err(Error::Config("bench.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        self.train.architecture
    }

    /// Digest of everything that determines the pretrained backbone.
    pub fn pretrain_key(&self) -> String {
        let record = serde_json::json!({
            "backbone": self.backbone,
            "diffusion": self.diffusion,
            "data": self.data.train_key(),
            "pretrain": self.pretrain,
            "prediction_kind": self.train.prediction_kind,
            "model_seed": self.model_seed,
        });
        let digest = Sha256::digest(record.to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_and_bad_versions_fail() {
        let text = RunConfig::default().to_toml();
        let extra = text.replace("[backbone]\n", "[backbone]\ncolour = 3\n");
        assert!(matches!(
            RunConfig::from_toml(&extra),
            Err(Error::Config(_))
        ));
        let v2 = text.replace("format_version = 1", "format_version = 2");
        assert!(RunConfig::from_toml(&v2).is_err());
        assert!(RunConfig::from_toml("run_name = \"x\"").is_err());
    }

    #[test]
    fn inconsistent_sizes_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.data.size = 32;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.extractor.out_channels = 64;
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            run_name: "../escape".into(),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pretrain_key_ignores_fine_tuning_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.learning_rate = 0.5;
        b.train.architecture = Architecture::ControlNet;
        assert_eq!(a.pretrain_key(), b.pretrain_key());
        b.pretrain.steps += 1;
        assert_ne!(a.pretrain_key(), b.pretrain_key());
    }
}
