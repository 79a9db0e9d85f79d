//! Model construction from a run configuration and checkpoint save/load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::backbone::{build_backbone, BackboneConfig, BackboneModel};
use crate::config::{DiffusionConfig, RunConfig, FORMAT_VERSION};
use crate::control::{
    build_controlnet_branch, build_extractor, Architecture, ConditionedModel,
    ControlExtractorConfig, ControlModule, ControlNetBranchConfig, CrossNormState,
};
use crate::diffusion::PredictionKind;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Everything needed to rebuild a checkpointed model and sample from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub format_version: u32,
    pub backbone: BackboneConfig,
    pub diffusion: DiffusionConfig,
    pub prediction_kind: PredictionKind,
    pub sample_steps: usize,
    /// `None` for a bare backbone.
    pub architecture: Option<Architecture>,
    pub extractor: Option<ControlExtractorConfig>,
    pub controlnet: Option<ControlNetBranchConfig>,
}

impl ModelSpec {
    pub fn backbone_only(cfg: &RunConfig) -> Self {
        ModelSpec {
            format_version: FORMAT_VERSION,
            backbone: cfg.backbone.clone(),
            diffusion: cfg.diffusion.clone(),
            prediction_kind: cfg.train.prediction_kind,
            sample_steps: cfg.train.sample_steps,
            architecture: None,
            extractor: None,
            controlnet: None,
        }
    }

    pub fn conditioned(cfg: &RunConfig) -> Self {
        let arch = cfg.architecture();
        ModelSpec {
            architecture: Some(arch),
            extractor: (arch == Architecture::ControlNeXt).then(|| cfg.extractor.clone()),
            controlnet: (arch == Architecture::ControlNet).then(|| cfg.controlnet.clone()),
            ..Self::backbone_only(cfg)
        }
    }

    fn to_record(&self) -> String {
        serde_json::to_string(self).expect("model spec serializes")
    }

    fn from_record(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)
            .map_err(|e| Error::Archive(format!("unreadable model record: {e}")))?;
        if spec.format_version != FORMAT_VERSION {
            return Err(Error::Archive(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                spec.format_version
            )));
        }
        Ok(spec)
    }
}

/// Seed of the control module's fresh weights for a given training seed.
pub fn control_seed(model_seed: u64, train_seed: u64) -> u64 {
    model_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(train_seed)
        .wrapping_add(1)
}

/// A freshly initialized control module of architecture `arch` attached to `backbone`.
pub fn build_control(
    arch: Architecture,
    backbone: &BackboneModel,
    extractor: &ControlExtractorConfig,
    controlnet: &ControlNetBranchConfig,
    seed: u64,
) -> Result<ControlModule> {
    Ok(match arch {
        Architecture::ControlNet => {
            ControlModule::ControlNet(build_controlnet_branch(backbone, controlnet, seed)?.0)
        }
        Architecture::ControlNeXt => ControlModule::ControlNeXt {
            extractor: build_extractor(extractor, seed)?.0,
            cross_norm: CrossNormState::new(backbone.port().channels)?,
        },
    })
}

fn fill_exact(mut archive: Archive, stores: Vec<&mut ParamStore<f32>>) -> Result<()> {
    for store in stores {
        archive.fill_store(store)?;
    }
    if let Some((name, _)) = archive.entries.first() {
        return Err(Error::Archive(format!(
            "checkpoint carries `{name}`, which the model does not have"
        )));
    }
    Ok(())
}

fn read(path: &Path) -> Result<(Archive, ModelSpec)> {
    let archive = Archive::load(path)?;
    let spec = ModelSpec::from_record(&archive.config)?;
    Ok((archive, spec))
}

pub fn save_backbone(path: &Path, spec: &ModelSpec, model: &BackboneModel) -> Result<()> {
    let mut a = Archive::new(spec.to_record());
    a.push_store(&model.params);
    a.save(path)
}

/// Load a backbone checkpoint whose architecture must equal `expected`.
pub fn load_backbone(path: &Path, expected: &BackboneConfig) -> Result<BackboneModel> {
    let (archive, spec) = read(path)?;
    if &spec.backbone != expected {
        return Err(Error::Archive(format!(
            "{}: backbone configuration differs from the requested one",
            path.display()
        )));
    }
    let (mut model, _, _) = build_backbone(&spec.backbone, 0)?;
    fill_exact(archive, vec![&mut model.params])?;
    Ok(model)
}

pub fn save_checkpoint(path: &Path, spec: &ModelSpec, model: &ConditionedModel) -> Result<()> {
    if spec.architecture != Some(model.control.architecture()) {
        return Err(Error::Archive(
            "model spec and model disagree on the architecture".into(),
        ));
    }
    let mut a = Archive::new(spec.to_record());
    a.push_store(&model.backbone.params);
    for store in model.control.stores() {
        a.push_store(store);
    }
    a.save(path)
}

/// Rebuild a conditioned model from its checkpoint; names and shapes must match exactly.
pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, ConditionedModel)> {
    let (archive, spec) = read(path)?;
    let arch = spec.architecture.ok_or_else(|| {
        Error::Archive(format!(
            "{}: checkpoint holds a bare backbone",
            path.display()
        ))
    })?;
    let (backbone, _, port) = build_backbone(&spec.backbone, 0)?;
    let missing = |what: &str| {
        Error::Archive(format!(
            "{}: checkpoint lacks the {what} configuration",
            path.display()
        ))
    };
    let extractor = match arch {
        Architecture::ControlNeXt => spec.extractor.clone().ok_or_else(|| missing("extractor"))?,
        Architecture::ControlNet => {
            ControlExtractorConfig::for_port(&port, spec.backbone.image_size, 1)
        }
    };
    let controlnet = match arch {
        Architecture::ControlNet => spec
            .controlnet
            .clone()
            .ok_or_else(|| missing("controlnet"))?,
        Architecture::ControlNeXt => ControlNetBranchConfig::default(),
    };
    let control = build_control(arch, &backbone, &extractor, &controlnet, 0)?;
    let mut model = ConditionedModel { backbone, control };
    let mut stores = vec![&mut model.backbone.params];
    stores.extend(model.control.stores_mut());
    fill_exact(archive, stores)?;
    Ok((spec, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn tiny_cfg(arch: Architecture) -> RunConfig {
        let mut cfg = RunConfig {
            backbone: BackboneConfig {
                base_channels: 4,
                channel_multipliers: vec![1, 2],
                mid_channels: 8,
                time_embed_dim: 8,
                image_size: 16,
                ..BackboneConfig::default()
            },
            ..RunConfig::default()
        };
        cfg.data.size = 16;
        let port = cfg.backbone.port();
        cfg.extractor = ControlExtractorConfig::for_port(&port, 16, 1);
        cfg.train.architecture = arch;
        cfg.validate().unwrap();
        cfg
    }

    fn build(cfg: &RunConfig) -> ConditionedModel {
        let (bb, _, _) = build_backbone(&cfg.backbone, 3).unwrap();
        let control =
            build_control(cfg.architecture(), &bb, &cfg.extractor, &cfg.controlnet, 4).unwrap();
        ConditionedModel {
            backbone: bb,
            control,
        }
    }

    fn same(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
        a.bit_eq(b)
    }

    #[test]
    fn checkpoints_round_trip_for_both_architectures() {
        let dir = tempfile::tempdir().unwrap();
        for arch in [Architecture::ControlNeXt, Architecture::ControlNet] {
            let cfg = tiny_cfg(arch);
            let m = build(&cfg);
            let path = dir.path().join(format!("{}.cdar", arch.label()));
            save_checkpoint(&path, &ModelSpec::conditioned(&cfg), &m).unwrap();
            let (spec, back) = load_checkpoint(&path).unwrap();
            assert_eq!(spec, ModelSpec::conditioned(&cfg));
            assert!(same(&m.backbone.params, &back.backbone.params));
            for (x, y) in m.control.stores().into_iter().zip(back.control.stores()) {
                assert!(same(x, y));
            }
        }
    }

    #[test]
    fn mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(Architecture::ControlNeXt);
        let m = build(&cfg);
        let path = dir.path().join("b.cdar");
        save_backbone(&path, &ModelSpec::backbone_only(&cfg), &m.backbone).unwrap();
        assert!(load_backbone(&path, &cfg.backbone).is_ok());
        let mut other = cfg.backbone.clone();
        other.mid_channels = 16;
        assert!(load_backbone(&path, &other).is_err());
        assert!(load_checkpoint(&path).is_err());

        let mut spec = ModelSpec::conditioned(&cfg);
        spec.architecture = Some(Architecture::ControlNet);
        assert!(save_checkpoint(&path, &spec, &m).is_err());
    }
}
