//! Experiment configuration file (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use progseg::losses::LossWeights;
use progseg::model::{ExtendInit, ModelSpec};
use progseg::patchify::PatchConfig;
use progseg::preprocess::{ClaheParams, NormalizeParams};
use progseg::raster::{parse_band_set, BandId};
use progseg::synth::SceneParams;
use progseg::train::{AugmentParams, StageConfig, StagePlan};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Band set, e.g. `RGB`, `RGBN`, `RGBNS1S2Th`, `all` or `RED,GREEN,NIR`.
    pub bands: String,
    pub data: DataConfig,
    pub normalize: NormalizeParams,
    pub clahe: ClaheSection,
    pub patches: PatchConfig,
    pub model: ModelSpec,
    /// Required; a config without a plan is rejected.
    #[serde(default)]
    pub plan: Option<PlanConfig>,
    pub augment: AugmentSection,
    pub loss: LossWeights,
    pub predict: PredictConfig,
}

/// Exactly one of `tiles_dir` and `synth` is set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of labeled tiles (PSEG archives or GeoTIFF pairs).
    pub tiles_dir: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_tiles: usize,
    pub seed: u64,
    pub scene: SceneParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tiles: 50,
            seed: 0,
            scene: SceneParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClaheSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub params: ClaheParams,
}

impl Default for ClaheSection {
    fn default() -> Self {
        Self {
            enabled: true,
            params: ClaheParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub params: AugmentParams,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            enabled: true,
            params: AugmentParams::default(),
        }
    }
}

/// One training stage; augmentation comes from the `[augment]` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageEntry {
    pub patch_size: usize,
    pub frozen_epochs: usize,
    pub finetune_epochs: usize,
    pub lr_head: f64,
    pub lr_base: f64,
    pub batch_size: usize,
    pub early_stop_patience: usize,
}

impl Default for StageEntry {
    fn default() -> Self {
        Self::from_stage(&StageConfig::default())
    }
}

impl StageEntry {
    pub fn from_stage(s: &StageConfig) -> Self {
        Self {
            patch_size: s.patch_size,
            frozen_epochs: s.frozen_epochs,
            finetune_epochs: s.finetune_epochs,
            lr_head: s.lr_head,
            lr_base: s.lr_base,
            batch_size: s.batch_size,
            early_stop_patience: s.early_stop_patience,
        }
    }

    pub fn to_stage(&self, augment: Option<AugmentParams>) -> StageConfig {
        StageConfig {
            patch_size: self.patch_size,
            frozen_epochs: self.frozen_epochs,
            finetune_epochs: self.finetune_epochs,
            lr_head: self.lr_head,
            lr_base: self.lr_base,
            batch_size: self.batch_size,
            early_stop_patience: self.early_stop_patience,
            augment,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub stages: Vec<StageEntry>,
    /// Optional starting checkpoint; extended if it lacks some bands.
    pub init_checkpoint: Option<PathBuf>,
    pub extend_init: ExtendInit,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self::from_sizes(&[64, 128, 256], &StageEntry::default())
    }
}

impl PlanConfig {
    pub fn from_sizes(sizes: &[usize], template: &StageEntry) -> Self {
        Self {
            stages: sizes
                .iter()
                .map(|&patch_size| StageEntry {
                    patch_size,
                    ..template.clone()
                })
                .collect(),
            init_checkpoint: None,
            extend_init: ExtendInit::Mean,
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.patch_size).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Defaults to the last stage's patch size.
    pub tile_size: Option<usize>,
    /// Validation tiles for which prediction previews are written.
    pub max_images: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            tile_size: None,
            max_images: 4,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/experiment"),
            bands: "all".into(),
            data: DataConfig {
                tiles_dir: None,
                synth: Some(SynthConfig::default()),
            },
            normalize: NormalizeParams::default(),
            clahe: ClaheSection::default(),
            patches: PatchConfig::default(),
            model: ModelSpec::default(),
            plan: Some(PlanConfig::default()),
            augment: AugmentSection::default(),
            loss: LossWeights::default(),
            predict: PredictConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("config parse error: {e}")))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::config(format!("config serialize error: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn band_set(&self) -> Result<Vec<BandId>, CliError> {
        parse_band_set(&self.bands).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn augment_params(&self) -> Option<AugmentParams> {
        self.augment.enabled.then(|| self.augment.params.clone())
    }

    pub fn stage_plan(&self) -> Result<StagePlan, CliError> {
        let plan = self.plan.as_ref().ok_or_else(|| CliError::config("config has no [plan] section"))?;
        if plan.stages.is_empty() {
            return Err(CliError::config("plan has no stages"));
        }
        let augment = self.augment_params();
        let plan = StagePlan {
            stages: plan.stages.iter().map(|s| s.to_stage(augment.clone())).collect(),
        };
        plan.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(plan)
    }

    /// Model spec with the channel count of the configured band set.
    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        let spec = ModelSpec {
            in_channels: self.band_set()?.len(),
            ..self.model.clone()
        };
        spec.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(spec)
    }

    /// Checks every nested invariant without touching the file system.
    pub fn validate(&self) -> Result<(), CliError> {
        let bands = self.band_set()?;
        let plan = self.stage_plan()?;
        let spec = self.model_spec()?;
        let cfg = |e: String| CliError::config(e);
        self.normalize.validate().map_err(|e| cfg(e.to_string()))?;
        if self.clahe.enabled {
            self.clahe.params.validate().map_err(|e| cfg(e.to_string()))?;
        }
        self.patches.validate().map_err(|e| cfg(e.to_string()))?;
        self.loss.validate().map_err(|e| cfg(e.to_string()))?;
        for s in &plan.stages {
            if s.patch_size % spec.downsampling() != 0 {
                return Err(cfg(format!(
                    "patch size {} is not a multiple of the model downsampling {}",
                    s.patch_size,
                    spec.downsampling()
                )));
            }
        }
        match (&self.data.tiles_dir, &self.data.synth) {
            (Some(_), Some(_)) => return Err(cfg("set only one of data.tiles_dir and data.synth".into())),
            (None, None) => return Err(cfg("no data source: set data.tiles_dir or data.synth".into())),
            (None, Some(s)) => {
                s.scene.validate().map_err(|e| cfg(e.to_string()))?;
                if let Some(missing) = bands.iter().find(|b| !s.scene.bands.contains(b)) {
                    return Err(cfg(format!("band {missing} is not generated by data.synth.scene")));
                }
                let (h, w) = s.scene.size;
                let largest = plan.stages.last().map(|s| s.patch_size).unwrap_or(1);
                if h % largest != 0 || w % largest != 0 {
                    return Err(cfg(format!("scene {h}x{w} is not divisible by patch size {largest}")));
                }
            }
            (Some(_), None) => {}
        }
        if let Some(t) = self.predict.tile_size {
            if t == 0 || t % spec.downsampling() != 0 {
                return Err(cfg(format!("predict.tile_size {t} must be a positive multiple of {}", spec.downsampling())));
            }
        }
        Ok(())
    }

    /// Resolves relative data paths against the config file's directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(d) = &self.data.tiles_dir {
            if d.is_relative() {
                self.data.tiles_dir = Some(base.join(d));
            }
        }
        if self.out_dir.is_relative() {
            self.out_dir = base.join(&self.out_dir);
        }
        if let Some(p) = self.plan.as_mut() {
            if let Some(c) = &p.init_checkpoint {
                if c.is_relative() {
                    p.init_checkpoint = Some(base.join(c));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn missing_plan_is_rejected() {
        let c = ExperimentConfig::from_toml("seed = 1\n").unwrap();
        assert!(c.plan.is_none());
        let err = c.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn partial_sections_take_defaults() {
        let text = r#"
bands = "RGBN"

[clahe]
enabled = false

[[plan.stages]]
patch_size = 64
finetune_epochs = 3

[[plan.stages]]
patch_size = 128
"#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        let plan = c.stage_plan().unwrap();
        assert_eq!(plan.stages[0].finetune_epochs, 3);
        assert_eq!(plan.stages[1].finetune_epochs, 20);
        assert_eq!(plan.stages[1].augment, Some(AugmentParams::default()));
        assert!(!c.clahe.enabled);
        assert_eq!(c.clahe.params, ClaheParams::default());
        assert_eq!(c.model_spec().unwrap().in_channels, 4);
        c.validate().unwrap();
    }

    #[test]
    fn bundled_configs_validate() {
        let prog = ExperimentConfig::from_toml(include_str!("../../../configs/synthetic.toml")).unwrap();
        let base = ExperimentConfig::from_toml(include_str!("../../../configs/synthetic_baseline.toml")).unwrap();
        let full = ExperimentConfig::from_toml(include_str!("../../../configs/paper_defaults.toml")).unwrap();
        for c in [&prog, &base, &full] {
            c.validate().unwrap();
        }
        assert_eq!(prog.plan.as_ref().unwrap().sizes(), [64, 128, 256]);
        assert_eq!(base.plan.as_ref().unwrap().sizes(), [256]);
        assert_eq!(prog.stage_plan().unwrap().total_epochs(), base.stage_plan().unwrap().total_epochs());
        assert_eq!(full.stage_plan().unwrap().stages[0], StageConfig { patch_size: 64, ..StageConfig::default() });
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(ExperimentConfig::from_toml("sed = 1\n").is_err());
        let mut c = ExperimentConfig::default();
        c.plan.as_mut().unwrap().stages[1].patch_size = 32;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.data.tiles_dir = Some("x".into());
        assert!(c.validate().is_err());
    }
}
