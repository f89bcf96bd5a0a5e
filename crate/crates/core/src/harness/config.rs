//! Strict JSON experiment configs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{StyleParams, SyntheticTaskConfig};
use crate::encoders::BackboneConfig;
use crate::fedruntime::{LrSchedule, RoundConfig};
use crate::losses::LossConfig;
use crate::model::{Ablations, ModelConfig};
use crate::seed::sub_seed;

use super::HarnessError;

/// Synthetic task settings. The image shape comes from `model.image_shape`
/// and the seed from `master_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub num_classes: usize,
    pub shots_per_class: usize,
    pub domains: Vec<StyleParams>,
    pub class_margin: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub concept_jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSettings {
    #[serde(default = "default_momentum")]
    pub style_momentum: f64,
    #[serde(default = "default_align_samples")]
    pub align_samples: usize,
    #[serde(default = "default_align_noise")]
    pub align_noise: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_align_samples() -> usize {
    400
}

fn default_align_noise() -> f64 {
    0.05
}

impl Default for BackboneSettings {
    fn default() -> Self {
        Self { style_momentum: default_momentum(), align_samples: default_align_samples(), align_noise: default_align_noise() }
    }
}

/// Round settings; the client seed comes from `master_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedSettings {
    pub rounds: usize,
    pub local_steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub participation: f64,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub weighted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSettings,
    pub model: ModelConfig,
    #[serde(default)]
    pub backbone: BackboneSettings,
    #[serde(default)]
    pub loss: LossConfig,
    pub fed: FedSettings,
    pub eval_cadence: usize,
    pub classes_per_client: usize,
    #[serde(default)]
    pub ablations: Ablations,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

/// Parses a config, reporting the JSON path of the first bad field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        HarnessError::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::config("<file>", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

impl ExperimentConfig {
    pub fn seed(&self, component: &str) -> u64 {
        sub_seed(self.master_seed, component)
    }

    pub fn task_config(&self) -> SyntheticTaskConfig {
        let d = &self.data;
        SyntheticTaskConfig {
            num_classes: d.num_classes,
            shots_per_class: d.shots_per_class,
            domains: d.domains.clone(),
            image_shape: self.model.image_shape,
            class_margin: d.class_margin,
            noise_sigma: d.noise_sigma,
            concept_jitter: d.concept_jitter,
            seed: self.seed("data"),
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            embed_dim: self.model.d,
            prompt_len: self.model.m,
            vision: self.model.vision(),
            style_momentum: self.backbone.style_momentum,
            align_samples: self.backbone.align_samples,
            align_noise: self.backbone.align_noise,
            seed: self.seed("backbone"),
        }
    }

    pub fn round_config(&self) -> RoundConfig {
        let f = &self.fed;
        RoundConfig {
            rounds: f.rounds,
            local_steps: f.local_steps,
            lr: f.lr,
            schedule: f.schedule,
            participation: f.participation,
            batch_size: f.batch_size,
            weighted: f.weighted,
            client_seed: self.seed("fed"),
        }
    }

    /// Cross-field checks, each reported with the offending field's path.
    pub fn validate(&self) -> Result<(), HarnessError> {
        fn err(path: &str, message: impl Into<String>) -> HarnessError {
            HarnessError::config(path, message)
        }
        let m = &self.model;
        if m.d == 0 || m.heads == 0 || !m.d.is_multiple_of(m.heads) {
            return Err(err("model.heads", format!("d = {} must be a positive multiple of heads = {}", m.d, m.heads)));
        }
        if m.m == 0 {
            return Err(err("model.m", "need at least one prompt token"));
        }
        if m.q_se == 0 {
            return Err(err("model.q_se", "need at least one channel-attention layer"));
        }
        if m.reduction == 0 {
            return Err(err("model.reduction", "must be >= 1"));
        }
        if !(m.init_std > 0.0 && m.init_std.is_finite()) {
            return Err(err("model.init_std", format!("must be > 0, got {}", m.init_std)));
        }
        m.vision().validate().map_err(|e| err("model.stages", e.to_string()))?;

        let b = &self.backbone;
        if !(0.0..1.0).contains(&b.style_momentum) {
            return Err(err("backbone.style_momentum", format!("must lie in [0, 1), got {}", b.style_momentum)));
        }
        if !(b.align_noise >= 0.0 && b.align_noise.is_finite()) {
            return Err(err("backbone.align_noise", "must be >= 0"));
        }

        let d = &self.data;
        let task = self.task_config();
        task.validate().map_err(|e| {
            let path = if d.num_classes < 2 {
                "data.num_classes"
            } else if d.shots_per_class == 0 {
                "data.shots_per_class"
            } else if !(d.class_margin > 0.0) {
                "data.class_margin"
            } else if !(d.noise_sigma >= 0.0) {
                "data.noise_sigma"
            } else if !(d.concept_jitter >= 0.0) {
                "data.concept_jitter"
            } else {
                "data.domains"
            };
            err(path, e.to_string())
        })?;
        self.loss.validate().map_err(|e| err(if e.starts_with("tau") { "loss.tau" } else { "loss.lambda_crp" }, e))?;

        let f = &self.fed;
        if !(f.lr >= 0.0 && f.lr.is_finite()) {
            return Err(err("fed.lr", format!("must be finite and >= 0, got {}", f.lr)));
        }
        if !(f.participation > 0.0 && f.participation <= 1.0) {
            return Err(err("fed.participation", format!("must lie in (0, 1], got {}", f.participation)));
        }
        if f.batch_size == Some(0) {
            return Err(err("fed.batch_size", "must be >= 1 when set"));
        }
        if self.eval_cadence == 0 || !f.rounds.is_multiple_of(self.eval_cadence) {
            return Err(err(
                "eval_cadence",
                format!("must be >= 1 and divide fed.rounds = {} (got {})", f.rounds, self.eval_cadence),
            ));
        }
        let n_base = d.num_classes.div_ceil(2);
        if self.classes_per_client == 0 || !n_base.is_multiple_of(self.classes_per_client) {
            return Err(err(
                "classes_per_client",
                format!("{n_base} base classes cannot be split into blocks of {}; adjust num_classes or classes_per_client", self.classes_per_client),
            ));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(err("output_dir", "must not be empty"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SMOKE: &str = include_str!("../../../../configs/smoke.json");

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let bad = SMOKE.replacen("\"lr\"", "\"lr\": 0.1, \"momentum\"", 1);
        let e = parse_config(&bad).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("`fed.momentum`"), "{e}");
        assert!(e.to_string().contains("momentum"), "{e}");
    }

    #[test]
    fn type_errors_name_the_field() {
        let bad = SMOKE.replacen("\"heads\": 4", "\"heads\": \"four\"", 1);
        let e = parse_config(&bad).unwrap_err();
        assert!(e.to_string().contains("`model.heads`"), "{e}");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let base = parse_config(SMOKE).unwrap();
        let cases: Vec<(ExperimentConfig, &str)> = vec![
            (ExperimentConfig { eval_cadence: 3, ..base.clone() }, "eval_cadence"),
            (ExperimentConfig { classes_per_client: 3, ..base.clone() }, "classes_per_client"),
            (ExperimentConfig { fed: FedSettings { participation: 1.5, ..base.fed.clone() }, ..base.clone() }, "fed.participation"),
            (ExperimentConfig { loss: LossConfig { tau: 0.0, lambda_crp: 0.1 }, ..base.clone() }, "loss.tau"),
            (ExperimentConfig { model: ModelConfig { heads: 3, ..base.model.clone() }, ..base.clone() }, "model.heads"),
            (ExperimentConfig { data: DataSettings { num_classes: 1, ..base.data.clone() }, ..base.clone() }, "data.num_classes"),
        ];
        for (cfg, path) in cases {
            let e = cfg.validate().unwrap_err();
            assert!(e.to_string().contains(&format!("`{path}`")), "{path}: {e}");
            assert_eq!(e.exit_code(), 2);
        }
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = parse_config(SMOKE).unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }

    #[test]
    fn sub_seeds_differ_per_component() {
        let cfg = parse_config(SMOKE).unwrap();
        let seeds = [cfg.seed("data"), cfg.seed("backbone"), cfg.seed("fed"), cfg.seed("model")];
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }
}
