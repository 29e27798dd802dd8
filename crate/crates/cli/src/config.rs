use serde::{Deserialize, Serialize};

use dualsr_core::backbone::{DenoiserConfig, TeacherTrainConfig};
use dualsr_core::codec::{CodecConfig, CodecTrainConfig, DOWNSCALE};
use dualsr_core::degrade::DegradationRecipe;
use dualsr_core::infer::GuidanceScales;
use dualsr_core::perception::{ClassifierTrainConfig, FeatureNetConfig};
use dualsr_core::schedule::{make_schedule, DiffusionSchedule, ScheduleParams};
use dualsr_core::toydata::NUM_CLASSES;
use dualsr_core::trainer::TrainConfig;
use dualsr_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Side length of the square toy images.
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            size: 64,
            n_train: 256,
            n_val: 32,
            n_test: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub model: CodecConfig,
    pub train: CodecTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub model: FeatureNetConfig,
    pub train: ClassifierTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub model: DenoiserConfig,
    pub train: TeacherTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `[lambda_pix, lambda_sem]` settings reported by `eval`.
    pub scales: Vec<[f64; 2]>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let mut scales: Vec<[f64; 2]> = [0.0, 0.2, 0.5, 0.8, 1.0, 1.2, 1.5].iter().map(|&p| [p, 1.0]).collect();
        scales.extend([0.0, 0.2, 0.5, 0.8, 1.2, 1.5].iter().map(|&s| [1.0, s]));
        Self { scales }
    }
}

impl EvalConfig {
    pub fn guidance_scales(&self) -> Vec<GuidanceScales> {
        self.scales.iter().map(|[p, s]| GuidanceScales::new(*p, *s)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
    pub max_dim: usize,
    pub capacity: usize,
    pub max_upload_bytes: usize,
    pub cors_origin: Option<String>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        let d = dualsr_serve::ServiceConfig::default();
        Self {
            addr: "127.0.0.1:8080".into(),
            max_dim: d.max_dim,
            capacity: d.capacity,
            max_upload_bytes: d.max_upload_bytes,
            cors_origin: d.cors_origin,
        }
    }
}

/// Everything a run needs. Stage seeds are derived from `seed` when the
/// config is resolved, so one number reproduces the whole pipeline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub degrade: DegradationRecipe,
    pub schedule: ScheduleParams,
    pub codec: CodecSection,
    pub classifier: ClassifierSection,
    pub teacher: TeacherSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

impl CliConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the seed derivation and checks cross-section consistency.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        let s = self.seed;
        self.degrade.seed = s.wrapping_add(1);
        self.codec.train.seed = s.wrapping_add(2);
        self.classifier.train.seed = s.wrapping_add(3);
        self.teacher.train.seed = s.wrapping_add(4);
        self.train.seed = s.wrapping_add(5);

        if self.teacher.model.latent_channels != self.codec.model.latent_channels {
            return Err(Error::Config(format!(
                "teacher.model.latent_channels = {} but codec.model.latent_channels = {}",
                self.teacher.model.latent_channels, self.codec.model.latent_channels
            )));
        }
        for (name, n) in [
            ("teacher.model.num_classes", self.teacher.model.num_classes),
            ("classifier.model.num_classes", self.classifier.model.num_classes),
        ] {
            if n != NUM_CLASSES {
                return Err(Error::Config(format!("{name} = {n}, the toy data has {NUM_CLASSES}")));
            }
        }
        let d = &self.data;
        if d.n_train == 0 || d.n_val == 0 || d.n_test == 0 {
            return Err(Error::Config("data split sizes must be positive".into()));
        }
        let multiple = DOWNSCALE * self.teacher.model.spatial_multiple();
        for m in [multiple, self.degrade.downscale_factor.max(1)] {
            if d.size % m != 0 {
                return Err(Error::Config(format!("data.size = {} is not a multiple of {m}", d.size)));
            }
        }
        self.degrade.validate()?;
        self.train.validate(&self.schedule()?)?;
        for s in self.eval.guidance_scales() {
            s.validate()?;
        }
        Ok(self)
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        let p = self.schedule;
        make_schedule(p.steps, p.beta_start, p.beta_end)
    }

    pub fn service_config(&self) -> dualsr_serve::ServiceConfig {
        dualsr_serve::ServiceConfig {
            max_dim: self.serve.max_dim,
            capacity: self.serve.capacity,
            max_upload_bytes: self.serve.max_upload_bytes,
            cors_origin: self.serve.cors_origin.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = CliConfig::default().resolve(Some(9)).unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(CliConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = CliConfig::from_toml("[train]\npix_iters = 7\n[codec.model]\nwidth = 8\n").unwrap();
        assert_eq!(cfg.train.pix_iters, 7);
        assert_eq!(cfg.train.sem_iters, TrainConfig::default().sem_iters);
        assert_eq!(cfg.codec.model.width, 8);
        assert_eq!(cfg.codec.model.latent_channels, 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(CliConfig::from_toml("[train]\npix_itres = 7\n").is_err());
        assert!(CliConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn seeds_follow_top_level() {
        let a = CliConfig::default().resolve(Some(1)).unwrap();
        let b = CliConfig::default().resolve(Some(2)).unwrap();
        assert_ne!(a.train.seed, b.train.seed);
        assert_eq!(a.train.seed, 6);
        assert_eq!(a.degrade.seed, 2);
    }

    #[test]
    fn inconsistent_channels_rejected() {
        let mut cfg = CliConfig::default();
        cfg.codec.model.latent_channels = 3;
        assert!(cfg.resolve(None).is_err());
    }
}
