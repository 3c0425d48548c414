//! Run configuration: a sectioned `key = value` file (TOML), validated on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::data::{gen_shapes_dataset, load_dataset, save_dataset, Dataset, MAX_CLASSES, RESOLUTIONS};
use crate::error::{Error, Result};
use crate::sampler::SampleConfig;
use crate::schedule::StageSchedule;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub stages: usize,
    pub target_resolution: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            stages: 2,
            target_resolution: 32,
        }
    }
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset file; loaded when it exists.
    pub path: Option<PathBuf>,
    /// Generate a shapes dataset when no file is available (and save it to `path` if set).
    pub generate: bool,
    pub count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            generate: true,
            count: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Receives checkpoints and the loss log.
    pub dir: PathBuf,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("run"),
            resume: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parses and validates; relative paths are taken relative to `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        if let Some(p) = cfg.data.path.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.output.resume.as_mut() {
            rebase(p);
        }
        rebase(&mut cfg.output.dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let sched = self.stage_schedule()?;
        if sched.target_resolution() > self.model.max_resolution {
            return Err(Error::Config(format!(
                "target_resolution {} exceeds model max_resolution {}",
                sched.target_resolution(),
                self.model.max_resolution
            )));
        }
        if self.data.generate {
            if !RESOLUTIONS.contains(&sched.target_resolution()) {
                return Err(Error::Config(format!(
                    "generated datasets support resolutions {RESOLUTIONS:?}, not {}",
                    sched.target_resolution()
                )));
            }
            if self.model.num_classes > MAX_CLASSES || self.model.channels != 3 {
                return Err(Error::Config(format!(
                    "generated datasets need 3 channels and at most {MAX_CLASSES} classes"
                )));
            }
            if self.data.count == 0 {
                return Err(Error::Config("data.count must be positive".into()));
            }
        }
        self.train.validate()?;
        self.sample.validate(&sched)
    }

    pub fn stage_schedule(&self) -> Result<StageSchedule> {
        StageSchedule::new(
            self.schedule.stages,
            self.schedule.target_resolution,
            self.model.patch_size,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    /// The shapes dataset described by `[data]`, ignoring any file.
    pub fn generate_dataset(&self) -> Result<Dataset> {
        gen_shapes_dataset(
            self.data.count,
            self.schedule.target_resolution,
            self.model.num_classes,
            self.data.seed,
        )
    }

    /// Loads the dataset file if present, otherwise generates (and saves) one.
    pub fn dataset(&self) -> Result<Dataset> {
        if let Some(p) = &self.data.path {
            if p.exists() {
                return load_dataset(p);
            }
        }
        if !self.data.generate {
            return Err(Error::Config(match &self.data.path {
                Some(p) => format!("dataset {} not found and generation is disabled", p.display()),
                None => "no dataset path given and generation is disabled".into(),
            }));
        }
        let ds = self.generate_dataset()?;
        if let Some(p) = &self.data.path {
            save_dataset(&ds, p)?;
        }
        Ok(ds)
    }
}
