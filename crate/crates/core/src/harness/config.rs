use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{LrSchedule, OptimizerSpec};
use crate::prune::AsfpSchedule;
use crate::zoo::SUPPORTED_DEPTHS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub depth: u32,
    pub width_scale: f64,
    /// Images are resized to `input_size`x`input_size` before the model.
    pub input_size: usize,
    #[serde(default = "one")]
    pub in_channels: usize,
    #[serde(default = "two")]
    pub num_classes: usize,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}

impl Architecture {
    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.input_size, self.input_size]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum PruningPlan {
    None,
    /// Train, then `rounds` times: prune `rate` of the remaining filters and
    /// fine-tune with the mask frozen.
    Hard {
        rounds: usize,
        rate: f64,
        fine_tune_epochs: usize,
        #[serde(default = "default_fine_tune_factor")]
        fine_tune_lr_factor: f32,
    },
    /// One training run with soft pruning at every epoch end.
    Asfp {
        target_rate: f64,
        #[serde(default = "default_exponent")]
        exponent: f64,
    },
}

fn default_fine_tune_factor() -> f32 {
    0.1
}
fn default_exponent() -> f64 {
    3.0
}

impl PruningPlan {
    pub fn method(&self) -> &'static str {
        match self {
            PruningPlan::None => "none",
            PruningPlan::Hard { .. } => "hard",
            PruningPlan::Asfp { .. } => "asfp",
        }
    }

    pub fn default_hard() -> Self {
        PruningPlan::Hard {
            rounds: 3,
            rate: 0.3,
            fine_tune_epochs: 15,
            fine_tune_lr_factor: default_fine_tune_factor(),
        }
    }

    pub fn default_asfp() -> Self {
        PruningPlan::Asfp {
            target_rate: 0.3,
            exponent: default_exponent(),
        }
    }
}

fn default_lr() -> LrSchedule {
    LrSchedule {
        base_lr: 0.05,
        decay_factor: 0.1,
        step_every: 30,
    }
}
fn default_optimizer() -> OptimizerSpec {
    OptimizerSpec::sgd(0.9, 5e-4)
}
fn default_epochs() -> usize {
    40
}
fn default_batch() -> usize {
    32
}
fn default_k() -> usize {
    10
}
fn default_repeats() -> usize {
    10
}
fn default_true() -> bool {
    true
}
fn default_p() -> f64 {
    2.0
}
fn default_plan() -> PruningPlan {
    PruningPlan::None
}

/// Everything one cross-validated experiment needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub architecture: Architecture,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_lr")]
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Dataset directory or manifest file; relative paths are resolved
    /// against the config file's directory by [`ExperimentConfig::load`].
    pub dataset: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub stratified: bool,
    #[serde(default = "default_plan")]
    pub pruning: PruningPlan,
    /// Exponent of the l_p filter norm.
    #[serde(default = "default_p")]
    pub norm_p: f64,
    #[serde(default)]
    pub initial_weights: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults for everything but the architecture and dataset.
    pub fn new(architecture: Architecture, dataset: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            architecture,
            optimizer: default_optimizer(),
            lr_schedule: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            dataset: dataset.into(),
            k: default_k(),
            repeats: default_repeats(),
            seed: 0,
            stratified: true,
            pruning: PruningPlan::None,
            norm_p: default_p(),
            initial_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.architecture;
        if !SUPPORTED_DEPTHS.contains(&a.depth) {
            return Err(Error::Config(format!("unsupported depth {}", a.depth)));
        }
        if !(a.width_scale > 0.0 && a.width_scale <= 1.0) {
            return Err(Error::Config(format!("width_scale {} outside (0, 1]", a.width_scale)));
        }
        if a.input_size < 32 || a.in_channels == 0 || a.num_classes < 2 {
            return Err(Error::Config(
                "architecture needs input_size >= 32, in_channels >= 1 and num_classes >= 2".into(),
            ));
        }
        self.optimizer.validate()?;
        self.lr_schedule.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2 (batch norm needs a batch)".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k = {} must be >= 2", self.k)));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if !(self.norm_p > 0.0 && self.norm_p.is_finite()) {
            return Err(Error::Config(format!("norm_p {} must be positive", self.norm_p)));
        }
        match self.pruning {
            PruningPlan::None => {}
            PruningPlan::Hard {
                rounds,
                rate,
                fine_tune_lr_factor,
                ..
            } => {
                if rounds == 0 {
                    return Err(Error::Config("hard pruning needs at least one round".into()));
                }
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::Config(format!("pruning rate {rate} outside [0, 1)")));
                }
                if !(fine_tune_lr_factor >= 0.0 && fine_tune_lr_factor.is_finite()) {
                    return Err(Error::Config("fine_tune_lr_factor must be >= 0".into()));
                }
            }
            PruningPlan::Asfp { target_rate, exponent } => AsfpSchedule {
                target_rate,
                total_epochs: self.epochs,
                exponent,
            }
            .validate()?,
        }
        Ok(())
    }

    /// Reads and validates a JSON config, resolving relative paths against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.dataset.is_relative() {
            cfg.dataset = base.join(&cfg.dataset);
        }
        if let Some(w) = cfg.initial_weights.as_mut().filter(|w| w.is_relative()) {
            *w = base.join(&*w);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
