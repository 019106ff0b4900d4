//! Run configuration: one JSON document with sections
//! `{hazards, base, latent, model, sampler, data}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::base::{DfmSpec, OuSpec};
use crate::conditional::ProcessSpec;
use crate::error::{Error, Result};
use crate::harness::data::ToyDatasetSpec;
use crate::hazard::HazardSpec;
use crate::latent::{DeletionScheme, LatentConfig};
use crate::model::optim::OptimizerKind;
use crate::model::{LrSchedule, ModelConfig, TrainSetup};
use crate::objective::LossWeights;
use crate::sampler::{ScheduleKind, StepSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardsSection {
    pub split: HazardSpec,
    pub delete: HazardSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseSection {
    pub ou: OuSpec,
    pub dfm: DfmSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSection {
    pub schedule: StepSchedule,
    /// Samples drawn by `sample` and compared by `eval`.
    pub num_samples: usize,
    /// Samples per packed forward pass.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
}

fn default_chunk() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub hazards: HazardsSection,
    pub base: BaseSection,
    pub latent: LatentConfig,
    pub model: ModelConfig,
    pub sampler: SamplerSection,
    pub data: ToyDatasetSpec,
}

impl RunConfig {
    pub fn process(&self) -> ProcessSpec {
        ProcessSpec { split_hazard: self.hazards.split, del_hazard: self.hazards.delete, ou: self.base.ou, dfm: self.base.dfm }
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup { process: self.process(), latent: self.latent }
    }

    pub fn validate(&self) -> Result<()> {
        self.process().validate()?;
        self.model.validate()?;
        self.data.validate()?;
        if self.model.d != self.data.d() {
            return Err(Error::config(format!("model.d = {} but the dataset has d = {}", self.model.d, self.data.d())));
        }
        if self.model.k != self.data.alphabet() || self.base.dfm.alphabet_size != self.data.alphabet() {
            return Err(Error::config("model.k, base.dfm.alphabet_size and the dataset alphabet must agree"));
        }
        if self.sampler.schedule.n_steps < 2 || self.sampler.num_samples == 0 || self.sampler.chunk == 0 {
            return Err(Error::config("sampler needs n_steps >= 2 and positive num_samples and chunk"));
        }
        if !(self.latent.lambda >= 0.0) {
            return Err(Error::config("latent.lambda must be >= 0"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Settings used for the toy tasks.
    pub fn preset(data: ToyDatasetSpec) -> Self {
        let d = data.d();
        let k = data.alphabet();
        RunConfig {
            hazards: HazardsSection { split: HazardSpec::Uniform, delete: HazardSpec::Uniform },
            base: BaseSection {
                ou: OuSpec::default(),
                dfm: DfmSpec::new(HazardSpec::Uniform, HazardSpec::Uniform, 0.0, k),
            },
            latent: LatentConfig { lambda: 0.0, deletion: DeletionScheme::Rate { d_r: 1.0 } },
            model: ModelConfig {
                hidden_dim: 32,
                num_blocks: 2,
                d,
                k,
                time_features: 4,
                learning_rate: 3e-3,
                batch_size: 32,
                steps: 3000,
                optimizer: OptimizerKind::default(),
                lr_schedule: LrSchedule::Cosine { final_fraction: 0.05 },
                grad_clip: 5.0,
                loss_weights: LossWeights::default(),
                ema_decay: 0.995,
            },
            sampler: SamplerSection {
                schedule: StepSchedule { kind: ScheduleKind::Cosine, n_steps: 100 },
                num_samples: 10_000,
                chunk: default_chunk(),
            },
            data,
        }
    }
}
