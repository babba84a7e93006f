//! Pipeline configuration: TOML file with full CLI-flag override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use voxdiff_core::codec::LATENT_CHANNELS;
use voxdiff_core::denoiser::{AffineDenoiser, Denoiser, GaussianOracleDenoiser, GaussianPrior};
use voxdiff_core::error::{Error, Result};
use voxdiff_core::sampler::SamplerConfig;
use voxdiff_core::schedule::NoiseSchedule;
use voxdiff_core::volume::Shape3;

use crate::args::ConfigArgs;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_sample: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            t_sample: 250,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub eta: f64,
    pub jump_length: usize,
    pub n_resample: usize,
    pub dilate_unknown: bool,
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            eta: 1.0,
            jump_length: 10,
            n_resample: 10,
            dilate_unknown: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    /// "gaussian-oracle" or "affine".
    pub kind: String,
    pub prior_mean: f64,
    pub prior_variance: f64,
    /// Parameter file for the affine denoiser.
    pub params: Option<PathBuf>,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        Self {
            kind: "gaussian-oracle".into(),
            prior_mean: 0.0,
            prior_variance: 1.0,
            params: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schedule: ScheduleSection,
    pub sampler: SamplerSection,
    pub denoiser: DenoiserSection,
}

impl PipelineConfig {
    /// Loads the config file (TOML, or JSON for `.json` paths) and
    /// applies flag overrides.
    pub fn resolve(args: &ConfigArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Io(std::io::Error::new(
                        e.kind(),
                        format!("{}: {e}", path.display()),
                    ))
                })?;
                if path.extension().is_some_and(|e| e == "json") {
                    serde_json::from_str(&text)
                        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?
                } else {
                    toml::from_str(&text)
                        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?
                }
            }
            None => PipelineConfig::default(),
        };
        if let Some(v) = args.t_train {
            cfg.schedule.t_train = v;
        }
        if let Some(v) = args.beta_start {
            cfg.schedule.beta_start = v;
        }
        if let Some(v) = args.beta_end {
            cfg.schedule.beta_end = v;
        }
        if let Some(v) = args.t_sample {
            cfg.schedule.t_sample = v;
        }
        if let Some(v) = args.eta {
            cfg.sampler.eta = v;
        }
        if let Some(v) = args.jump_length {
            cfg.sampler.jump_length = v;
        }
        if let Some(v) = args.n_resample {
            cfg.sampler.n_resample = v;
        }
        if let Some(v) = args.dilate_unknown {
            cfg.sampler.dilate_unknown = v;
        }
        if let Some(v) = args.seed {
            cfg.sampler.seed = v;
        }
        if let Some(v) = &args.denoiser {
            cfg.denoiser.kind = v.clone();
        }
        if let Some(v) = args.prior_mean {
            cfg.denoiser.prior_mean = v;
        }
        if let Some(v) = args.prior_variance {
            cfg.denoiser.prior_variance = v;
        }
        if let Some(v) = &args.denoiser_params {
            cfg.denoiser.params = Some(v.clone());
        }
        Ok(cfg)
    }

    /// The respaced schedule the sampler (and denoiser) run on.
    pub fn sampling_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(
            self.schedule.t_train,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )?
        .subsample(self.schedule.t_sample)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            eta: self.sampler.eta,
            t_sample: self.schedule.t_sample,
            jump_length: self.sampler.jump_length,
            n_resample: self.sampler.n_resample,
            seed: self.sampler.seed,
            dilate_unknown: self.sampler.dilate_unknown,
        }
    }

    /// Builds the configured denoiser for a given latent geometry.
    pub fn build_denoiser(
        &self,
        latent_shape: Shape3,
        schedule: &NoiseSchedule,
        base_dir: &Path,
    ) -> Result<Box<dyn Denoiser>> {
        match self.denoiser.kind.as_str() {
            "gaussian-oracle" => {
                let prior = GaussianPrior::uniform(
                    LATENT_CHANNELS,
                    latent_shape,
                    self.denoiser.prior_mean,
                    self.denoiser.prior_variance,
                )?;
                Ok(Box::new(GaussianOracleDenoiser::new(
                    prior,
                    schedule.clone(),
                )))
            }
            "affine" => {
                let path = self.denoiser.params.as_ref().ok_or_else(|| {
                    Error::InvalidInput(
                        "denoiser.params must point at a parameter file for kind = \"affine\""
                            .into(),
                    )
                })?;
                let path = if path.is_relative() {
                    base_dir.join(path)
                } else {
                    path.clone()
                };
                let d = AffineDenoiser::load(&path)?;
                if d.latent_shape != latent_shape {
                    return Err(Error::InvalidInput(format!(
                        "denoiser parameters were trained for latent shape {:?}, \
                         pipeline needs {:?}",
                        d.latent_shape, latent_shape
                    )));
                }
                if d.t_steps() != schedule.len() {
                    return Err(Error::InvalidInput(format!(
                        "denoiser parameters cover {} timesteps, schedule has {}",
                        d.t_steps(),
                        schedule.len()
                    )));
                }
                Ok(Box::new(d))
            }
            other => Err(Error::InvalidInput(format!(
                "unknown denoiser kind \"{other}\" (expected \"gaussian-oracle\" or \"affine\")"
            ))),
        }
    }
}
