//! Volumetric diffusion inpainting engine.
//!
//! The pipeline: volumes are intensity-normalized, padded, and encoded
//! into a 4-channel latent grid with 4× spatial compression; a reverse
//! diffusion chain conditioned on tissue segmentations and a tumor
//! concentration field regenerates unknown voxels while known voxels are
//! injected back from forward-noised ground truth at every step, with
//! re-noising excursions harmonizing the boundary; decoded volumes are
//! finished with histogram matching and gradient-domain Poisson blending,
//! and masked image-quality metrics score the result.
//!
//! Modules follow that flow: [`volume`] (core types and I/O),
//! [`schedule`] (β/ᾱ tables and the resampling plan), [`condition`]
//! (conditioning stacks), [`codec`] (latent transform), [`denoiser`]
//! (noise predictors), [`sampler`] (the chain itself), [`postprocess`]
//! (blending and matching), and [`evalkit`] (metrics and reports).

#![forbid(unsafe_code)]

pub mod codec;
pub mod condition;
pub mod denoiser;
pub mod error;
pub mod evalkit;
pub mod postprocess;
pub mod sampler;
pub mod schedule;
pub mod volume;

pub use codec::{BlockMomentCodec, IdentityCodec, LatentCodec, LatentVolume};
pub use condition::ConditioningField;
pub use denoiser::{AffineDenoiser, Denoiser, GaussianOracleDenoiser, GaussianPrior};
pub use error::{Error, Result};
pub use evalkit::{MetricReport, MetricValues};
pub use sampler::{repaint_inpaint, SamplerConfig};
pub use schedule::{NoiseSchedule, RePaintPlan};
pub use volume::{read_volume, write_volume, MaskVolume, Volume3, VolumeFormat};
