//! Command-line surface: subcommands and flags.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "voxdiff",
    about = "Volumetric diffusion inpainting: conditional reverse diffusion with \
             known-region injection, resampling, and image-space postprocessing",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Inpaint the unknown region of a volume (full pipeline).
    Inpaint(InpaintArgs),
    /// Generate a volume with no known region (everything sampled).
    Synth(SynthArgs),
    /// Train the affine denoiser on latent/condition pairs.
    TrainDenoiser(TrainArgs),
    /// Histogram matching and Poisson blending on image volumes.
    Postprocess(PostprocessArgs),
    /// Masked image-quality metrics with report tables.
    Evaluate(EvaluateArgs),
    /// Generate tumor/healthy evaluation mask pairs.
    Maskgen(MaskgenArgs),
    /// Dump the noise-schedule tables and the resampling plan as CSV.
    ScheduleDump(ScheduleDumpArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    /// Uncompressed single-file NIfTI-1 (float32).
    Nifti1Raw,
    /// Raw little-endian float32 payload + JSON sidecar.
    F32Raw,
}

impl FormatArg {
    pub fn to_format(self) -> voxdiff_core::VolumeFormat {
        match self {
            FormatArg::Nifti1Raw => voxdiff_core::VolumeFormat::Nifti1Raw,
            FormatArg::F32Raw => voxdiff_core::VolumeFormat::F32Raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Zero the tumor-concentration channel (healthy-tissue inpainting).
    Healthy,
    /// Keep the provided concentrations (tumor inpainting/synthesis).
    Tumor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    /// Histogram matching first, then Poisson blending (default).
    HeFirst,
    /// Poisson blending first, then histogram matching.
    PbFirst,
}

/// Overrides applied on top of the TOML pipeline config.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Pipeline config file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training schedule length.
    #[arg(long)]
    pub t_train: Option<usize>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    /// Respaced sampling steps.
    #[arg(long)]
    pub t_sample: Option<usize>,
    /// Sigma scale in 0..=1: 0 deterministic, 1 ancestral.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub jump_length: Option<usize>,
    #[arg(long)]
    pub n_resample: Option<usize>,
    /// Expand the unknown region by one dilation during the chain.
    #[arg(long)]
    pub dilate_unknown: Option<bool>,
    /// Denoiser kind: "gaussian-oracle" or "affine".
    #[arg(long)]
    pub denoiser: Option<String>,
    /// Uniform prior mean for the oracle denoiser.
    #[arg(long)]
    pub prior_mean: Option<f64>,
    /// Uniform prior variance for the oracle denoiser.
    #[arg(long)]
    pub prior_variance: Option<f64>,
    /// Affine denoiser parameter file (JSON).
    #[arg(long)]
    pub denoiser_params: Option<PathBuf>,
}

#[derive(Args)]
pub struct InpaintArgs {
    /// Input volume.
    #[arg(long, required_unless_present = "batch")]
    pub input: Option<PathBuf>,
    /// Known-voxel mask (1 = known), same grid as the input.
    #[arg(long, required_unless_present = "batch")]
    pub mask: Option<PathBuf>,
    /// Conditioning-field manifest (JSON).
    #[arg(long)]
    pub condition: Option<PathBuf>,
    /// Tissue-label volume (alternative to --condition; needs --tumor-conc).
    #[arg(long, conflicts_with = "condition", requires = "tumor_conc")]
    pub tissue_labels: Option<PathBuf>,
    /// Tumor-concentration volume with values in 0..=1.
    #[arg(long)]
    pub tumor_conc: Option<PathBuf>,
    /// Conditioning mode.
    #[arg(long, value_enum, default_value = "healthy")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "nifti1-raw")]
    pub format: FormatArg,
    /// Output volume path.
    #[arg(long, required_unless_present = "batch")]
    pub out: Option<PathBuf>,
    /// Batch manifest (JSON list of {id, input, mask, condition}).
    #[arg(long)]
    pub batch: Option<PathBuf>,
    /// Output directory for batch mode.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Skip image-space postprocessing (emit the raw decoded volume).
    #[arg(long)]
    pub no_postprocess: bool,
    #[command(flatten)]
    pub pipeline: ConfigArgs,
    #[command(flatten)]
    pub post: PostFlags,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Image-space shape "X,Y,Z" (each divisible by 4) when no condition
    /// manifest provides it.
    #[arg(long)]
    pub shape: Option<String>,
    /// Conditioning-field manifest (JSON).
    #[arg(long)]
    pub condition: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "healthy")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "nifti1-raw")]
    pub format: FormatArg,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: ConfigArgs,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training manifest: JSON list of {latent, condition} manifest paths.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub learning_rate: f64,
    /// Output parameter file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: ConfigArgs,
}

/// Postprocessing switches shared by `inpaint` and `postprocess`.
#[derive(Debug, Clone, Args)]
pub struct PostFlags {
    /// Enable Poisson blending (default on).
    #[arg(long, conflicts_with = "no_blend")]
    pub blend: bool,
    #[arg(long)]
    pub no_blend: bool,
    /// Enable histogram matching (default on).
    #[arg(long = "match", conflicts_with = "no_match")]
    pub match_: bool,
    #[arg(long)]
    pub no_match: bool,
    #[arg(long, value_enum, default_value = "he-first")]
    pub order: OrderArg,
    /// Voxels at or below this value are background.
    #[arg(long, default_value_t = 0.0)]
    pub black_threshold: f64,
    /// Histogram resolution for quantile mapping.
    #[arg(long, default_value_t = 256)]
    pub bins: usize,
    /// Exact empirical quantile mapping instead of binned.
    #[arg(long)]
    pub exact_quantiles: bool,
    /// Conjugate-gradient relative residual bound.
    #[arg(long, default_value_t = 1e-6)]
    pub cg_tolerance: f64,
    /// Conjugate-gradient iteration cap (default: 10·sqrt(n) + 1000).
    #[arg(long)]
    pub cg_max_iters: Option<usize>,
}

impl PostFlags {
    pub fn blend_enabled(&self) -> bool {
        !self.no_blend
    }
    pub fn match_enabled(&self) -> bool {
        !self.no_match
    }
}

#[derive(Args)]
pub struct PostprocessArgs {
    /// Generated (inpainted) volume.
    #[arg(long)]
    pub generated: PathBuf,
    /// Reference volume providing known context and boundary values.
    #[arg(long)]
    pub reference: PathBuf,
    /// Region mask (1 = voxels to harmonize).
    #[arg(long)]
    pub region: PathBuf,
    #[arg(long, value_enum, default_value = "nifti1-raw")]
    pub format: FormatArg,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub post: PostFlags,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Predicted volume.
    #[arg(long, required_unless_present = "batch")]
    pub pred: Option<PathBuf>,
    /// Ground-truth volume.
    #[arg(long, required_unless_present = "batch")]
    pub gt: Option<PathBuf>,
    /// Region mask as name=path; repeat for multiple regions.
    #[arg(long = "mask", value_name = "NAME=PATH")]
    pub masks: Vec<String>,
    /// Batch manifest: JSON list of {id, pred, gt, masks: {name: path}}.
    #[arg(long)]
    pub batch: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "nifti1-raw")]
    pub format: FormatArg,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
    /// Append published full-scale reference rows for context.
    #[arg(long, value_parser = ["healthy", "tumor"])]
    pub reference_table: Option<String>,
    /// Sample (n-1) standard deviation instead of population.
    #[arg(long)]
    pub sample_std: bool,
    /// SSIM window half-width (3 = 7x7x7).
    #[arg(long, default_value_t = 3)]
    pub ssim_window: usize,
    /// Min-max normalize both volumes to 0..=1 before scoring (for
    /// inputs that are not already in the normalized intensity domain).
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Args)]
pub struct MaskgenArgs {
    /// Ground-truth volume (defines brain extent).
    #[arg(long)]
    pub gt: PathBuf,
    /// Tumor segmentation mask (1 = tumor). Omit for a tumor-free subject.
    #[arg(long)]
    pub tumor_seg: Option<PathBuf>,
    /// Healthy-ellipsoid semi-axes "a,b,c" in voxels.
    #[arg(long, default_value = "8,8,8")]
    pub semi_axes: String,
    /// Dilation iterations applied to the tumor mask.
    #[arg(long, default_value_t = 0)]
    pub tumor_dilate: usize,
    #[arg(long, default_value_t = 0.0)]
    pub black_threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "nifti1-raw")]
    pub format: FormatArg,
    #[arg(long)]
    pub out_tumor: PathBuf,
    #[arg(long)]
    pub out_healthy: PathBuf,
    /// Also write the known-voxel mask (complement of tumor ∪ healthy),
    /// ready to feed straight into `inpaint --mask`.
    #[arg(long)]
    pub out_known: Option<PathBuf>,
}

#[derive(Args)]
pub struct ScheduleDumpArgs {
    #[arg(long, default_value_t = 1000)]
    pub t_train: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta_end: f64,
    /// Respace to this many steps before dumping.
    #[arg(long)]
    pub t_sample: Option<usize>,
    /// Also dump the resampling plan (needs jump parameters).
    #[arg(long)]
    pub jump_length: Option<usize>,
    #[arg(long)]
    pub n_resample: Option<usize>,
    /// Schedule CSV destination; "-" means stdout.
    #[arg(long, default_value = "-")]
    pub out: String,
    /// Plan CSV destination.
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
}
