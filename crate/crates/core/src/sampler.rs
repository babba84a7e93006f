//! Reverse-diffusion sampling: the forward marginal, the generalized
//! reverse update, known-region injection, and the resampling inpainting
//! loop.
//!
//! The reverse update at transition t → t_prev is
//!
//!   ẑ₀     = (z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t
//!   z_prev = √ᾱ_prev·ẑ₀ + √(1−ᾱ_prev−σ_t²)·ε̂ + σ_t·ε,   ε ~ N(0, I)
//!
//! with σ_t = η·√((1−ᾱ_prev)/(1−ᾱ_t))·√(1−ᾱ_t/ᾱ_prev). η = 1 reproduces
//! ancestral sampling (σ_t² equals the posterior variance β̃_t for adjacent
//! steps); η = 0 is the deterministic update.
//!
//! Inpainting composites the chain with forward-noised ground truth at
//! every denoising step: known voxels are overwritten by draws from
//! N(√ᾱ_t·z₀ᴳᵀ, (1−ᾱ_t)I), unknown voxels keep the model's sample. The
//! plan's re-noising excursions apply the one-step forward kernel
//! q(z_t | z_{t−1}) = N(√α_t·z, β_t I) once per unit up-step.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::LatentVolume;
use crate::condition::ConditioningField;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, RePaintPlan, Transition};
use crate::volume::MaskVolume;

/// Sampler knobs. `t_sample` must equal the length of the schedule the
/// sampler runs on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// σ_t scale in [0, 1]: 0 = deterministic, 1 = ancestral.
    pub eta: f64,
    pub t_sample: usize,
    pub jump_length: usize,
    pub n_resample: usize,
    pub seed: u64,
    /// Expand the unknown region by one dilation iteration during the
    /// chain (the final composite always uses the caller's mask).
    pub dilate_unknown: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            t_sample: 250,
            jump_length: 10,
            n_resample: 10,
            seed: 0,
            dilate_unknown: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidInput(format!(
                "eta must be in [0, 1], got {}",
                self.eta
            )));
        }
        if self.t_sample == 0 || self.jump_length == 0 || self.n_resample == 0 {
            return Err(Error::InvalidInput(
                "t_sample, jump_length, n_resample must be positive".into(),
            ));
        }
        if self.jump_length > self.t_sample {
            return Err(Error::InvalidInput(format!(
                "jump_length {} exceeds t_sample {}",
                self.jump_length, self.t_sample
            )));
        }
        Ok(())
    }
}

/// Standard-normal latent with the geometry of `like`. Draws are
/// channel-major then voxel-major.
pub fn noise_like<R: Rng>(like: &LatentVolume, rng: &mut R) -> LatentVolume {
    let mut out = like.clone();
    for c in 0..out.num_channels() {
        for v in out.channel_mut(c) {
            *v = rng.sample(StandardNormal);
        }
    }
    out
}

/// Forward marginal: √ᾱ_t·z₀ + √(1−ᾱ_t)·eps. At t = 0 this is z₀ exactly.
pub fn forward_diffuse(
    z0: &LatentVolume,
    t: usize,
    eps: &LatentVolume,
    s: &NoiseSchedule,
) -> Result<LatentVolume> {
    if t > s.len() {
        return Err(Error::InvalidInput(format!(
            "timestep {t} outside schedule range 0..={}",
            s.len()
        )));
    }
    if t == 0 {
        return Ok(z0.clone());
    }
    let abar = s.alpha_bar(t);
    let (ca, cb) = (abar.sqrt(), (1.0 - abar).sqrt());
    z0.zip_map(eps, |z, e| ca * z + cb * e)
}

/// σ_t of the generalized reverse update for the transition t → t_prev.
pub fn sigma_t(eta: f64, s: &NoiseSchedule, t: usize, t_prev: usize) -> f64 {
    let abar_t = s.alpha_bar(t);
    let abar_prev = s.alpha_bar(t_prev);
    eta * ((1.0 - abar_prev) / (1.0 - abar_t)).sqrt() * (1.0 - abar_t / abar_prev).sqrt()
}

/// One denoising transition t → t_prev.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<R: Rng>(
    z_t: &LatentVolume,
    t: usize,
    t_prev: usize,
    denoiser: &dyn Denoiser,
    cond: Option<&ConditioningField>,
    cfg: &SamplerConfig,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentVolume> {
    cfg.validate()?;
    if t_prev >= t || t > s.len() {
        return Err(Error::InvalidInput(format!(
            "reverse step needs t > t_prev >= 0 within the schedule, got {t} -> {t_prev}"
        )));
    }
    let eps_hat = denoiser.predict_noise(z_t, t, cond)?;
    let abar_t = s.alpha_bar(t);
    let abar_prev = s.alpha_bar(t_prev);
    let sigma = sigma_t(cfg.eta, s, t, t_prev);
    let dir2 = 1.0 - abar_prev - sigma * sigma;
    // nonnegative for eta in [0, 1] up to rounding
    assert!(dir2 >= -1e-12, "invalid sigma: 1 - abar_prev - sigma^2 = {dir2}");
    let dir = dir2.max(0.0).sqrt();
    let (sq_t, sq_prev) = (abar_t.sqrt(), abar_prev.sqrt());
    let coef_noise = (1.0 - abar_t).sqrt();

    let mut out = z_t.zip_map(&eps_hat, |z, e| {
        let z0_hat = (z - coef_noise * e) / sq_t;
        sq_prev * z0_hat + dir * e
    })?;
    if sigma > 0.0 {
        for c in 0..out.num_channels() {
            for v in out.channel_mut(c) {
                let e: f64 = rng.sample(StandardNormal);
                *v += sigma * e;
            }
        }
    }
    Ok(out)
}

/// Overwrites known voxels of `z_hat` with a fresh draw of forward-noised
/// ground truth at level `t`; unknown voxels pass through untouched. At
/// t = 0 known voxels take the clean ground-truth values exactly.
pub fn inject_known<R: Rng>(
    z_hat: &LatentVolume,
    z0_gt: &LatentVolume,
    mask: &MaskVolume,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentVolume> {
    if !z_hat.same_geometry(z0_gt) {
        return Err(Error::ShapeMismatch(
            "inject_known: latent geometries differ".into(),
        ));
    }
    if mask.shape() != z_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mask shape {:?} does not match latent shape {:?}",
            mask.shape(),
            z_hat.shape()
        )));
    }
    if t > s.len() {
        return Err(Error::InvalidInput(format!(
            "timestep {t} outside schedule range 0..={}",
            s.len()
        )));
    }
    let mut out = z_hat.clone();
    let m = mask.data();
    if t == 0 {
        for c in 0..out.num_channels() {
            let gt = z0_gt.channel(c);
            let o = out.channel_mut(c);
            for v in 0..o.len() {
                if m[v] == 1 {
                    o[v] = gt[v];
                }
            }
        }
        return Ok(out);
    }
    let abar = s.alpha_bar(t);
    let (ca, cb) = (abar.sqrt(), (1.0 - abar).sqrt());
    for c in 0..out.num_channels() {
        let gt = z0_gt.channel(c);
        let o = out.channel_mut(c);
        for v in 0..o.len() {
            if m[v] == 1 {
                let e: f64 = rng.sample(StandardNormal);
                o[v] = ca * gt[v] + cb * e;
            }
        }
    }
    Ok(out)
}

/// Selects known voxels from `known` and the rest from `other`. Values
/// are copied, never recomputed, so known voxels are bitwise exact.
pub fn masked_composite(
    mask: &MaskVolume,
    known: &LatentVolume,
    other: &LatentVolume,
) -> Result<LatentVolume> {
    if !known.same_geometry(other) {
        return Err(Error::ShapeMismatch(
            "composite: latent geometries differ".into(),
        ));
    }
    if mask.shape() != known.shape() {
        return Err(Error::ShapeMismatch(
            "composite: mask shape does not match latents".into(),
        ));
    }
    let mut out = other.clone();
    let m = mask.data();
    for c in 0..out.num_channels() {
        let k = known.channel(c);
        let o = out.channel_mut(c);
        for v in 0..o.len() {
            if m[v] == 1 {
                o[v] = k[v];
            }
        }
    }
    Ok(out)
}

/// Output of [`repaint_inpaint`]: the final latent plus the executed
/// transition log (for plan-conformance checks and run manifests).
#[derive(Debug, Clone)]
pub struct InpaintResult {
    pub latent: LatentVolume,
    pub executed: Vec<Transition>,
}

/// Full resampling inpainting loop.
///
/// Down-transitions apply [`reverse_step`] followed by known-region
/// compositing at the new level; unit up-transitions re-noise the whole
/// latent with the one-step forward kernel. If `cfg.dilate_unknown`, the
/// unknown region is expanded by one 6-connected dilation for the
/// duration of the chain. The final output always composites against the
/// caller's mask, so known voxels equal `z0_gt` bitwise.
///
/// The chain starts from seeded standard-normal noise, except at
/// η = 0 where it starts from the marginal mean (zeros): the η = 0
/// sampler is fully deterministic and consumes no randomness when the
/// mask is empty and resampling is off.
pub fn repaint_inpaint(
    z0_gt: &LatentVolume,
    mask: &MaskVolume,
    denoiser: &dyn Denoiser,
    cond: Option<&ConditioningField>,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<InpaintResult> {
    cfg.validate()?;
    if cfg.t_sample != s.len() {
        return Err(Error::InvalidInput(format!(
            "config t_sample {} does not match schedule length {}",
            cfg.t_sample,
            s.len()
        )));
    }
    if mask.shape() != z0_gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mask shape {:?} does not match latent shape {:?}",
            mask.shape(),
            z0_gt.shape()
        )));
    }
    let plan = RePaintPlan::new(cfg.t_sample, cfg.jump_length, cfg.n_resample)?;
    let work_mask = if cfg.dilate_unknown {
        // dilate the unknown region, i.e. erode the known one
        mask.complement().dilate(1).complement()
    } else {
        mask.clone()
    };
    let inject_any = work_mask.count_set() > 0;

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut z = if cfg.eta == 0.0 {
        z0_gt.map(|_| 0.0)
    } else {
        noise_like(z0_gt, &mut rng)
    };
    let mut executed = Vec::with_capacity(plan.len());
    for &(t_from, t_to) in plan.transitions() {
        if t_to < t_from {
            z = reverse_step(&z, t_from, t_to, denoiser, cond, cfg, s, &mut rng)?;
            if inject_any {
                z = inject_known(&z, z0_gt, &work_mask, t_to, s, &mut rng)?;
            }
        } else {
            // unit re-noise step of the jump: q(z_to | z_from)
            let (ca, cb) = (s.alpha(t_to).sqrt(), s.beta(t_to).sqrt());
            for c in 0..z.num_channels() {
                for v in z.channel_mut(c) {
                    let e: f64 = rng.sample(StandardNormal);
                    *v = ca * *v + cb * e;
                }
            }
        }
        executed.push((t_from, t_to));
    }
    let latent = masked_composite(mask, z0_gt, &z)?;
    Ok(InpaintResult { latent, executed })
}
