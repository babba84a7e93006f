//! Noise predictors: the interface the sampler calls at every timestep,
//! with two implementations.
//!
//! [`GaussianOracleDenoiser`] is the closed-form optimal predictor for
//! data drawn voxelwise from a Gaussian prior z₀ ~ N(μ, s²). With the
//! forward marginal z_t = √ᾱ_t·z₀ + √(1−ᾱ_t)·ε, (z₀, z_t) are jointly
//! Gaussian, so
//!
//!   E[z₀|z_t] = (√ᾱ_t·s²·z_t + (1−ᾱ_t)·μ) / (ᾱ_t·s² + 1−ᾱ_t)
//!   ε̂        = (z_t − √ᾱ_t·E[z₀|z_t]) / √(1−ᾱ_t)
//!
//! which is the conditional expectation E[ε|z_t]. Timestep t = 0 (ᾱ = 1)
//! is rejected: there is no noise to predict.
//!
//! [`AffineDenoiser`] is a trainable conditional predictor,
//!
//! ```text
//!   ε̂[c,v] = g_t · (a·z_t[c,v] + Σ_k b_k·cond_k[v] + bias[v]),
//! ```
//!
//! with a per-timestep scalar g_t, a global input weight a, one weight per
//! conditioning channel (additive fusion), and a per-voxel bias shared
//! across channels. Its gradients are hand-derived and exactly testable
//! against finite differences, and the per-timestep scalar makes the
//! point-mass-prior optimum z_t/√(1−ᾱ_t) representable.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::LatentVolume;
use crate::condition::{ConditioningField, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::volume::Shape3;

/// A deterministic noise predictor ε̂(z_t, t, c).
pub trait Denoiser {
    /// Predicts the noise component of `z_t` at timestep `t` (1-based).
    /// Output geometry equals input geometry.
    fn predict_noise(
        &self,
        z_t: &LatentVolume,
        t: usize,
        cond: Option<&ConditioningField>,
    ) -> Result<LatentVolume>;
}

/// Voxelwise-independent Gaussian data model N(mean, variance).
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: LatentVolume,
    variance: LatentVolume,
}

impl GaussianPrior {
    pub fn new(mean: LatentVolume, variance: LatentVolume) -> Result<Self> {
        if !mean.same_geometry(&variance) {
            return Err(Error::ShapeMismatch(
                "prior mean and variance geometry differ".into(),
            ));
        }
        for ch in variance.channels() {
            if let Some(&v) = ch.iter().find(|&&v| v.is_nan() || v <= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "prior variance must be strictly positive, found {v}"
                )));
            }
        }
        Ok(Self { mean, variance })
    }

    /// Prior with the same scalar mean and variance at every voxel.
    pub fn uniform(num_channels: usize, shape: Shape3, mean: f64, variance: f64) -> Result<Self> {
        Self::new(
            LatentVolume::zeros(num_channels, shape).map(|_| mean),
            LatentVolume::zeros(num_channels, shape).map(|_| variance),
        )
    }

    pub fn mean(&self) -> &LatentVolume {
        &self.mean
    }

    pub fn variance(&self) -> &LatentVolume {
        &self.variance
    }
}

/// Posterior-optimal noise predictor for a [`GaussianPrior`].
/// Ignores conditioning.
#[derive(Debug, Clone)]
pub struct GaussianOracleDenoiser {
    prior: GaussianPrior,
    schedule: NoiseSchedule,
}

impl GaussianOracleDenoiser {
    pub fn new(prior: GaussianPrior, schedule: NoiseSchedule) -> Self {
        Self { prior, schedule }
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }
}

impl Denoiser for GaussianOracleDenoiser {
    fn predict_noise(
        &self,
        z_t: &LatentVolume,
        t: usize,
        _cond: Option<&ConditioningField>,
    ) -> Result<LatentVolume> {
        if t == 0 || t > self.schedule.len() {
            return Err(Error::InvalidInput(format!(
                "timestep {t} outside schedule range 1..={}",
                self.schedule.len()
            )));
        }
        if !z_t.same_geometry(self.prior.mean()) {
            return Err(Error::ShapeMismatch(
                "latent geometry does not match the prior".into(),
            ));
        }
        let abar = self.schedule.alpha_bar(t);
        if abar >= 1.0 {
            return Err(Error::Numeric(format!(
                "alpha_bar({t}) = {abar}; noise prediction is undefined at alpha_bar = 1"
            )));
        }
        let sqrt_abar = abar.sqrt();
        let one_minus = 1.0 - abar;
        let sqrt_one_minus = one_minus.sqrt();
        let mut out = z_t.clone();
        for c in 0..z_t.num_channels() {
            let m = self.prior.mean().channel(c);
            let s2 = self.prior.variance().channel(c);
            let z = z_t.channel(c);
            let o = out.channel_mut(c);
            for v in 0..z.len() {
                let denom = abar * s2[v] + one_minus;
                let post_mean = (sqrt_abar * s2[v] * z[v] + one_minus * m[v]) / denom;
                o[v] = (z[v] - sqrt_abar * post_mean) / sqrt_one_minus;
            }
        }
        Ok(out)
    }
}

/// Trainable affine conditional noise predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineDenoiser {
    /// Global weight on the noisy latent.
    pub weight_z: f64,
    /// One weight per conditioning channel (additive fusion).
    pub weight_c: [f64; NUM_CHANNELS],
    /// Per-voxel bias shared across latent channels.
    pub bias: Vec<f64>,
    /// Per-timestep scalar g_t, indexed t−1.
    pub time_scale: Vec<f64>,
    /// Latent grid the bias field lives on.
    pub latent_shape: Shape3,
}

impl AffineDenoiser {
    /// Fresh parameters: g_t = 1 everywhere, all weights and biases zero.
    /// (A zero g would kill every gradient at the first step.)
    pub fn init(latent_shape: Shape3, t_steps: usize) -> Self {
        let voxels = latent_shape.0 * latent_shape.1 * latent_shape.2;
        Self {
            weight_z: 0.0,
            weight_c: [0.0; NUM_CHANNELS],
            bias: vec![0.0; voxels],
            time_scale: vec![1.0; t_steps],
            latent_shape,
        }
    }

    pub fn t_steps(&self) -> usize {
        self.time_scale.len()
    }

    fn validate(&self) -> Result<()> {
        let voxels = self.latent_shape.0 * self.latent_shape.1 * self.latent_shape.2;
        if self.bias.len() != voxels {
            return Err(Error::InvalidInput(format!(
                "bias length {} does not match latent shape {:?}",
                self.bias.len(),
                self.latent_shape
            )));
        }
        let finite = self.weight_z.is_finite()
            && self.weight_c.iter().all(|w| w.is_finite())
            && self.bias.iter().all(|b| b.is_finite())
            && self.time_scale.iter().all(|g| g.is_finite());
        if !finite {
            return Err(Error::Numeric("non-finite denoiser parameters".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Format(format!("parameter encode: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let d: AffineDenoiser = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("malformed parameter file: {e}")))?;
        d.validate()?;
        Ok(d)
    }

    fn check_inputs(
        &self,
        z_t: &LatentVolume,
        t: usize,
        cond: Option<&ConditioningField>,
    ) -> Result<()> {
        self.validate()?;
        if z_t.shape() != self.latent_shape {
            return Err(Error::ShapeMismatch(format!(
                "latent shape {:?} does not match denoiser shape {:?}",
                z_t.shape(),
                self.latent_shape
            )));
        }
        if t == 0 || t > self.time_scale.len() {
            return Err(Error::InvalidInput(format!(
                "timestep {t} outside range 1..={}",
                self.time_scale.len()
            )));
        }
        if let Some(c) = cond {
            if c.latent_shape() != self.latent_shape {
                return Err(Error::ShapeMismatch(format!(
                    "conditioning shape {:?} does not match denoiser shape {:?}",
                    c.latent_shape(),
                    self.latent_shape
                )));
            }
        }
        Ok(())
    }

    /// The per-voxel drive h[v] = Σ_k b_k·cond_k[v] + bias[v].
    fn drive(&self, cond: Option<&ConditioningField>) -> Vec<f64> {
        let mut h = self.bias.clone();
        if let Some(c) = cond {
            for (k, weight) in self.weight_c.iter().enumerate() {
                if *weight != 0.0 {
                    for (hv, &cv) in h.iter_mut().zip(c.channel(k).data()) {
                        *hv += weight * cv;
                    }
                }
            }
        }
        h
    }
}

impl Denoiser for AffineDenoiser {
    fn predict_noise(
        &self,
        z_t: &LatentVolume,
        t: usize,
        cond: Option<&ConditioningField>,
    ) -> Result<LatentVolume> {
        self.check_inputs(z_t, t, cond)?;
        let g = self.time_scale[t - 1];
        let h = self.drive(cond);
        let mut out = z_t.clone();
        for c in 0..z_t.num_channels() {
            let z = z_t.channel(c);
            let o = out.channel_mut(c);
            for v in 0..z.len() {
                o[v] = g * (self.weight_z * z[v] + h[v]);
            }
        }
        Ok(out)
    }
}

/// Gradient of the squared-error objective with respect to every
/// [`AffineDenoiser`] parameter. `time_scale` is full length; only the
/// probed timestep's entry is nonzero.
#[derive(Debug, Clone)]
pub struct AffineGradients {
    pub weight_z: f64,
    pub weight_c: [f64; NUM_CHANNELS],
    pub bias: Vec<f64>,
    pub time_scale: Vec<f64>,
}

/// The per-example objective: mean over all latent scalars of the
/// squared prediction error `(eps_hat - eps)^2`.
pub fn affine_loss(
    d: &AffineDenoiser,
    z_t: &LatentVolume,
    t: usize,
    cond: Option<&ConditioningField>,
    eps: &LatentVolume,
) -> Result<f64> {
    Ok(forward_backward(d, z_t, t, cond, eps, false)?.0)
}

/// The objective and its hand-derived gradients at one example.
pub fn affine_loss_gradients(
    d: &AffineDenoiser,
    z_t: &LatentVolume,
    t: usize,
    cond: Option<&ConditioningField>,
    eps: &LatentVolume,
) -> Result<(f64, AffineGradients)> {
    let (loss, grads) = forward_backward(d, z_t, t, cond, eps, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn forward_backward(
    d: &AffineDenoiser,
    z_t: &LatentVolume,
    t: usize,
    cond: Option<&ConditioningField>,
    eps: &LatentVolume,
    want_grads: bool,
) -> Result<(f64, Option<AffineGradients>)> {
    d.check_inputs(z_t, t, cond)?;
    if !z_t.same_geometry(eps) {
        return Err(Error::ShapeMismatch("z_t and eps geometry differ".into()));
    }
    let g = d.time_scale[t - 1];
    let h = d.drive(cond);
    let n = z_t.total_len() as f64;
    let voxels = z_t.voxels_per_channel();

    let mut loss = 0.0;
    let mut grad_g = 0.0;
    let mut grad_a = 0.0;
    let mut grad_bias = vec![0.0; voxels];
    for c in 0..z_t.num_channels() {
        let z = z_t.channel(c);
        let e = eps.channel(c);
        for v in 0..voxels {
            let affine = d.weight_z * z[v] + h[v];
            let r = g * affine - e[v];
            loss += r * r;
            if want_grads {
                grad_g += 2.0 * r * affine;
                grad_a += 2.0 * r * g * z[v];
                grad_bias[v] += 2.0 * r * g;
            }
        }
    }
    loss /= n;
    if !want_grads {
        return Ok((loss, None));
    }
    grad_g /= n;
    grad_a /= n;
    for b in &mut grad_bias {
        *b /= n;
    }
    // conditioning-weight gradients reuse the per-voxel bias gradient:
    // dL/db_k = Σ_v (dL/dbias[v]) · cond_k[v]
    let mut grad_c = [0.0; NUM_CHANNELS];
    if let Some(cf) = cond {
        for (k, gc) in grad_c.iter_mut().enumerate() {
            *gc = grad_bias
                .iter()
                .zip(cf.channel(k).data())
                .map(|(gb, &cv)| gb * cv)
                .sum();
        }
    }
    let mut grad_time = vec![0.0; d.time_scale.len()];
    grad_time[t - 1] = grad_g;
    Ok((
        loss,
        Some(AffineGradients {
            weight_z: grad_a,
            weight_c: grad_c,
            bias: grad_bias,
            time_scale: grad_time,
        }),
    ))
}

/// One training example: a clean latent with optional conditioning.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub latent: LatentVolume,
    pub condition: Option<ConditioningField>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Per-step loss traces from a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Objective value at each step (before the update).
    pub losses: Vec<f64>,
    /// ‖ε‖²/N on the same draws: the loss a predictor of all zeros
    /// would have paid.
    pub zero_predictor_losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss and mean zero-predictor loss over the final 10% of steps.
    pub fn final_window(&self) -> (f64, f64) {
        let n = self.losses.len();
        let w = (n / 10).max(1).min(n);
        let mean = |xs: &[f64]| xs[n - w..].iter().sum::<f64>() / w as f64;
        (mean(&self.losses), mean(&self.zero_predictor_losses))
    }
}

/// Stochastic gradient descent on E‖ε̂(z_t, t, c) − ε‖² with z_t drawn
/// from the forward marginal at a uniformly random timestep. One example
/// per step; deterministic for a fixed seed.
pub fn train_affine_denoiser(
    dataset: &[TrainSample],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(AffineDenoiser, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    let shape = dataset[0].latent.shape();
    for (i, s) in dataset.iter().enumerate() {
        if !s.latent.same_geometry(&dataset[0].latent) {
            return Err(Error::ShapeMismatch(format!(
                "dataset item {i} latent geometry differs from item 0"
            )));
        }
        if let Some(c) = &s.condition {
            if c.latent_shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "dataset item {i} conditioning shape differs from its latent"
                )));
            }
        }
    }

    let mut d = AffineDenoiser::init(shape, schedule.len());
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut zero_losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let sample = &dataset[rng.random_range(0..dataset.len())];
        let t = rng.random_range(1..=schedule.len());
        let eps = gaussian_like(&sample.latent, &mut rng);
        let z_t = marginal(&sample.latent, t, &eps, schedule)?;
        let cond = sample.condition.as_ref();

        let (loss, grads) = affine_loss_gradients(&d, &z_t, t, cond, &eps)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: loss = {loss} \
                 (weight_z = {}, g_t = {})",
                d.weight_z,
                d.time_scale[t - 1]
            )));
        }
        losses.push(loss);
        zero_losses.push(eps.dot(&eps)? / eps.total_len() as f64);

        let lr = cfg.learning_rate;
        d.weight_z -= lr * grads.weight_z;
        for (w, gw) in d.weight_c.iter_mut().zip(&grads.weight_c) {
            *w -= lr * gw;
        }
        for (b, gb) in d.bias.iter_mut().zip(&grads.bias) {
            *b -= lr * gb;
        }
        d.time_scale[t - 1] -= lr * grads.time_scale[t - 1];
    }

    Ok((
        d,
        TrainReport {
            losses,
            zero_predictor_losses: zero_losses,
        },
    ))
}

/// Standard-normal latent with the geometry of `like`. Draws are
/// channel-major then voxel-major, so the stream layout is stable.
fn gaussian_like<R: Rng>(like: &LatentVolume, rng: &mut R) -> LatentVolume {
    let mut out = like.clone();
    for c in 0..out.num_channels() {
        for v in out.channel_mut(c) {
            *v = rng.sample(StandardNormal);
        }
    }
    out
}

/// Forward marginal √ᾱ_t·z₀ + √(1−ᾱ_t)·ε (Eq. 1 draw used in training).
fn marginal(
    z0: &LatentVolume,
    t: usize,
    eps: &LatentVolume,
    s: &NoiseSchedule,
) -> Result<LatentVolume> {
    let abar = s.alpha_bar(t);
    let (ca, cb) = (abar.sqrt(), (1.0 - abar).sqrt());
    z0.zip_map(eps, |z, e| ca * z + cb * e)
}
