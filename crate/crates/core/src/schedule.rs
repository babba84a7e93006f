//! Noise-schedule tables and the resampling timestep plan.
//!
//! A [`NoiseSchedule`] holds the β_t, α_t = 1−β_t, and ᾱ_t = ∏α_s tables
//! for T diffusion steps, with the convention ᾱ_0 ≡ 1 so that t = 0 is the
//! clean-data state. Timesteps are 1-based everywhere in this crate.
//!
//! A [`RePaintPlan`] is the ordered list of timestep transitions executed
//! by the inpainting sampler: unit down-steps (denoise) interleaved with
//! re-noising excursions of `jump_length` unit up-steps, each repeated
//! `n_resample − 1` extra times at every jump boundary.

use crate::error::{Error, Result};

/// β/α/ᾱ tables for a diffusion process over `len()` timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// 1-based timesteps of the schedule this one was derived from.
    /// Equal to 1..=T for a freshly built schedule.
    source_timesteps: Vec<usize>,
}

impl NoiseSchedule {
    /// Linear β schedule with inclusive endpoints: β_1 = `beta_start`,
    /// β_T = `beta_end`.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::InvalidInput("schedule needs at least 1 step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidInput(format!(
                "beta bounds must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = if t_steps == 1 {
            vec![beta_start]
        } else {
            (0..t_steps)
                .map(|i| {
                    // endpoints exact by construction
                    if i == t_steps - 1 {
                        beta_end
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
                    }
                })
                .collect()
        };
        Ok(Self::from_betas(betas, (1..=t_steps).collect()))
    }

    fn from_betas(betas: Vec<f64>, source_timesteps: Vec<usize>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
            source_timesteps,
        }
    }

    /// Respaced schedule: ᾱ values are copied verbatim so the selected
    /// entries stay a bitwise subsequence of the parent table; β and α
    /// are re-derived from the ᾱ ratios.
    fn from_alpha_bars(alpha_bars: Vec<f64>, source_timesteps: Vec<usize>) -> Self {
        let mut betas = Vec::with_capacity(alpha_bars.len());
        let mut alphas = Vec::with_capacity(alpha_bars.len());
        let mut prev = 1.0;
        for &bar in &alpha_bars {
            let beta = 1.0 - bar / prev;
            betas.push(beta);
            alphas.push(1.0 - beta);
            prev = bar;
        }
        Self {
            betas,
            alphas,
            alpha_bars,
            source_timesteps,
        }
    }

    /// Number of timesteps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// α_t = 1 − β_t for t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t for t in 0..=T, with ᾱ_0 ≡ 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// The 1-based timestep of the parent schedule behind index `t`.
    pub fn source_timestep(&self, t: usize) -> usize {
        self.source_timesteps[t - 1]
    }

    /// Shortens the schedule to `t_sample` evenly spaced timesteps,
    /// preserving ᾱ at the selected original timesteps (respacing). The
    /// selected timesteps are t_i = ⌊i·T/T_sample⌋ for i = 1..=T_sample,
    /// so the final original timestep is always kept. β is re-derived from
    /// the ᾱ ratios so the recurrence ᾱ_i = ᾱ_{i−1}(1 − β_i) still holds.
    pub fn subsample(&self, t_sample: usize) -> Result<NoiseSchedule> {
        if t_sample == 0 || t_sample > self.len() {
            return Err(Error::InvalidInput(format!(
                "subsample count {} must be in 1..={}",
                t_sample,
                self.len()
            )));
        }
        if t_sample == self.len() {
            return Ok(self.clone());
        }
        let t = self.len();
        let mut alpha_bars = Vec::with_capacity(t_sample);
        let mut source = Vec::with_capacity(t_sample);
        for i in 1..=t_sample {
            let orig_t = i * t / t_sample;
            alpha_bars.push(self.alpha_bar(orig_t));
            source.push(self.source_timestep(orig_t));
        }
        Ok(NoiseSchedule::from_alpha_bars(alpha_bars, source))
    }
}

/// One timestep transition: down (`to < from`, a denoising step) or up
/// (`to > from`, a unit re-noising step inside a jump).
pub type Transition = (usize, usize);

/// The ordered transition sequence of the resampling sampler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RePaintPlan {
    transitions: Vec<Transition>,
    jump_length: usize,
    n_resample: usize,
}

impl RePaintPlan {
    /// Builds the plan for a chain of `t_sample` steps.
    ///
    /// Jump boundaries sit at t = 1, 1+L, 1+2L, … while t + L ≤ T_sample
    /// (L = `jump_length`). Descending through a boundary, the sampler
    /// bounces: L unit up-steps followed by L unit down-steps, repeated
    /// `n_resample − 1` times, before continuing downward. The first
    /// transition leaves T_sample and the last one lands on 0.
    pub fn new(t_sample: usize, jump_length: usize, n_resample: usize) -> Result<Self> {
        if t_sample == 0 || jump_length == 0 || n_resample == 0 {
            return Err(Error::InvalidInput(
                "plan parameters must be positive".into(),
            ));
        }
        if jump_length > t_sample {
            return Err(Error::InvalidInput(format!(
                "jump_length {jump_length} exceeds T_sample {t_sample}"
            )));
        }
        let mut boundaries = Vec::new();
        let mut p = 1;
        while p + jump_length <= t_sample {
            boundaries.push(p);
            p += jump_length;
        }
        boundaries.reverse();

        let mut states = vec![t_sample];
        let descend = |states: &mut Vec<usize>, from: usize, to: usize| {
            for s in (to..from).rev() {
                states.push(s);
            }
        };
        let mut cur = t_sample;
        for b in boundaries {
            descend(&mut states, cur, b);
            for _ in 1..n_resample {
                for s in b + 1..=b + jump_length {
                    states.push(s);
                }
                descend(&mut states, b + jump_length, b);
            }
            cur = b;
        }
        descend(&mut states, cur, 0);

        let transitions = states.windows(2).map(|w| (w[0], w[1])).collect();
        Ok(Self {
            transitions,
            jump_length,
            n_resample,
        })
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn jump_length(&self) -> usize {
        self.jump_length
    }

    pub fn n_resample(&self) -> usize {
        self.n_resample
    }

    /// Number of denoising transitions.
    pub fn down_steps(&self) -> usize {
        self.transitions.iter().filter(|(f, t)| t < f).count()
    }

    /// Number of re-noising transitions.
    pub fn up_steps(&self) -> usize {
        self.transitions.iter().filter(|(f, t)| t > f).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_endpoints_inclusive() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        assert_eq!(s.len(), 1000);
    }

    #[test]
    fn linear_single_step() {
        let s = NoiseSchedule::linear(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
    }

    #[test]
    fn alpha_bar_product_by_hand() {
        // T=2 with betas {0.1, 0.2}: abar_2 = 0.9*0.8 = 0.72
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn invalid_beta_bounds_rejected() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 0.01).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn recurrence_holds_to_1e12() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        for t in 1..=1000 {
            let lhs = s.alpha_bar(t);
            let rhs = s.alpha_bar(t - 1) * (1.0 - s.beta(t));
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs());
        }
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::linear(500, 1e-4, 0.02).unwrap();
        for t in 1..=500 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn subsample_keeps_every_fourth_alpha_bar() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let sub = s.subsample(250).unwrap();
        assert_eq!(sub.len(), 250);
        for i in 1..=250 {
            assert_eq!(sub.source_timestep(i), 4 * i);
            assert_eq!(sub.alpha_bar(i), s.alpha_bar(4 * i));
        }
    }

    #[test]
    fn subsample_full_is_identity() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.subsample(100).unwrap(), s);
    }

    #[test]
    fn subsampled_alpha_bars_are_a_subsequence() {
        let s = NoiseSchedule::linear(97, 1e-4, 0.02).unwrap();
        let sub = s.subsample(13).unwrap();
        let originals: Vec<f64> = (1..=97).map(|t| s.alpha_bar(t)).collect();
        let mut cursor = 0;
        for i in 1..=13 {
            let target = sub.alpha_bar(i);
            let pos = originals[cursor..]
                .iter()
                .position(|&v| v == target)
                .expect("subsampled alpha_bar must appear in the original table");
            cursor += pos + 1;
        }
        // recurrence also holds on the respaced table
        for i in 1..=13 {
            let lhs = sub.alpha_bar(i);
            let rhs = sub.alpha_bar(i - 1) * (1.0 - sub.beta(i));
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs());
        }
    }

    #[test]
    fn subsample_bounds_checked() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(s.subsample(0).is_err());
        assert!(s.subsample(11).is_err());
    }

    #[test]
    fn trivial_plan_is_plain_descent() {
        let p = RePaintPlan::new(2, 1, 1).unwrap();
        assert_eq!(p.transitions(), &[(2, 1), (1, 0)]);
    }

    #[test]
    fn no_resampling_descends_for_any_jump_length() {
        let p = RePaintPlan::new(17, 5, 1).unwrap();
        let expected: Vec<Transition> = (1..=17).rev().map(|t| (t, t - 1)).collect();
        assert_eq!(p.transitions(), expected.as_slice());
    }

    #[test]
    fn plan_telescopes_to_minus_t_sample() {
        for (ts, jl, nr) in [(250, 10, 10), (10, 3, 4), (7, 7, 3), (50, 5, 30)] {
            let p = RePaintPlan::new(ts, jl, nr).unwrap();
            let net: i64 = p
                .transitions()
                .iter()
                .map(|&(f, t)| t as i64 - f as i64)
                .sum();
            assert_eq!(net, -(ts as i64));
            assert_eq!(p.down_steps() - p.up_steps(), ts);
            assert_eq!(p.transitions()[0].0, ts);
            assert_eq!(p.transitions().last().unwrap().1, 0);
            // t=0 is visited exactly once, as the final state
            let zero_visits = p.transitions().iter().filter(|&&(_, t)| t == 0).count();
            assert_eq!(zero_visits, 1);
        }
    }

    #[test]
    fn plan_transitions_are_unit_steps() {
        let p = RePaintPlan::new(40, 8, 3).unwrap();
        for &(f, t) in p.transitions() {
            assert_eq!((f as i64 - t as i64).abs(), 1);
        }
    }

    #[test]
    fn plan_parameter_validation() {
        assert!(RePaintPlan::new(0, 1, 1).is_err());
        assert!(RePaintPlan::new(10, 0, 1).is_err());
        assert!(RePaintPlan::new(10, 11, 1).is_err());
        assert!(RePaintPlan::new(10, 1, 0).is_err());
    }
}
