//! Discrete noise schedule, the deterministic DDIM update, and the
//! closed-form loop-free coefficients.
//!
//! The cumulative signal coefficient `alpha_bar[t]` is the product of
//! `(1 - beta_s)` for `s <= t`. A DDIM step from index `t` to a less
//! noisy target computes
//!
//! ```text
//! z_prev = sqrt(ab_prev / ab_t) * z_t
//!        + sqrt(ab_prev) * (sqrt(1/ab_prev - 1) - sqrt(1/ab_t - 1)) * eps
//! ```
//!
//! Iterating that update over a decreasing timestep list telescopes into
//! `z_final = S * z_init + sum_t E_t * eps_t`, which is what
//! [`loopfree_coeffs`] precomputes. All coefficients are derived in
//! `f64` and narrowed at use: the `E_t` suffix products amplify rounding
//! across steps.

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Functional form of the beta ramp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    /// Betas evenly spaced between start and end.
    Linear,
    /// Square roots of betas evenly spaced (the Stable-Diffusion ramp).
    ScaledLinear,
}

/// Timestep spacing policy for sub-sampled sampling runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSpacing {
    /// `round(i * T / K) - 1` for `i = K..1`; never wastes a step at
    /// near-zero noise.
    Trailing,
}

/// Either a concrete schedule index or the terminal target after the
/// final step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepTarget {
    Step(usize),
    Terminal,
}

/// Construction parameters of a [`NoiseSchedule`], kept for checkpoint
/// headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: BetaSchedule,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        // The convention of the teacher family this lab distills.
        Self { steps: 1000, beta_start: 8.5e-4, beta_end: 1.2e-2, kind: BetaSchedule::ScaledLinear }
    }
}

/// Per-timestep cumulative signal coefficients over `T` discrete steps.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    alpha_bar_final: f64,
}

impl NoiseSchedule {
    /// Builds the schedule; `alpha_bars` is the running product of
    /// `(1 - beta)`, and the terminal target coefficient is `1 - beta_0`.
    pub fn build(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams { steps, beta_start, beta_end, kind } = params;
        if steps < 1 {
            return Err(Error::InvalidRange { detail: format!("T must be >= 1, got {steps}") });
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange {
                detail: format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
            });
        }
        let betas: Vec<f64> = match kind {
            BetaSchedule::Linear => linspace(beta_start, beta_end, steps),
            BetaSchedule::ScaledLinear => linspace(beta_start.sqrt(), beta_end.sqrt(), steps)
                .into_iter()
                .map(|b| b * b)
                .collect(),
        };
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        let alpha_bar_final = 1.0 - betas[0];
        Ok(Self { params, betas, alpha_bars, alpha_bar_final })
    }

    pub fn with_default_params() -> Self {
        Self::build(ScheduleParams::default()).expect("default schedule params are valid")
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    /// Step count `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Cumulative signal coefficient at a step or the terminal target.
    pub fn alpha_bar(&self, target: StepTarget) -> Result<f64> {
        match target {
            StepTarget::Step(t) => self.alpha_bars.get(t).copied().ok_or_else(|| {
                Error::InvalidTimestep {
                    detail: format!("index {t} out of range for T = {}", self.len()),
                }
            }),
            StepTarget::Terminal => Ok(self.alpha_bar_final),
        }
    }

    pub fn alpha_bar_final(&self) -> f64 {
        self.alpha_bar_final
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Coefficients of one DDIM step from `t` towards `t_prev`, computed in
/// `f64`: `(signal, noise)` with `z_prev = signal * z + noise * eps`.
pub fn ddim_coeffs(sched: &NoiseSchedule, t: usize, t_prev: StepTarget) -> Result<(f64, f64)> {
    let ab_t = sched.alpha_bar(StepTarget::Step(t))?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    if ab_prev < ab_t {
        return Err(Error::InvalidTimestep {
            detail: format!(
                "target must be less noisy: alpha_bar(prev) = {ab_prev} < alpha_bar(t) = {ab_t}"
            ),
        });
    }
    let signal = (ab_prev / ab_t).sqrt();
    let noise = ab_prev.sqrt() * ((1.0 / ab_prev - 1.0).sqrt() - (1.0 / ab_t - 1.0).sqrt());
    Ok((signal, noise))
}

/// One deterministic DDIM update.
pub fn ddim_step<S: Scalar>(
    z_t: &Tensor<S>,
    eps: &Tensor<S>,
    t: usize,
    t_prev: StepTarget,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    if z_t.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "ddim_step",
            detail: format!("{:?} vs {:?}", z_t.shape(), eps.shape()),
        });
    }
    let (signal, noise) = ddim_coeffs(sched, t, t_prev)?;
    let (cs, cn) = (S::from_f64(signal), S::from_f64(noise));
    let data: Vec<S> =
        z_t.data().iter().zip(eps.data()).map(|(&z, &e)| cs * z + cn * e).collect();
    Tensor::from_vec(z_t.shape(), data)
}

/// Decreasing schedule indices for a `K`-step run plus the terminal
/// target.
pub fn select_timesteps(
    k: usize,
    t_total: usize,
    _spacing: TimestepSpacing,
) -> Result<(Vec<usize>, StepTarget)> {
    if k < 1 || k > t_total {
        return Err(Error::InvalidK { k, t: t_total });
    }
    let mut steps = Vec::with_capacity(k);
    for i in (1..=k).rev() {
        let idx = (i as f64 * t_total as f64 / k as f64).round() as usize - 1;
        steps.push(idx);
    }
    debug_assert!(steps.windows(2).all(|w| w[0] > w[1]));
    Ok((steps, StepTarget::Terminal))
}

/// Precomputed loop-free combination: `K` decoder timesteps, the scalar
/// `S` applied to the initial noise, and per-step scalars `E`
/// (aligned with `timesteps`, so `e[0]` pairs with the earliest, most
/// noisy decoder step).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerPlan {
    pub timesteps: Vec<usize>,
    pub terminal: StepTarget,
    pub s: f64,
    pub e: Vec<f64>,
}

impl SamplerPlan {
    pub fn k(&self) -> usize {
        self.timesteps.len()
    }

    /// The key step: the schedule index the shared encoder runs at.
    pub fn key_step(&self) -> usize {
        self.timesteps[0]
    }
}

/// Folds the chain of DDIM updates over `timesteps` into closed-form
/// coefficients. `e[i]` carries the product of every signal factor
/// applied after step `i`; the final step contributes its noise
/// coefficient unscaled.
pub fn loopfree_coeffs(
    timesteps: &[usize],
    terminal: StepTarget,
    sched: &NoiseSchedule,
) -> Result<SamplerPlan> {
    if timesteps.is_empty() {
        return Err(Error::InvalidPlan { detail: "empty timestep list".into() });
    }
    if !timesteps.windows(2).all(|w| w[0] > w[1]) {
        return Err(Error::InvalidPlan {
            detail: format!("timesteps must be strictly decreasing, got {timesteps:?}"),
        });
    }
    let k = timesteps.len();
    let mut signals = Vec::with_capacity(k);
    let mut noises = Vec::with_capacity(k);
    for i in 0..k {
        let next = if i + 1 < k { StepTarget::Step(timesteps[i + 1]) } else { terminal };
        let (cs, cn) = ddim_coeffs(sched, timesteps[i], next)?;
        signals.push(cs);
        noises.push(cn);
    }
    let mut e = vec![0.0; k];
    let mut suffix = 1.0;
    for i in (0..k).rev() {
        e[i] = noises[i] * suffix;
        suffix *= signals[i];
    }
    let s = (sched.alpha_bar(terminal)? / sched.alpha_bar(StepTarget::Step(timesteps[0]))?).sqrt();
    Ok(SamplerPlan { timesteps: timesteps.to_vec(), terminal, s, e })
}

/// Applies a plan to an initial noise tensor and the per-step noise
/// predictions, in the fixed order `S * eps` then `E_K .. E_1`.
pub fn apply_plan<S: Scalar>(
    plan: &SamplerPlan,
    init_noise: &Tensor<S>,
    eps_preds: &[Tensor<S>],
) -> Result<Tensor<S>> {
    if eps_preds.len() != plan.k() {
        return Err(Error::InvalidPlan {
            detail: format!("{} noise predictions for K = {}", eps_preds.len(), plan.k()),
        });
    }
    let cs = S::from_f64(plan.s);
    let mut acc: Vec<S> = init_noise.data().iter().map(|&z| cs * z).collect();
    for (coef, eps) in plan.e.iter().zip(eps_preds) {
        if eps.shape() != init_noise.shape() {
            return Err(Error::ShapeMismatch {
                op: "apply_plan",
                detail: format!("{:?} vs {:?}", eps.shape(), init_noise.shape()),
            });
        }
        let c = S::from_f64(*coef);
        for (a, &v) in acc.iter_mut().zip(eps.data()) {
            *a = *a + c * v;
        }
    }
    Tensor::from_vec(init_noise.shape(), acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(steps: usize, b0: f64, b1: f64, kind: BetaSchedule) -> NoiseSchedule {
        NoiseSchedule::build(ScheduleParams { steps, beta_start: b0, beta_end: b1, kind }).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = sched(1, 0.1, 0.1, BetaSchedule::Linear);
        assert_eq!(s.alpha_bars(), &[0.9]);
        assert_eq!(s.alpha_bar_final(), 0.9);
    }

    #[test]
    fn constant_beta_products() {
        let s = sched(3, 0.5, 0.5, BetaSchedule::Linear);
        assert_eq!(s.alpha_bars(), &[0.5, 0.25, 0.125]);
    }

    #[test]
    fn default_like_schedule_monotone() {
        let s = sched(1000, 1e-4, 0.02, BetaSchedule::Linear);
        assert!((s.alpha_bars()[0] - 0.9999).abs() < 1e-12);
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
        assert!(s.alpha_bars().iter().all(|&a| 0.0 < a && a < 1.0));
    }

    #[test]
    fn scaled_linear_sqrt_spacing() {
        let s = sched(3, 0.01, 0.09, BetaSchedule::ScaledLinear);
        // sqrt(betas) evenly spaced: 0.1, 0.2, 0.3
        assert!((s.betas()[0] - 0.01).abs() < 1e-15);
        assert!((s.betas()[1] - 0.04).abs() < 1e-15);
        assert!((s.betas()[2] - 0.09).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::build(ScheduleParams {
            steps: 0,
            ..ScheduleParams::default()
        })
        .is_err());
        assert!(NoiseSchedule::build(ScheduleParams {
            steps: 10,
            beta_start: 0.2,
            beta_end: 0.1,
            kind: BetaSchedule::Linear,
        })
        .is_err());
        assert!(NoiseSchedule::build(ScheduleParams {
            steps: 10,
            beta_start: 0.0,
            beta_end: 0.1,
            kind: BetaSchedule::Linear,
        })
        .is_err());
    }

    #[test]
    fn ddim_identity_when_alpha_bars_equal() {
        // Constant schedule: every index has the same alpha_bar.
        let s = sched(4, 0.3, 0.3, BetaSchedule::Linear);
        let z = Tensor::<f32>::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let eps = Tensor::<f32>::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        // alpha_bars decrease here, so use equal indices via Step(t) == Step(t).
        let out = ddim_step(&z, &eps, 2, StepTarget::Step(2), &s).unwrap();
        assert!(out.bit_eq(&z));
    }

    #[test]
    fn ddim_hand_values() {
        // alpha_bar(t) = 0.25, terminal 1.0 unavailable from products, so
        // check the formula through ddim_coeffs on a crafted schedule:
        // betas = [0.5, 0.5] -> alpha_bars = [0.5, 0.25], final = 0.5.
        let s = sched(2, 0.5, 0.5, BetaSchedule::Linear);
        // eps = 0: output = sqrt(ab_prev/ab_t) * z
        let z = Tensor::<f64>::scalar(1.0);
        let eps = Tensor::<f64>::scalar(0.0);
        let out = ddim_step(&z, &eps, 1, StepTarget::Step(0), &s).unwrap();
        assert!((out.item().unwrap() - (0.5f64 / 0.25).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ddim_scalar_example() {
        // ab_t = 0.25, ab_prev = 0.64, z = 1, eps = 1:
        // 1.6 + 0.8 * (sqrt(0.5625) - sqrt(3))
        let s = sched(2, 0.36, 0.609375, BetaSchedule::Linear);
        assert!((s.alpha_bars()[0] - 0.64).abs() < 1e-12);
        assert!((s.alpha_bars()[1] - 0.25).abs() < 1e-12);
        let z = Tensor::<f64>::scalar(1.0);
        let eps = Tensor::<f64>::scalar(1.0);
        let out = ddim_step(&z, &eps, 1, StepTarget::Step(0), &s).unwrap();
        let expect = 1.6 + 0.8 * (0.5625f64.sqrt() - 3f64.sqrt());
        assert!((out.item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ddim_rejects_noisier_target() {
        let s = sched(3, 0.1, 0.3, BetaSchedule::Linear);
        let z = Tensor::<f32>::scalar(1.0);
        let eps = Tensor::<f32>::scalar(0.0);
        assert!(ddim_step(&z, &eps, 0, StepTarget::Step(2), &s).is_err());
    }

    #[test]
    fn trailing_timesteps() {
        let (steps, term) = select_timesteps(4, 1000, TimestepSpacing::Trailing).unwrap();
        assert_eq!(steps, vec![999, 749, 499, 249]);
        assert_eq!(term, StepTarget::Terminal);
        let (one, _) = select_timesteps(1, 1000, TimestepSpacing::Trailing).unwrap();
        assert_eq!(one, vec![999]);
        let (all, _) = select_timesteps(7, 7, TimestepSpacing::Trailing).unwrap();
        assert_eq!(all, vec![6, 5, 4, 3, 2, 1, 0]);
        assert!(select_timesteps(0, 10, TimestepSpacing::Trailing).is_err());
        assert!(select_timesteps(11, 10, TimestepSpacing::Trailing).is_err());
    }

    #[test]
    fn k1_plan_matches_single_ddim_step() {
        let s = NoiseSchedule::with_default_params();
        let plan = loopfree_coeffs(&[999], StepTarget::Terminal, &s).unwrap();
        let z = Tensor::<f64>::from_vec(&[4], vec![0.3, -0.7, 1.2, 0.0]).unwrap();
        let eps = Tensor::<f64>::from_vec(&[4], vec![-0.1, 0.4, 0.9, -1.3]).unwrap();
        let closed = apply_plan(&plan, &z, &[eps.clone()]).unwrap();
        let direct = ddim_step(&z, &eps, 999, StepTarget::Terminal, &s).unwrap();
        assert!(closed.bit_eq(&direct));
    }

    #[test]
    fn constant_schedule_kills_noise_terms() {
        let s = sched(8, 0.2, 0.2, BetaSchedule::Linear);
        // Equal alpha_bars are impossible from a real product chain, so
        // emulate by stepping between identical indices is not allowed;
        // instead check the algebra directly through ddim_coeffs.
        let (cs, cn) = ddim_coeffs(&s, 3, StepTarget::Step(3)).unwrap();
        assert_eq!(cs, 1.0);
        assert_eq!(cn, 0.0);
    }

    #[test]
    fn telescoping_matches_sequential_iteration() {
        let s = NoiseSchedule::with_default_params();
        let (ts, term) = select_timesteps(4, s.len(), TimestepSpacing::Trailing).unwrap();
        let plan = loopfree_coeffs(&ts, term, &s).unwrap();
        let z0 = Tensor::<f64>::from_vec(&[5], vec![0.1, -0.5, 0.9, 1.7, -2.1]).unwrap();
        let preds: Vec<Tensor<f64>> = (0..4)
            .map(|i| {
                Tensor::from_vec(&[5], (0..5).map(|j| ((i * 7 + j) as f64).sin()).collect())
                    .unwrap()
            })
            .collect();
        let closed = apply_plan(&plan, &z0, &preds).unwrap();
        let mut z = z0.clone();
        for i in 0..4 {
            let next = if i + 1 < 4 { StepTarget::Step(ts[i + 1]) } else { term };
            z = ddim_step(&z, &preds[i], ts[i], next, &s).unwrap();
        }
        assert!(closed.max_rel_diff(&z) < 1e-12);
    }

    #[test]
    fn ddim_step_linear_in_inputs() {
        let s = NoiseSchedule::with_default_params();
        let z = Tensor::<f64>::from_vec(&[3], vec![0.2, -0.4, 1.0]).unwrap();
        let eps = Tensor::<f64>::from_vec(&[3], vec![0.7, 0.1, -0.9]).unwrap();
        let a = 3.5f64;
        let za = z.map(|v| v * a);
        let ea = eps.map(|v| v * a);
        let lhs = ddim_step(&za, &ea, 500, StepTarget::Step(250), &s).unwrap();
        let rhs = ddim_step(&z, &eps, 500, StepTarget::Step(250), &s).unwrap().map(|v| v * a);
        assert!(lhs.max_rel_diff(&rhs) < 1e-12);
    }
}
