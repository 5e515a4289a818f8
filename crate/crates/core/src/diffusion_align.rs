//! Diffusion-based feature alignment.
//!
//! Teacher latents define a clean population; a noise predictor is trained on
//! them with the standard denoising objective. Student latents are blended
//! with noise by a learned gate, refined by a short deterministic reverse
//! (DDIM) pass, and pulled toward the teacher latent by a distillation loss.
//!
//! Network application points are injected as closures `(tape, z_t, step) ->
//! prediction` so tests can substitute exact stubs; production code passes
//! closures that bind the learned predictor and gate.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PtaError, Result};
use crate::nn::{AdapterSpec, Binder, NoisePredictorSpec};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Linear-beta noise schedule with cached cumulative signal fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    t_max: usize,
    /// `beta[i]` is the noise increment at timestep `i + 1`.
    beta: Vec<f64>,
    /// `alpha_bar[t]` for `t = 0..=t_max`; `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly interpolated betas from `beta_start` at t=1 to `beta_end` at
    /// t=T.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(PtaError::config("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(PtaError::config(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        for b in &beta {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        let s = NoiseSchedule { t_max, beta, alpha_bar };
        s.validate()?;
        Ok(s)
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Cumulative signal fraction at timestep `t` (0 ⇒ 1).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "beta index {t} out of range");
        self.beta[t - 1]
    }

    /// Checks every structural invariant, including the cumulative-product
    /// identity to 1e-12 relative.
    pub fn validate(&self) -> Result<()> {
        if self.beta.len() != self.t_max || self.alpha_bar.len() != self.t_max + 1 {
            return Err(PtaError::config("schedule length mismatch".to_string()));
        }
        if self.alpha_bar[0] != 1.0 {
            return Err(PtaError::config("signal fraction must start at 1".to_string()));
        }
        let mut prod = 1.0;
        for t in 1..=self.t_max {
            let b = self.beta[t - 1];
            if !(0.0 < b && b < 1.0) {
                return Err(PtaError::config(format!("beta out of (0,1) at t={t}")));
            }
            prod *= 1.0 - b;
            let ab = self.alpha_bar[t];
            if !(ab > 0.0 && ab <= 1.0) || ab >= self.alpha_bar[t - 1] {
                return Err(PtaError::config(format!(
                    "signal fraction must fall strictly within (0,1] at t={t}"
                )));
            }
            if (ab - prod).abs() > 1e-12 * prod.max(f64::MIN_POSITIVE) {
                return Err(PtaError::config(format!(
                    "cumulative product broken at t={t}: {ab} vs {prod}"
                )));
            }
        }
        Ok(())
    }
}

/// Descending timestep ladder for the deterministic reverse pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdimPlan {
    pub n_steps: usize,
    /// `[T, T-delta, ..., delta]`; the step after the last lands on 0.
    pub timesteps: Vec<usize>,
}

impl DdimPlan {
    pub fn new(t_max: usize, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(PtaError::config("reverse pass needs at least one step"));
        }
        if t_max % n_steps != 0 {
            return Err(PtaError::config(format!(
                "step count {n_steps} must divide the schedule length {t_max}"
            )));
        }
        let delta = t_max / n_steps;
        let timesteps: Vec<usize> = (1..=n_steps).rev().map(|i| i * delta).collect();
        Ok(DdimPlan { n_steps, timesteps })
    }

    pub fn delta(&self) -> usize {
        self.timesteps.last().copied().unwrap_or(0)
    }

    fn check_against(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.timesteps.first() != Some(&schedule.t_max()) {
            return Err(PtaError::config(format!(
                "plan starts at {:?} but schedule ends at {}",
                self.timesteps.first(),
                schedule.t_max()
            )));
        }
        if self.timesteps.len() != self.n_steps || self.delta() * self.n_steps != schedule.t_max() {
            return Err(PtaError::config("plan is inconsistent with the schedule".to_string()));
        }
        Ok(())
    }
}

/// One diffusion training draw: a uniformly sampled timestep and its noise.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionDraw {
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Uniform timestep in `1..=T` plus standard-normal noise, one per item.
pub fn sample_diffusion_draws(
    schedule: &NoiseSchedule,
    d_z: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DiffusionDraw> {
    (0..n)
        .map(|_| DiffusionDraw {
            t: rng.random_range(1..=schedule.t_max()),
            eps: (0..d_z).map(|_| StandardNormal.sample(rng)).collect(),
        })
        .collect()
}

/// Standard-normal vector used for gate blending.
pub fn sample_blend_noise(d_z: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d_z).map(|_| StandardNormal.sample(rng)).collect()
}

/// Forward noising: `sqrt(abar_t) z + sqrt(1 - abar_t) eps`.
pub fn forward_noise(z: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t > schedule.t_max() {
        return Err(PtaError::invalid(format!(
            "timestep {t} beyond schedule length {}",
            schedule.t_max()
        )));
    }
    if z.len() != eps.len() {
        return Err(PtaError::shape(format!(
            "latent length {} vs noise length {}",
            z.len(),
            eps.len()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z.iter().zip(eps).map(|(zv, ev)| a * zv + b * ev).collect())
}

/// Tape denoising loss over a batch of detached teacher latents with frozen
/// draws: `mean_i |eps_i - predict(z_t_i, t_i)|^2`.
pub fn diffusion_loss_t<F>(
    t: &mut Tape,
    schedule: &NoiseSchedule,
    z_batch: &[Vec<f64>],
    draws: &[DiffusionDraw],
    predict: &mut F,
) -> Result<Var>
where
    F: FnMut(&mut Tape, Var, usize) -> Var,
{
    if z_batch.is_empty() {
        return Err(PtaError::invalid("diffusion loss needs a non-empty batch"));
    }
    if z_batch.len() != draws.len() {
        return Err(PtaError::shape(format!(
            "{} latents vs {} draws",
            z_batch.len(),
            draws.len()
        )));
    }
    let mut parts = Vec::with_capacity(z_batch.len());
    for (z, draw) in z_batch.iter().zip(draws) {
        if !(1..=schedule.t_max()).contains(&draw.t) {
            return Err(PtaError::invalid(format!("draw timestep {} out of range", draw.t)));
        }
        let z_t = forward_noise(z, draw.t, &draw.eps, schedule)?;
        let z_t = t.leaf(z_t);
        let eps = t.leaf(draw.eps.clone());
        let pred = predict(t, z_t, draw.t);
        let d = t.sub(eps, pred);
        parts.push(t.sum_sq(d));
    }
    let sum = t.sum_list(&parts);
    Ok(t.affine(sum, 1.0 / parts.len() as f64, 0.0))
}

/// Plain denoising loss with the learned predictor and fresh draws.
pub fn diffusion_loss(
    predictor: &NoisePredictorSpec,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    z_batch: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if z_batch.is_empty() {
        return Err(PtaError::invalid("diffusion loss needs a non-empty batch"));
    }
    let draws = sample_diffusion_draws(schedule, z_batch[0].len(), z_batch.len(), rng);
    let mut t = Tape::new();
    let mut b = Binder::new(store);
    let loss = diffusion_loss_t(&mut t, schedule, z_batch, &draws, &mut |tape, z_t, step| {
        predictor.forward(tape, &mut b, z_t, step)
    })?;
    Ok(t.scalar_value(loss))
}

/// Gate forward with input validation; scalar in `(0, 1)`.
pub fn predict_gamma_t(
    adapter: &AdapterSpec,
    t: &mut Tape,
    b: &mut Binder,
    z_s: Var,
) -> Result<Var> {
    let z = t.value(z_s);
    if z.len() != adapter.d_z {
        return Err(PtaError::shape(format!(
            "gate input must be length {}, got {}",
            adapter.d_z,
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(PtaError::invalid("non-finite gate input".to_string()));
    }
    Ok(adapter.forward(t, b, z_s))
}

/// Plain gate forward.
pub fn predict_gamma(adapter: &AdapterSpec, store: &ParamStore, z_s: &[f64]) -> Result<f64> {
    let mut t = Tape::new();
    let mut b = Binder::new(store);
    let z = t.leaf(z_s.to_vec());
    let g = predict_gamma_t(adapter, &mut t, &mut b, z)?;
    Ok(t.scalar_value(g))
}

/// Gate blend on the tape: `gamma * z_s + (1 - gamma) * eps`.
pub fn adapter_blend_t(t: &mut Tape, z_s: Var, eps: Var, gamma: Var) -> Var {
    let scaled_z = t.mul_scalar(z_s, gamma);
    let one_minus = t.affine(gamma, -1.0, 1.0);
    let scaled_eps = t.mul_scalar(eps, one_minus);
    t.add(scaled_z, scaled_eps)
}

/// Plain gate blend with validation.
pub fn adapter_blend(z_s: &[f64], eps: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if z_s.len() != eps.len() {
        return Err(PtaError::shape(format!(
            "latent length {} vs noise length {}",
            z_s.len(),
            eps.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(PtaError::invalid(format!("gamma must lie in [0,1], got {gamma}")));
    }
    Ok(z_s.iter().zip(eps).map(|(z, e)| gamma * z + (1.0 - gamma) * e).collect())
}

/// Deterministic reverse refinement on the tape.
///
/// At each ladder step `t`: predict the noise, reconstruct the clean estimate
/// `x0 = (x_t - sqrt(1-abar_t) e) / sqrt(abar_t)`, then move to the next rung
/// with `x_{t-delta} = sqrt(abar_{t-delta}) x0 + sqrt(1-abar_{t-delta}) e`.
/// The rung after the last is 0, where the output equals `x0` exactly.
pub fn ddim_refine_t<F>(
    t: &mut Tape,
    plan: &DdimPlan,
    schedule: &NoiseSchedule,
    z_start: Var,
    predict: &mut F,
) -> Result<Var>
where
    F: FnMut(&mut Tape, Var, usize) -> Var,
{
    plan.check_against(schedule)?;
    let delta = plan.delta();
    let mut x = z_start;
    for &step in &plan.timesteps {
        let ab = schedule.alpha_bar(step);
        let ab_prev = schedule.alpha_bar(step - delta);
        let eps_hat = predict(t, x, step);
        let x0 = t.axpy(1.0 / ab.sqrt(), x, -((1.0 - ab).sqrt()) / ab.sqrt(), eps_hat);
        x = t.axpy(ab_prev.sqrt(), x0, (1.0 - ab_prev).sqrt(), eps_hat);
    }
    Ok(x)
}

/// Plain reverse refinement with the learned predictor.
pub fn ddim_refine(
    predictor: &NoisePredictorSpec,
    store: &ParamStore,
    plan: &DdimPlan,
    schedule: &NoiseSchedule,
    z_start: &[f64],
) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let mut b = Binder::new(store);
    let z = t.leaf(z_start.to_vec());
    let out = ddim_refine_t(&mut t, plan, schedule, z, &mut |tape, x, step| {
        predictor.forward(tape, &mut b, x, step)
    })?;
    Ok(t.value(out).to_vec())
}

/// Distillation loss on the tape against a detached teacher latent.
pub fn kd_loss_t(t: &mut Tape, refined: Var, z_teacher: &[f64]) -> Result<Var> {
    if t.value(refined).len() != z_teacher.len() {
        return Err(PtaError::shape(format!(
            "refined length {} vs teacher length {}",
            t.value(refined).len(),
            z_teacher.len()
        )));
    }
    let target = t.leaf(z_teacher.to_vec());
    Ok(t.mse(refined, target))
}

/// Plain distillation loss (mean squared error).
pub fn kd_loss(refined: &[f64], z_teacher: &[f64]) -> Result<f64> {
    if refined.len() != z_teacher.len() {
        return Err(PtaError::shape(format!(
            "refined length {} vs teacher length {}",
            refined.len(),
            z_teacher.len()
        )));
    }
    let n = refined.len() as f64;
    Ok(refined
        .iter()
        .zip(z_teacher)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// The two components of the composite alignment loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffKdValue {
    pub diffusion: f64,
    pub distillation: f64,
}

impl DiffKdValue {
    /// Composite loss: plain sum of the two parts.
    pub fn total(&self) -> f64 {
        self.diffusion + self.distillation
    }
}

/// Tape nodes of the composite alignment loss, plus the refined latents as
/// plain values (one map per batch item) for consumers that need the
/// refinement output without its gradient history.
pub struct DiffKdParts {
    pub l_diff: Var,
    pub l_kd: Var,
    pub total: Var,
    pub refined: Vec<BTreeMap<String, Vec<f64>>>,
}

/// One batch item for the composite loss: a detached teacher latent, the
/// on-tape student latents to refine, the frozen diffusion draw, and a frozen
/// blend-noise vector per student modality.
pub struct AlignItem {
    pub z_teacher: Vec<f64>,
    pub students: BTreeMap<String, Var>,
    pub draw: DiffusionDraw,
    pub blend_eps: BTreeMap<String, Vec<f64>>,
}

/// Composite alignment loss over a batch.
///
/// The diffusion term averages the denoising error over the batch's teacher
/// latents; the distillation term refines every student latent (gate blend,
/// then reverse pass) and averages its distance to the teacher over the batch
/// and then over the available modalities. Total = diffusion + distillation.
pub fn diffkd_loss_t<F, G>(
    t: &mut Tape,
    schedule: &NoiseSchedule,
    plan: &DdimPlan,
    items: &[AlignItem],
    predict: &mut F,
    gate: &mut G,
) -> Result<DiffKdParts>
where
    F: FnMut(&mut Tape, Var, usize) -> Var,
    G: FnMut(&mut Tape, Var) -> Var,
{
    if items.is_empty() {
        return Err(PtaError::invalid("alignment loss needs a non-empty batch"));
    }
    let modalities: Vec<String> = items[0].students.keys().cloned().collect();
    if modalities.is_empty() {
        return Err(PtaError::invalid("alignment loss needs at least one student modality"));
    }

    let z_batch: Vec<Vec<f64>> = items.iter().map(|i| i.z_teacher.clone()).collect();
    let draws: Vec<DiffusionDraw> = items.iter().map(|i| i.draw.clone()).collect();
    let l_diff = diffusion_loss_t(t, schedule, &z_batch, &draws, predict)?;

    let mut refined_values: Vec<BTreeMap<String, Vec<f64>>> =
        vec![BTreeMap::new(); items.len()];
    let mut per_modality = Vec::with_capacity(modalities.len());
    for m in &modalities {
        let mut per_item = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let z_s = *item
                .students
                .get(m)
                .ok_or_else(|| PtaError::NotFound(format!("student latent for '{m}'")))?;
            let eps = item
                .blend_eps
                .get(m)
                .ok_or_else(|| PtaError::NotFound(format!("blend noise for '{m}'")))?;
            let eps = t.leaf(eps.clone());
            let gamma = gate(t, z_s);
            let z_ts = adapter_blend_t(t, z_s, eps, gamma);
            let refined = ddim_refine_t(t, plan, schedule, z_ts, predict)?;
            refined_values[i].insert(m.clone(), t.value(refined).to_vec());
            per_item.push(kd_loss_t(t, refined, &item.z_teacher)?);
        }
        let sum = t.sum_list(&per_item);
        per_modality.push(t.affine(sum, 1.0 / per_item.len() as f64, 0.0));
    }
    let kd_sum = t.sum_list(&per_modality);
    let l_kd = t.affine(kd_sum, 1.0 / per_modality.len() as f64, 0.0);
    let total = t.add(l_diff, l_kd);
    Ok(DiffKdParts { l_diff, l_kd, total, refined: refined_values })
}
