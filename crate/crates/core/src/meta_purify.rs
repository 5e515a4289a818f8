//! Meta-learned modality weighting.
//!
//! Fusion weights are the softmax of per-modality logits. The logits are
//! trained by a first-order bilevel scheme: inner steps update the model
//! parameters under fixed weights, then an outer step differentiates a
//! held-out task loss with respect to the logits while the model parameters
//! stay frozen.

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data_synth::{AvailabilityMask, SyntheticSample};
use crate::diffusion_align::{
    adapter_blend_t, ddim_refine_t, diffkd_loss_t, AlignItem, DdimPlan, DiffusionDraw,
    NoiseSchedule,
};
use crate::error::{PtaError, Result};
use crate::model_core::{fuse_features_t, renormalize_weight_map, task_loss_t, ModelSpecs, Role};
use crate::nn::Binder;
use crate::params::{AdamVec, ParamStore};
use crate::tape::{Tape, Var};

/// How fusion weights are renormalized when only a subset of modalities is
/// available.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetWeighting {
    /// Rescale the globally softmaxed weights to sum to one over the subset.
    Renormalize,
    /// Softmax the subset's logits from scratch.
    Resoftmax,
}

impl Default for SubsetWeighting {
    fn default() -> Self {
        SubsetWeighting::Renormalize
    }
}

/// Per-modality fusion logits plus their softmax normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaWeights {
    modalities: Vec<String>,
    logits: Vec<f64>,
}

impl MetaWeights {
    /// All-zero logits, i.e. uniform weights.
    pub fn uniform(modalities: &[String]) -> Result<Self> {
        MetaWeights::from_logits(modalities.to_vec(), vec![0.0; modalities.len()])
    }

    pub fn from_logits(modalities: Vec<String>, logits: Vec<f64>) -> Result<Self> {
        if modalities.is_empty() {
            return Err(PtaError::invalid("weights need at least one modality"));
        }
        if modalities.len() != logits.len() {
            return Err(PtaError::shape(format!(
                "{} modalities vs {} logits",
                modalities.len(),
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(PtaError::invalid("non-finite logit".to_string()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &modalities {
            if !seen.insert(m) {
                return Err(PtaError::invalid(format!("duplicate modality '{m}'")));
            }
        }
        Ok(MetaWeights { modalities, logits })
    }

    pub fn modalities(&self) -> &[String] {
        &self.modalities
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn set_logits(&mut self, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.logits.len() {
            return Err(PtaError::shape("logit count cannot change".to_string()));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(PtaError::numeric("non-finite logit".to_string()));
        }
        self.logits = logits;
        Ok(())
    }

    /// Softmax of the logits, in modality order.
    pub fn weights(&self) -> Vec<f64> {
        normalize_weights(&self.logits).expect("logits validated on construction")
    }

    pub fn weight_map(&self) -> BTreeMap<String, f64> {
        self.modalities
            .iter()
            .cloned()
            .zip(self.weights())
            .collect()
    }

    fn position(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| PtaError::NotFound(format!("modality '{name}' in weights")))
    }
}

/// Numerically stable softmax.
pub fn normalize_weights(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(PtaError::invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(PtaError::invalid("non-finite logit".to_string()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

/// Rescales full-set weights to sum to one over the masked subset.
pub fn renormalize_over_subset(
    weights: &BTreeMap<String, f64>,
    mask: &AvailabilityMask,
) -> Result<BTreeMap<String, f64>> {
    renormalize_weight_map(weights, mask)
}

/// Softmax over the masked subset's logits alone.
pub fn resoftmax_over_subset(
    meta: &MetaWeights,
    mask: &AvailabilityMask,
) -> Result<BTreeMap<String, f64>> {
    let mut names = Vec::new();
    let mut sub = Vec::new();
    for name in mask.names() {
        sub.push(meta.logits[meta.position(name)?]);
        names.push(name.to_string());
    }
    let w = normalize_weights(&sub)?;
    Ok(names.into_iter().zip(w).collect())
}

/// The subset weights actually used for fusion under the given policy.
pub fn effective_subset_weights(
    meta: &MetaWeights,
    mask: &AvailabilityMask,
    weighting: SubsetWeighting,
) -> Result<BTreeMap<String, f64>> {
    match weighting {
        SubsetWeighting::Renormalize => renormalize_over_subset(&meta.weight_map(), mask),
        SubsetWeighting::Resoftmax => resoftmax_over_subset(meta, mask),
    }
}

/// Frozen randomness for one batch of the alignment loss: a diffusion draw
/// per item and one blend-noise vector per (item, available modality).
pub struct AlignInputs<'a> {
    pub schedule: &'a NoiseSchedule,
    pub plan: &'a DdimPlan,
    pub draws: &'a [DiffusionDraw],
    pub blend: &'a [BTreeMap<String, Vec<f64>>],
}

/// Inner-phase settings.
#[derive(Clone, Copy, Debug)]
pub struct InnerConfig {
    /// Multiplier on the alignment loss inside the inner objective.
    pub lambda: f64,
    pub weighting: SubsetWeighting,
    /// Multiplier on the auxiliary inverse-projection fit. The inverse
    /// projection receives no gradient from the task or alignment losses
    /// because teacher latents are detached, so it is fit to reconstruct
    /// fused features from them as a side objective. Not part of the
    /// reported inner loss.
    pub recon_weight: f64,
}

/// Tape nodes of the inner losses. `objective` is what gets differentiated:
/// the inner loss plus the auxiliary reconstruction term.
pub struct InnerLosses {
    pub l_task: Var,
    pub l_diff: Option<Var>,
    pub l_kd: Option<Var>,
    pub l_inner: Var,
    pub objective: Var,
}

/// Plain values of the inner losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerValue {
    pub l_task: f64,
    pub l_diff: Option<f64>,
    pub l_kd: Option<f64>,
    pub l_inner: f64,
}

/// Inner loss composition rule.
pub fn compose_inner_loss(l_task: f64, lambda: f64, l_diffkd: f64) -> f64 {
    l_task + lambda * l_diffkd
}

/// Builds the inner-phase loss graph over one batch.
///
/// Fusion weights enter as constants, so no gradient reaches the logits.
/// The task prediction consumes only the masked modalities, simulating
/// deployment gaps, while the distillation teacher always fuses every
/// modality with the globally normalized weights: each surviving student is
/// pulled toward the comprehensive fusion rather than whatever subset the
/// mask happened to keep. Teacher latents are detached before the alignment
/// loss; student latents stay on the tape so the distillation term trains
/// the encoders, student projections, gate, and noise predictor. `align` of
/// `None` drops the alignment term entirely and the inner loss equals the
/// task loss.
pub fn build_inner_graph(
    t: &mut Tape,
    binder: &RefCell<Binder>,
    specs: &ModelSpecs,
    meta: &MetaWeights,
    mask: &AvailabilityMask,
    batch: &[&SyntheticSample],
    align: Option<&AlignInputs>,
    cfg: &InnerConfig,
) -> Result<InnerLosses> {
    if batch.is_empty() {
        return Err(PtaError::invalid("inner loss needs a non-empty batch"));
    }
    if let Some(a) = align {
        if a.draws.len() != batch.len() || a.blend.len() != batch.len() {
            return Err(PtaError::shape("alignment inputs must match the batch".to_string()));
        }
    }
    let effective = effective_subset_weights(meta, mask, cfg.weighting)?;
    let weight_vars: BTreeMap<String, Var> = effective
        .iter()
        .map(|(name, w)| (name.clone(), t.scalar(*w)))
        .collect();
    let teacher_ctx = match align {
        Some(_) => {
            let full = AvailabilityMask::full(&specs.modality_order)?;
            let global = effective_subset_weights(meta, &full, cfg.weighting)?;
            let vars: BTreeMap<String, Var> = global
                .iter()
                .map(|(name, w)| (name.clone(), t.scalar(*w)))
                .collect();
            Some((full, vars))
        }
        None => None,
    };

    let mut task_parts = Vec::with_capacity(batch.len());
    let mut items = Vec::new();
    let mut teacher_nodes = Vec::new();
    let mut fused_values = Vec::new();
    for (i, sample) in batch.iter().enumerate() {
        let encode_names: Vec<&str> = if align.is_some() {
            specs.modality_order.iter().map(String::as_str).collect()
        } else {
            mask.names().collect()
        };
        let mut feats = BTreeMap::new();
        for name in encode_names {
            let obs = sample
                .observations
                .get(name)
                .ok_or_else(|| PtaError::NotFound(format!("observation for '{name}'")))?;
            let f = specs.encode_t(t, &mut binder.borrow_mut(), name, obs)?;
            feats.insert(name.to_string(), f);
        }
        let fused = fuse_features_t(t, &feats, &weight_vars, mask, false)?;
        let pred = specs.head_t(t, &mut binder.borrow_mut(), fused)?;
        task_parts.push(task_loss_t(t, pred, &sample.label)?);

        if let Some(a) = align {
            let (full, teacher_weights) =
                teacher_ctx.as_ref().expect("teacher context exists while aligning");
            let fused_all = fuse_features_t(t, &feats, teacher_weights, full, false)?;
            let z_t_node =
                specs.project_t(t, &mut binder.borrow_mut(), &Role::Teacher, fused_all)?;
            let z_teacher = t.value(z_t_node).to_vec();
            let mut students = BTreeMap::new();
            for name in mask.names() {
                let z = specs.project_t(
                    t,
                    &mut binder.borrow_mut(),
                    &Role::Student(name.to_string()),
                    feats[name],
                )?;
                students.insert(name.to_string(), z);
            }
            teacher_nodes.push(z_t_node);
            fused_values.push(t.value(fused_all).to_vec());
            items.push(AlignItem {
                z_teacher,
                students,
                draw: a.draws[i].clone(),
                blend_eps: a.blend[i].clone(),
            });
        }
    }
    let task_sum = t.sum_list(&task_parts);
    let l_task = t.affine(task_sum, 1.0 / task_parts.len() as f64, 0.0);

    let (l_diff, l_kd, l_inner, refined_values) = match align {
        Some(a) => {
            let parts = diffkd_loss_t(
                t,
                a.schedule,
                a.plan,
                &items,
                &mut |tape, z, step| {
                    specs.predictor.forward(tape, &mut binder.borrow_mut(), z, step)
                },
                &mut |tape, z| specs.adapter.forward(tape, &mut binder.borrow_mut(), z),
            )?;
            let l_inner = t.axpy(1.0, l_task, cfg.lambda, parts.total);
            (Some(parts.l_diff), Some(parts.l_kd), l_inner, parts.refined)
        }
        None => (None, None, l_task, Vec::new()),
    };

    // The reconstruction term shapes the latent codec: routing it through the
    // live teacher projection node fits projection + inverse projection as a
    // joint autoencoder of the fused features, and the detached refined
    // latents keep the inverse projection accurate on the inputs it sees at
    // inference time. The fused-feature targets are detached either way.
    let objective = if align.is_some() && cfg.recon_weight != 0.0 {
        let mut parts = Vec::with_capacity(teacher_nodes.len() * 2);
        for (i, &z_node) in teacher_nodes.iter().enumerate() {
            let target = t.leaf(fused_values[i].clone());
            let rec = specs.inverse_project_t(t, &mut binder.borrow_mut(), z_node)?;
            parts.push(t.mse(rec, target));
            for z_hat in refined_values[i].values() {
                let z_leaf = t.leaf(z_hat.clone());
                let rec = specs.inverse_project_t(t, &mut binder.borrow_mut(), z_leaf)?;
                let target = t.leaf(fused_values[i].clone());
                parts.push(t.mse(rec, target));
            }
        }
        let sum = t.sum_list(&parts);
        let l_recon = t.affine(sum, 1.0 / parts.len() as f64, 0.0);
        t.axpy(1.0, l_inner, cfg.recon_weight, l_recon)
    } else {
        l_inner
    };

    Ok(InnerLosses { l_task, l_diff, l_kd, l_inner, objective })
}

/// One inner step: differentiate the inner objective and apply one optimizer
/// update to the model parameters. The fusion logits are untouched by
/// construction; they are not even on the tape.
#[allow(clippy::too_many_arguments)]
pub fn inner_step(
    specs: &ModelSpecs,
    store: &mut ParamStore,
    opt: &mut crate::params::AdamState,
    meta: &MetaWeights,
    mask: &AvailabilityMask,
    batch: &[&SyntheticSample],
    align: Option<&AlignInputs>,
    cfg: &InnerConfig,
) -> Result<InnerValue> {
    let mut t = Tape::new();
    let binder = RefCell::new(Binder::new(store));
    let losses = build_inner_graph(&mut t, &binder, specs, meta, mask, batch, align, cfg)?;
    let value = InnerValue {
        l_task: t.scalar_value(losses.l_task),
        l_diff: losses.l_diff.map(|v| t.scalar_value(v)),
        l_kd: losses.l_kd.map(|v| t.scalar_value(v)),
        l_inner: t.scalar_value(losses.l_inner),
    };
    if !value.l_inner.is_finite() {
        return Err(PtaError::numeric(format!("inner loss diverged: {}", value.l_inner)));
    }
    let grads = t.backward(losses.objective);
    let grad_list = binder.borrow().grads(&grads);
    drop(binder);
    opt.step(store, &grad_list)?;
    Ok(value)
}

/// Refinement inputs for the outer loss when it evaluates the deployed
/// (refined) pipeline: blend noise per (item, available modality).
pub struct RefineInputs<'a> {
    pub schedule: &'a NoiseSchedule,
    pub plan: &'a DdimPlan,
    pub blend: &'a [BTreeMap<String, Vec<f64>>],
}

/// Builds the outer-phase loss graph: a held-out task loss as a function of
/// the fusion logits, with all model parameters treated as constants of the
/// optimization (they receive gradients on the tape, which are discarded).
pub fn build_outer_graph(
    t: &mut Tape,
    binder: &RefCell<Binder>,
    specs: &ModelSpecs,
    meta: &MetaWeights,
    mask: &AvailabilityMask,
    batch: &[&SyntheticSample],
    refine: Option<&RefineInputs>,
    weighting: SubsetWeighting,
) -> Result<(Var, Var)> {
    if batch.is_empty() {
        return Err(PtaError::invalid("outer loss needs a non-empty batch"));
    }
    if let Some(r) = refine {
        if r.blend.len() != batch.len() {
            return Err(PtaError::shape("refinement inputs must match the batch".to_string()));
        }
    }
    let logits_leaf = t.leaf(meta.logits.clone());
    let masked: Vec<(String, usize)> = mask
        .names()
        .map(|name| meta.position(name).map(|p| (name.to_string(), p)))
        .collect::<Result<_>>()?;
    let (weight_vars, fuse_renormalize): (BTreeMap<String, Var>, bool) = match weighting {
        SubsetWeighting::Renormalize => {
            let full = t.softmax(logits_leaf);
            let map = masked
                .iter()
                .map(|(name, pos)| (name.clone(), t.index(full, *pos)))
                .collect();
            (map, true)
        }
        SubsetWeighting::Resoftmax => {
            let positions: Vec<usize> = masked.iter().map(|(_, p)| *p).collect();
            let sub = t.gather(logits_leaf, &positions);
            let w = t.softmax(sub);
            let map = masked
                .iter()
                .enumerate()
                .map(|(i, (name, _))| (name.clone(), t.index(w, i)))
                .collect();
            (map, false)
        }
    };

    let mut task_parts = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        let mut feats = BTreeMap::new();
        for name in mask.names() {
            let obs = sample
                .observations
                .get(name)
                .ok_or_else(|| PtaError::NotFound(format!("observation for '{name}'")))?;
            let f = specs.encode_t(t, &mut binder.borrow_mut(), name, obs)?;
            feats.insert(name.to_string(), f);
        }
        let fused_feats = match refine {
            None => feats,
            Some(r) => {
                let mut refined = BTreeMap::new();
                for (name, f) in &feats {
                    let z_s = specs.project_t(
                        t,
                        &mut binder.borrow_mut(),
                        &Role::Student(name.clone()),
                        *f,
                    )?;
                    let gamma = specs.adapter.forward(t, &mut binder.borrow_mut(), z_s);
                    let eps = r
                        .blend[i]
                        .get(name)
                        .ok_or_else(|| PtaError::NotFound(format!("blend noise for '{name}'")))?;
                    let eps = t.leaf(eps.clone());
                    let z_ts = adapter_blend_t(t, z_s, eps, gamma);
                    let z_hat = ddim_refine_t(t, r.plan, r.schedule, z_ts, &mut |tape, x, step| {
                        specs.predictor.forward(tape, &mut binder.borrow_mut(), x, step)
                    })?;
                    let f_hat = specs.inverse_project_t(t, &mut binder.borrow_mut(), z_hat)?;
                    refined.insert(name.clone(), f_hat);
                }
                refined
            }
        };
        let fused = fuse_features_t(t, &fused_feats, &weight_vars, mask, fuse_renormalize)?;
        let pred = specs.head_t(t, &mut binder.borrow_mut(), fused)?;
        task_parts.push(task_loss_t(t, pred, &sample.label)?);
    }
    let sum = t.sum_list(&task_parts);
    let l_outer = t.affine(sum, 1.0 / task_parts.len() as f64, 0.0);
    Ok((l_outer, logits_leaf))
}

/// One outer step: differentiate the held-out task loss with respect to the
/// logits and apply one optimizer update to them. Model parameters are
/// immutable here, which enforces the first-order approximation.
pub fn outer_step(
    specs: &ModelSpecs,
    store: &ParamStore,
    meta: &mut MetaWeights,
    opt: &mut AdamVec,
    mask: &AvailabilityMask,
    batch: &[&SyntheticSample],
    refine: Option<&RefineInputs>,
    weighting: SubsetWeighting,
) -> Result<f64> {
    let mut t = Tape::new();
    let binder = RefCell::new(Binder::new(store));
    let (l_outer, logits_leaf) =
        build_outer_graph(&mut t, &binder, specs, meta, mask, batch, refine, weighting)?;
    let value = t.scalar_value(l_outer);
    if !value.is_finite() {
        return Err(PtaError::numeric(format!("outer loss diverged: {value}")));
    }
    let grads = t.backward(l_outer);
    let g = grads
        .wrt(logits_leaf)
        .ok_or_else(|| PtaError::numeric("outer loss does not depend on the logits".to_string()))?
        .to_vec();
    let mut logits = meta.logits().to_vec();
    opt.step(&mut logits, &g)?;
    meta.set_logits(logits)?;
    Ok(value)
}
