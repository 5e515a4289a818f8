//! Training orchestration: config resolution, the bilevel loop, interruptible
//! state, subset evaluation, and the three-variant ablation sweep.
//!
//! Every random draw in the loop comes from a stream addressed by the seed,
//! a purpose tag, and a loop counter, never from an RNG carried across steps.
//! Training state is therefore a pure function of (config, seed, step), and a
//! run interrupted at any step resumes bit-exactly from its serialized state.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data_synth::{
    generate_dataset, sample_availability_mask, AvailabilityMask, DataConfig, Label,
    ModalityConfig, SyntheticDataset, SyntheticSample, TaskSpec,
};
use crate::diffusion_align::{
    adapter_blend, ddim_refine, predict_gamma, sample_blend_noise, sample_diffusion_draws,
    DdimPlan, NoiseSchedule,
};
use crate::error::{PtaError, Result};
use crate::eval_report::{enumerate_subsets, MetricsRow};
use crate::meta_purify::{
    effective_subset_weights, inner_step, outer_step, AlignInputs, InnerConfig, MetaWeights,
    RefineInputs, SubsetWeighting,
};
use crate::model_core::{
    build_teacher, save_model_checkpoint, ModelDims, ModelSpecs, Role,
};
use crate::params::{AdamState, AdamVec, ParamStore};
use crate::rng::{stream, stream_rng};

/// Which pieces of the method are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Meta-learned weights and diffusion alignment.
    Full,
    /// Meta-learned weights only; no diffusion networks, raw features at eval.
    NoDiff,
    /// Diffusion alignment only; weights stay uniform.
    NoMeta,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoDiff, Variant::NoMeta];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDiff => "no_diff",
            Variant::NoMeta => "no_meta",
        }
    }

    pub fn uses_diffusion(&self) -> bool {
        !matches!(self, Variant::NoDiff)
    }

    pub fn uses_meta(&self) -> bool {
        !matches!(self, Variant::NoMeta)
    }
}

impl std::str::FromStr for Variant {
    type Err = PtaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_diff" => Ok(Variant::NoDiff),
            "no_meta" => Ok(Variant::NoMeta),
            other => Err(PtaError::invalid(format!("unknown variant '{other}'"))),
        }
    }
}

fn default_epochs() -> usize {
    100
}
fn default_outer_batch() -> usize {
    64
}
fn default_lambda() -> f64 {
    0.1
}
fn default_lr_meta() -> f64 {
    1e-2
}
fn default_drop_prob() -> f64 {
    0.5
}
fn default_inner_steps() -> u64 {
    50
}
fn default_ddim_steps() -> usize {
    5
}
fn default_beta_start() -> f64 {
    1e-4
}
fn default_beta_end() -> f64 {
    0.02
}
fn default_recon_weight() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_variant() -> Variant {
    Variant::Full
}

/// Training hyperparameters. `batch_size` and `lr_model` default per task
/// when left unset: 16 and 5e-4 for regression, 32 and 2e-4 for
/// classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Held-out batch size for each outer step.
    #[serde(default = "default_outer_batch")]
    pub outer_batch: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub lr_model: Option<f64>,
    #[serde(default = "default_lr_meta")]
    pub lr_meta: f64,
    #[serde(default = "default_drop_prob")]
    pub drop_prob: f64,
    /// Inner steps between consecutive outer steps.
    #[serde(default = "default_inner_steps")]
    pub inner_steps_per_outer: u64,
    #[serde(default = "default_ddim_steps")]
    pub ddim_steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default = "default_recon_weight")]
    pub recon_weight: f64,
    /// Whether the outer loss evaluates the refined (deployed) pipeline
    /// rather than raw-feature fusion.
    #[serde(default = "default_true")]
    pub outer_uses_refined: bool,
    #[serde(default)]
    pub subset_weighting: SubsetWeighting,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "ModelDims::desk_default")]
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn resolved_batch(&self, task: &TaskSpec) -> usize {
        self.batch_size
            .unwrap_or(if task.is_classification() { 32 } else { 16 })
    }

    pub fn resolved_lr(&self, task: &TaskSpec) -> f64 {
        self.lr_model
            .unwrap_or(if task.is_classification() { 2e-4 } else { 5e-4 })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.dims.t_max, self.beta_start, self.beta_end)
    }

    pub fn plan(&self) -> Result<DdimPlan> {
        DdimPlan::new(self.dims.t_max, self.ddim_steps)
    }
}

/// A complete experiment: the dataset recipe plus the training recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// The canonical desk-scale experiment: an 8-factor scene rendered into a
/// clean, a mid-grade, and a contaminated view, with a 3-vector regression
/// target.
pub fn default_experiment() -> ExperimentConfig {
    ExperimentConfig {
        data: DataConfig {
            task: TaskSpec::Regression { label_dim: 3 },
            latent_dim: 8,
            modalities: vec![
                ModalityConfig { name: "depth".into(), obs_dim: 16, target_snr_db: 12.0 },
                ModalityConfig { name: "lidar".into(), obs_dim: 12, target_snr_db: 2.0 },
                ModalityConfig { name: "wifi".into(), obs_dim: 24, target_snr_db: -10.0 },
            ],
            n_samples: 2048,
            seed: 11,
            split_fractions: [0.75, 0.125, 0.125],
        },
        train: TrainConfig::default(),
    }
}

/// Builds the model architecture implied by a dataset and the dimensions.
pub fn build_specs(config: &ExperimentConfig, dataset: &SyntheticDataset) -> Result<ModelSpecs> {
    let modalities: Vec<(String, usize)> = dataset
        .specs
        .iter()
        .map(|s| (s.name.clone(), s.obs_dim))
        .collect();
    ModelSpecs::build(&modalities, dataset.config.task.clone(), config.train.dims.clone())
}

/// One training-log record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Inner,
    Outer,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Inner => "inner",
            Phase::Outer => "outer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub phase: Phase,
    pub l_task: Option<f64>,
    pub l_diff: Option<f64>,
    pub l_kd: Option<f64>,
    pub l_inner: Option<f64>,
    pub l_outer: Option<f64>,
    /// Normalized fusion weights after this step, in modality order.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub step: u64,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub l_outer: f64,
}

/// Complete serializable training state; everything a resumed run needs
/// beyond the dataset, which is regenerated from `config.data`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub seed: u64,
    /// Completed inner steps.
    pub global_step: u64,
    /// Completed outer steps.
    pub outer_count: u64,
    /// Availability-mask rejection count (all-dropped redraws).
    pub resamples: u64,
    pub store: ParamStore,
    pub meta: MetaWeights,
    pub inner_opt: AdamState,
    pub outer_opt: AdamVec,
}

impl TrainState {
    pub fn init(
        config: ExperimentConfig,
        seed: u64,
        specs: &ModelSpecs,
        train_samples: &[SyntheticSample],
    ) -> Result<Self> {
        let mut store = specs.init_params(seed)?;
        calibrate_projections(specs, &mut store, train_samples)?;
        let meta = MetaWeights::uniform(&specs.modality_order)?;
        let inner_opt = AdamState::for_store(config.train.resolved_lr(&specs.task), &store);
        let outer_opt = AdamVec::new(config.train.lr_meta, specs.modality_order.len());
        Ok(TrainState {
            config,
            seed,
            global_step: 0,
            outer_count: 0,
            resamples: 0,
            store,
            meta,
            inner_opt,
            outer_opt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn total_steps(&self, dataset: &SyntheticDataset) -> u64 {
        let batch = self.config.train.resolved_batch(&dataset.config.task);
        let spe = dataset.train.len() / batch;
        (self.config.train.epochs * spe) as u64
    }
}

/// Rescales every projection matrix at init so latents start at unit RMS on
/// a probe batch. The noise schedule mixes latents with unit-variance draws,
/// so its signal-to-noise ladder is only meaningful at that scale; the
/// projections stay plain linear maps, only their starting magnitude changes.
fn calibrate_projections(
    specs: &ModelSpecs,
    store: &mut ParamStore,
    samples: &[SyntheticSample],
) -> Result<()> {
    let probe = &samples[..samples.len().min(256)];
    if probe.is_empty() {
        return Err(PtaError::invalid("projection calibration needs a non-empty probe batch"));
    }
    let full = AvailabilityMask::new(specs.modality_order.iter().cloned(), &specs.modality_order)?;
    let uniform = MetaWeights::uniform(&specs.modality_order)?;
    let weights =
        effective_subset_weights(&uniform, &full, crate::meta_purify::SubsetWeighting::default())?;
    let mut sumsq: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for sample in probe {
        let mut features = BTreeMap::new();
        for name in &specs.modality_order {
            let obs = sample
                .observations
                .get(name)
                .ok_or_else(|| PtaError::NotFound(format!("observation for '{name}'")))?;
            let f = specs.encode_modality(store, name, obs)?;
            let z = specs.project(store, &Role::Student(name.clone()), &f)?;
            let slot = sumsq.entry(format!("proj.student.{name}.w")).or_insert((0.0, 0));
            slot.0 += z.iter().map(|v| v * v).sum::<f64>();
            slot.1 += z.len();
            features.insert(name.clone(), f);
        }
        let fused = build_teacher(&features, &weights, &full, false)?;
        let z = specs.project(store, &Role::Teacher, &fused)?;
        let slot = sumsq.entry("proj.teacher.w".to_string()).or_insert((0.0, 0));
        slot.0 += z.iter().map(|v| v * v).sum::<f64>();
        slot.1 += z.len();
    }
    for (wname, (ss, n)) in sumsq {
        let rms = (ss / n as f64).sqrt();
        if !rms.is_finite() || rms < 1e-9 {
            return Err(PtaError::Numeric(format!(
                "projection calibration for '{wname}' found degenerate latent scale {rms}"
            )));
        }
        for w in store.get_mut(&wname)?.iter_mut() {
            *w /= rms;
        }
    }
    Ok(())
}

/// Deterministic Fisher-Yates shuffle of `0..n` from a dedicated stream.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, stream::SHUFFLE, &[epoch]);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Advances training by at most `max_steps` inner steps (all remaining when
/// `None`), appending log rows for each step taken.
pub fn train_steps(
    state: &mut TrainState,
    dataset: &SyntheticDataset,
    specs: &ModelSpecs,
    max_steps: Option<u64>,
    train_log: &mut Vec<LogRow>,
    weight_log: &mut Vec<WeightRow>,
) -> Result<()> {
    let tc = state.config.train.clone();
    let task = &dataset.config.task;
    let batch_size = tc.resolved_batch(task);
    if dataset.train.len() < batch_size {
        return Err(PtaError::config(format!(
            "train split holds {} samples, batch size is {batch_size}",
            dataset.train.len()
        )));
    }
    if tc.outer_batch > dataset.val.len() && tc.variant.uses_meta() {
        return Err(PtaError::config(format!(
            "val split holds {} samples, outer batch is {}",
            dataset.val.len(),
            tc.outer_batch
        )));
    }
    let steps_per_epoch = (dataset.train.len() / batch_size) as u64;
    let total = state.total_steps(dataset);
    let stop = match max_steps {
        Some(m) => (state.global_step + m).min(total),
        None => total,
    };
    let schedule = tc.schedule()?;
    let plan = tc.plan()?;
    let d_z = specs.dims.d_z;
    let modalities = specs.modality_order.clone();
    let inner_cfg = InnerConfig {
        lambda: tc.lambda,
        weighting: tc.subset_weighting,
        recon_weight: tc.recon_weight,
    };

    let mut current_epoch = u64::MAX;
    let mut order: Vec<usize> = Vec::new();
    while state.global_step < stop {
        let step_id = state.global_step + 1;
        let epoch = (step_id - 1) / steps_per_epoch;
        let pos = ((step_id - 1) % steps_per_epoch) as usize;
        if epoch != current_epoch {
            order = epoch_order(state.seed, epoch, dataset.train.len());
            current_epoch = epoch;
        }
        let batch: Vec<&SyntheticSample> = order[pos * batch_size..(pos + 1) * batch_size]
            .iter()
            .map(|&i| &dataset.train[i])
            .collect();

        let mut mask_rng = stream_rng(state.seed, stream::MASK, &[step_id]);
        let (mask, redraws) =
            sample_availability_mask(&modalities, tc.drop_prob, &mut mask_rng)?;
        state.resamples += redraws;

        let (draws, blend);
        let align = if tc.variant.uses_diffusion() {
            let mut drng = stream_rng(state.seed, stream::DRAW, &[step_id]);
            draws = sample_diffusion_draws(&schedule, d_z, batch.len(), &mut drng);
            let mut brng = stream_rng(state.seed, stream::BLEND, &[step_id]);
            blend = per_item_blend_noise(&mask, batch.len(), d_z, &mut brng);
            Some(AlignInputs { schedule: &schedule, plan: &plan, draws: &draws, blend: &blend })
        } else {
            None
        };

        let value = inner_step(
            specs,
            &mut state.store,
            &mut state.inner_opt,
            &state.meta,
            &mask,
            &batch,
            align.as_ref(),
            &inner_cfg,
        )?;
        state.global_step = step_id;
        train_log.push(LogRow {
            step: step_id,
            phase: Phase::Inner,
            l_task: Some(value.l_task),
            l_diff: value.l_diff,
            l_kd: value.l_kd,
            l_inner: Some(value.l_inner),
            l_outer: None,
            weights: state.meta.weights(),
        });

        if tc.variant.uses_meta() && step_id % tc.inner_steps_per_outer == 0 {
            let outer_ix = state.outer_count + 1;
            let mut orng = stream_rng(state.seed, stream::OUTER, &[outer_ix]);
            let val_batch: Vec<&SyntheticSample> = (0..tc.outer_batch)
                .map(|_| &dataset.val[orng.random_range(0..dataset.val.len())])
                .collect();
            let (outer_mask, redraws) =
                sample_availability_mask(&modalities, tc.drop_prob, &mut orng)?;
            state.resamples += redraws;
            let outer_blend;
            let refine = if tc.outer_uses_refined && tc.variant.uses_diffusion() {
                outer_blend =
                    per_item_blend_noise(&outer_mask, val_batch.len(), d_z, &mut orng);
                Some(RefineInputs { schedule: &schedule, plan: &plan, blend: &outer_blend })
            } else {
                None
            };
            let l_outer = outer_step(
                specs,
                &state.store,
                &mut state.meta,
                &mut state.outer_opt,
                &outer_mask,
                &val_batch,
                refine.as_ref(),
                tc.subset_weighting,
            )?;
            state.outer_count = outer_ix;
            train_log.push(LogRow {
                step: step_id,
                phase: Phase::Outer,
                l_task: None,
                l_diff: None,
                l_kd: None,
                l_inner: None,
                l_outer: Some(l_outer),
                weights: state.meta.weights(),
            });
            weight_log.push(WeightRow {
                step: step_id,
                logits: state.meta.logits().to_vec(),
                weights: state.meta.weights(),
                l_outer,
            });
        }
    }
    Ok(())
}

fn per_item_blend_noise(
    mask: &AvailabilityMask,
    n: usize,
    d_z: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<BTreeMap<String, Vec<f64>>> {
    (0..n)
        .map(|_| {
            mask.names()
                .map(|m| (m.to_string(), sample_blend_noise(d_z, rng)))
                .collect()
        })
        .collect()
}

/// Everything a finished (or interrupted) run produces in memory.
pub struct TrainOutput {
    pub state: TrainState,
    pub train_log: Vec<LogRow>,
    pub weight_log: Vec<WeightRow>,
}

/// Trains from scratch to completion.
pub fn train(
    config: &ExperimentConfig,
    dataset: &SyntheticDataset,
    seed: u64,
) -> Result<TrainOutput> {
    let specs = build_specs(config, dataset)?;
    let mut state = TrainState::init(config.clone(), seed, &specs, &dataset.train)?;
    let mut train_log = Vec::new();
    let mut weight_log = Vec::new();
    train_steps(&mut state, dataset, &specs, None, &mut train_log, &mut weight_log)?;
    Ok(TrainOutput { state, train_log, weight_log })
}

/// Evaluates a trained state on one modality subset of the test split.
///
/// Variants with diffusion refine every available latent (gate blend with
/// stream-addressed noise, then the deterministic reverse pass) and fuse the
/// back-projected features; the diffusion-free variant fuses raw features.
/// Returns the task metric: mean Euclidean error for regression, accuracy
/// for classification.
pub fn evaluate_subset(
    state: &TrainState,
    specs: &ModelSpecs,
    samples: &[SyntheticSample],
    subset: &[String],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(PtaError::invalid("evaluation needs at least one sample"));
    }
    let tc = &state.config.train;
    let mask = AvailabilityMask::new(subset.iter().cloned(), &specs.modality_order)?;
    let weights = if tc.variant.uses_meta() {
        effective_subset_weights(&state.meta, &mask, tc.subset_weighting)?
    } else {
        let uniform = MetaWeights::uniform(&specs.modality_order)?;
        effective_subset_weights(&uniform, &mask, tc.subset_weighting)?
    };
    let schedule = tc.schedule()?;
    let plan = tc.plan()?;
    let positions: BTreeMap<&str, u64> = specs
        .modality_order
        .iter()
        .enumerate()
        .map(|(i, m)| (m.as_str(), i as u64))
        .collect();

    let mut total = 0.0;
    for (i, sample) in samples.iter().enumerate() {
        let mut features = BTreeMap::new();
        for name in mask.names() {
            let obs = sample
                .observations
                .get(name)
                .ok_or_else(|| PtaError::NotFound(format!("observation for '{name}'")))?;
            let f = specs.encode_modality(&state.store, name, obs)?;
            let feature = if tc.variant.uses_diffusion() {
                let z_s = specs.project(&state.store, &Role::Student(name.to_string()), &f)?;
                let gamma = predict_gamma(&specs.adapter, &state.store, &z_s)?;
                let mut erng =
                    stream_rng(state.seed, stream::EVAL, &[i as u64, positions[name]]);
                let eps = sample_blend_noise(specs.dims.d_z, &mut erng);
                let z_ts = adapter_blend(&z_s, &eps, gamma)?;
                let z_hat = ddim_refine(&specs.predictor, &state.store, &plan, &schedule, &z_ts)?;
                specs.inverse_project(&state.store, &z_hat)?
            } else {
                f
            };
            features.insert(name.to_string(), feature);
        }
        let fused = build_teacher(&features, &weights, &mask, false)?;
        let pred = specs.task_forward(&state.store, &fused)?;
        total += match &sample.label {
            Label::Vector(y) => {
                if y.len() != pred.len() {
                    return Err(PtaError::shape("label/prediction length mismatch".to_string()));
                }
                pred.iter()
                    .zip(y)
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum::<f64>()
                    .sqrt()
            }
            Label::Class(c) => {
                let arg = pred
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(k, _)| k)
                    .unwrap_or(0);
                if arg == *c {
                    1.0
                } else {
                    0.0
                }
            }
        };
    }
    Ok(total / samples.len() as f64)
}

pub fn metric_name(task: &TaskSpec) -> &'static str {
    if task.is_classification() {
        "accuracy"
    } else {
        "mean_euclidean_error"
    }
}

/// Evaluates a trained state on every modality subset of the test split.
pub fn evaluate_all_subsets(
    state: &TrainState,
    specs: &ModelSpecs,
    dataset: &SyntheticDataset,
) -> Result<Vec<MetricsRow>> {
    let name = metric_name(&dataset.config.task);
    let mut rows = Vec::new();
    for subset in enumerate_subsets(&specs.modality_order) {
        let started = Instant::now();
        let value = evaluate_subset(state, specs, &dataset.test, &subset)?;
        rows.push(MetricsRow::new(
            state.config.train.variant.as_str(),
            state.seed,
            subset,
            name,
            value,
            started.elapsed().as_secs_f64(),
        ));
    }
    Ok(rows)
}

fn display_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the step-by-step loss log.
pub fn write_train_log_csv(path: &Path, rows: &[LogRow], modalities: &[String]) -> Result<()> {
    let mut out = String::from("step,phase,L_task,L_Diff,L_KD,L_inner,L_outer");
    for i in 1..=modalities.len() {
        out.push_str(&format!(",w_{i}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            r.step,
            r.phase.as_str(),
            display_opt(r.l_task),
            display_opt(r.l_diff),
            display_opt(r.l_kd),
            display_opt(r.l_inner),
            display_opt(r.l_outer),
        ));
        for w in &r.weights {
            out.push_str(&format!(",{w}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes the fusion-weight trajectory taken at outer steps.
pub fn write_weight_log_csv(path: &Path, rows: &[WeightRow], modalities: &[String]) -> Result<()> {
    let mut out = String::from("step");
    for i in 1..=modalities.len() {
        out.push_str(&format!(",logit_{i}"));
    }
    for i in 1..=modalities.len() {
        out.push_str(&format!(",w_{i}"));
    }
    out.push_str(",L_outer\n");
    for r in rows {
        out.push_str(&r.step.to_string());
        for v in r.logits.iter().chain(&r.weights) {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", r.l_outer));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Runs (or resumes) one training run against a directory:
/// `config.json`, `state.json`, `model.ckpt`, `train_log.csv`, `weights.csv`,
/// and `metrics.csv` with the per-subset evaluation of the final model.
pub fn run_training(
    config: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutput> {
    std::fs::create_dir_all(out_dir)?;
    let dataset = generate_dataset(&config.data)?;
    let specs = build_specs(config, &dataset)?;
    let state_path = out_dir.join("state.json");
    let mut state = if resume && state_path.exists() {
        let state = TrainState::load(&state_path)?;
        if state.config != *config {
            return Err(PtaError::config(
                "resume state was produced by a different config".to_string(),
            ));
        }
        if state.seed != seed {
            return Err(PtaError::config(format!(
                "resume state was produced by seed {}, not {seed}",
                state.seed
            )));
        }
        state
    } else {
        TrainState::init(config.clone(), seed, &specs, &dataset.train)?
    };
    config.save(&out_dir.join("config.json"))?;

    let mut train_log = Vec::new();
    let mut weight_log = Vec::new();
    let outcome = train_steps(&mut state, &dataset, &specs, None, &mut train_log, &mut weight_log);
    // A non-finite loss aborts before the offending update, so the state on
    // disk is the last good one either way.
    state.save(&state_path)?;
    write_train_log_csv(&out_dir.join("train_log.csv"), &train_log, &specs.modality_order)?;
    write_weight_log_csv(&out_dir.join("weights.csv"), &weight_log, &specs.modality_order)?;
    outcome?;
    let extras = json!({
        "variant": state.config.train.variant.as_str(),
        "logits": state.meta.logits(),
        "t_max": state.config.train.dims.t_max,
        "beta_start": state.config.train.beta_start,
        "beta_end": state.config.train.beta_end,
        "ddim_steps": state.config.train.ddim_steps,
        "global_step": state.global_step,
    });
    save_model_checkpoint(&out_dir.join("model.ckpt"), &specs, &state.store, seed, extras)?;
    let rows = evaluate_all_subsets(&state, &specs, &dataset)?;
    crate::eval_report::write_metrics_csv(&out_dir.join("metrics.csv"), &rows)?;
    Ok(TrainOutput { state, train_log, weight_log })
}

/// Trains every variant under every seed and evaluates each on all modality
/// subsets. Runs are independent and execute on worker threads; results come
/// back in deterministic (variant, seed) order. With `out_dir` set, each run
/// writes its artifacts under `<out_dir>/<variant>_s<seed>/`.
pub fn run_ablation(
    config: &ExperimentConfig,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<Vec<MetricsRow>> {
    if seeds.is_empty() {
        return Err(PtaError::invalid("ablation needs at least one seed"));
    }
    let dataset = generate_dataset(&config.data)?;
    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|v| seeds.iter().map(move |s| (*v, *s)))
        .collect();

    let results: Vec<Result<Vec<MetricsRow>>> = std::thread::scope(|scope| {
        let dataset = &dataset;
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(variant, seed)| {
                scope.spawn(move || -> Result<Vec<MetricsRow>> {
                    let mut cfg = config.clone();
                    cfg.train.variant = variant;
                    match out_dir {
                        Some(dir) => {
                            let run_dir = dir.join(format!("{}_s{seed}", variant.as_str()));
                            let out = run_training(&cfg, seed, &run_dir, false)?;
                            let specs = build_specs(&cfg, dataset)?;
                            evaluate_all_subsets(&out.state, &specs, dataset)
                        }
                        None => {
                            let out = train(&cfg, dataset, seed)?;
                            let specs = build_specs(&cfg, dataset)?;
                            evaluate_all_subsets(&out.state, &specs, dataset)
                        }
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });

    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Latents captured for one sample under one availability subset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentBundle {
    pub teacher: Vec<f64>,
    pub students: BTreeMap<String, Vec<f64>>,
    pub refined: BTreeMap<String, Vec<f64>>,
    pub gammas: BTreeMap<String, f64>,
}

/// Per-sample latent dump for one availability subset: teacher latent,
/// raw student latents, and refined student latents.
pub fn dump_latents(
    state: &TrainState,
    specs: &ModelSpecs,
    samples: &[SyntheticSample],
    subset: &[String],
    limit: usize,
) -> Result<Vec<LatentBundle>> {
    let mask = AvailabilityMask::new(subset.iter().cloned(), &specs.modality_order)?;
    let schedule = state.config.train.schedule()?;
    let plan = state.config.train.plan()?;
    let positions: BTreeMap<&str, u64> = specs
        .modality_order
        .iter()
        .enumerate()
        .map(|(i, m)| (m.as_str(), i as u64))
        .collect();
    let full = AvailabilityMask::full(&specs.modality_order)?;
    let global = if state.config.train.variant.uses_meta() {
        effective_subset_weights(&state.meta, &full, state.config.train.subset_weighting)?
    } else {
        let uniform = MetaWeights::uniform(&specs.modality_order)?;
        effective_subset_weights(&uniform, &full, state.config.train.subset_weighting)?
    };
    let mut out = Vec::new();
    for (i, sample) in samples.iter().take(limit).enumerate() {
        let mut features = BTreeMap::new();
        let mut students = BTreeMap::new();
        let mut refined = BTreeMap::new();
        let mut gammas = BTreeMap::new();
        for name in full.names() {
            let obs = sample
                .observations
                .get(name)
                .ok_or_else(|| PtaError::NotFound(format!("observation for '{name}'")))?;
            let f = specs.encode_modality(&state.store, name, obs)?;
            features.insert(name.to_string(), f);
        }
        for name in mask.names() {
            let f = &features[name];
            let z_s = specs.project(&state.store, &Role::Student(name.to_string()), f)?;
            let gamma = predict_gamma(&specs.adapter, &state.store, &z_s)?;
            let mut erng = stream_rng(state.seed, stream::EVAL, &[i as u64, positions[name]]);
            let eps = sample_blend_noise(specs.dims.d_z, &mut erng);
            let z_ts = adapter_blend(&z_s, &eps, gamma)?;
            let z_hat = ddim_refine(&specs.predictor, &state.store, &plan, &schedule, &z_ts)?;
            students.insert(name.to_string(), z_s);
            refined.insert(name.to_string(), z_hat);
            gammas.insert(name.to_string(), gamma);
        }
        let fused = build_teacher(&features, &global, &full, false)?;
        let teacher = specs.project(&state.store, &Role::Teacher, &fused)?;
        out.push(LatentBundle { teacher, students, refined, gammas });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig {
                task: TaskSpec::Regression { label_dim: 2 },
                latent_dim: 4,
                modalities: vec![
                    ModalityConfig { name: "a".into(), obs_dim: 6, target_snr_db: 20.0 },
                    ModalityConfig { name: "b".into(), obs_dim: 5, target_snr_db: 0.0 },
                ],
                n_samples: 160,
                seed: 7,
                split_fractions: [0.6, 0.2, 0.2],
            },
            train: TrainConfig {
                epochs: 4,
                batch_size: Some(8),
                outer_batch: 16,
                inner_steps_per_outer: 5,
                dims: ModelDims {
                    d_f: 8,
                    d_z: 4,
                    encoder_hidden: 8,
                    head_hidden: 8,
                    predictor_hidden: 4,
                    predictor_blocks: 1,
                    adapter_hidden: 2,
                    t_max: 10,
                },
                ddim_steps: 5,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn shipped_config_files_match_the_builtin_default() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
        let shipped = ExperimentConfig::load(&root.join("configs/default.json")).unwrap();
        assert_eq!(shipped, default_experiment());
        let cls = ExperimentConfig::load(&root.join("configs/classification.json")).unwrap();
        assert!(cls.data.task.is_classification());
        assert_eq!(cls.train.resolved_batch(&cls.data.task), 32);
    }

    #[test]
    fn config_defaults_resolve_per_task() {
        let tc = TrainConfig::default();
        assert_eq!(tc.resolved_batch(&TaskSpec::Regression { label_dim: 3 }), 16);
        assert_eq!(tc.resolved_batch(&TaskSpec::Classification { n_classes: 4 }), 32);
        assert_eq!(tc.resolved_lr(&TaskSpec::Regression { label_dim: 3 }), 5e-4);
        assert_eq!(tc.resolved_lr(&TaskSpec::Classification { n_classes: 4 }), 2e-4);
        assert_eq!(tc.lambda, 0.1);
        assert_eq!(tc.lr_meta, 1e-2);
        assert_eq!(tc.drop_prob, 0.5);
        assert_eq!(tc.inner_steps_per_outer, 50);
        assert_eq!(tc.ddim_steps, 5);
        assert_eq!(tc.dims.t_max, 200);
    }

    #[test]
    fn experiment_config_round_trips_through_json() {
        let cfg = tiny_config();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn training_emits_logs_and_decreases_inner_loss() {
        let cfg = tiny_config();
        let dataset = generate_dataset(&cfg.data).unwrap();
        let out = train(&cfg, &dataset, 0).unwrap();
        let total = out.state.total_steps(&dataset);
        assert_eq!(out.state.global_step, total);
        let inner: Vec<f64> = out
            .train_log
            .iter()
            .filter(|r| r.phase == Phase::Inner)
            .map(|r| r.l_inner.unwrap())
            .collect();
        assert_eq!(inner.len() as u64, total);
        let head = &inner[..20];
        let tail = &inner[inner.len() - 20..];
        let head_mean: f64 = head.iter().sum::<f64>() / head.len() as f64;
        let tail_mean: f64 = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(
            tail_mean < head_mean,
            "inner loss did not decrease: {head_mean} -> {tail_mean}"
        );
        assert!(!out.weight_log.is_empty());
        for r in &out.train_log {
            assert_eq!(r.weights.len(), 2);
            if r.phase == Phase::Inner {
                assert!(r.l_task.unwrap().is_finite());
                assert!(r.l_diff.unwrap().is_finite());
            } else {
                assert!(r.l_outer.unwrap().is_finite());
            }
        }
    }

    #[test]
    fn no_diff_variant_runs_without_alignment_losses() {
        let mut cfg = tiny_config();
        cfg.train.variant = Variant::NoDiff;
        cfg.train.epochs = 1;
        let dataset = generate_dataset(&cfg.data).unwrap();
        let out = train(&cfg, &dataset, 1).unwrap();
        for r in &out.train_log {
            if r.phase == Phase::Inner {
                assert!(r.l_diff.is_none());
                assert!(r.l_kd.is_none());
                assert_eq!(r.l_task, r.l_inner);
            }
        }
        assert!(!out.weight_log.is_empty(), "weight updates still happen");
    }

    #[test]
    fn no_meta_variant_keeps_weights_uniform() {
        let mut cfg = tiny_config();
        cfg.train.variant = Variant::NoMeta;
        cfg.train.epochs = 1;
        let dataset = generate_dataset(&cfg.data).unwrap();
        let out = train(&cfg, &dataset, 1).unwrap();
        assert!(out.weight_log.is_empty());
        assert_eq!(out.state.meta.logits(), &[0.0, 0.0]);
    }

    #[test]
    fn interrupted_run_resumes_bit_exactly() {
        let cfg = tiny_config();
        let dataset = generate_dataset(&cfg.data).unwrap();
        let specs = build_specs(&cfg, &dataset).unwrap();

        let mut straight = TrainState::init(cfg.clone(), 3, &specs, &dataset.train).unwrap();
        let mut log_a = Vec::new();
        let mut wlog_a = Vec::new();
        train_steps(&mut straight, &dataset, &specs, None, &mut log_a, &mut wlog_a).unwrap();

        let mut early = TrainState::init(cfg.clone(), 3, &specs, &dataset.train).unwrap();
        let mut log_b = Vec::new();
        let mut wlog_b = Vec::new();
        train_steps(&mut early, &dataset, &specs, Some(17), &mut log_b, &mut wlog_b).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let state_path = dir.path().join("state.json");
        early.save(&state_path).unwrap();
        let mut resumed = TrainState::load(&state_path).unwrap();
        assert_eq!(resumed.global_step, 17);
        train_steps(&mut resumed, &dataset, &specs, None, &mut log_b, &mut wlog_b).unwrap();

        assert_eq!(log_a, log_b);
        assert_eq!(wlog_a, wlog_b);
        assert_eq!(resumed.store.checksum(), straight.store.checksum());
        assert_eq!(resumed.meta.logits(), straight.meta.logits());
        assert_eq!(resumed.resamples, straight.resamples);
    }

    #[test]
    fn evaluation_is_deterministic_and_ordered_by_information() {
        let cfg = tiny_config();
        let dataset = generate_dataset(&cfg.data).unwrap();
        let out = train(&cfg, &dataset, 0).unwrap();
        let specs = build_specs(&cfg, &dataset).unwrap();
        let rows = evaluate_all_subsets(&out.state, &specs, &dataset).unwrap();
        assert_eq!(rows.len(), 3);
        let again = evaluate_all_subsets(&out.state, &specs, &dataset).unwrap();
        for (a, b) in rows.iter().zip(&again) {
            assert_eq!(a.metric_value, b.metric_value);
        }
        for r in &rows {
            assert!(r.metric_value.is_finite() && r.metric_value >= 0.0);
            assert_eq!(r.metric_name, "mean_euclidean_error");
        }
    }

    #[test]
    fn run_dir_contains_all_artifacts() {
        let mut cfg = tiny_config();
        cfg.train.epochs = 1;
        let dir = tempfile::tempdir().unwrap();
        run_training(&cfg, 0, dir.path(), false).unwrap();
        for f in [
            "config.json",
            "state.json",
            "model.ckpt",
            "train_log.csv",
            "weights.csv",
            "metrics.csv",
        ] {
            assert!(dir.path().join(f).exists(), "missing {f}");
        }
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert!(log.starts_with("step,phase,L_task,L_Diff,L_KD,L_inner,L_outer,w_1,w_2"));
        let w = std::fs::read_to_string(dir.path().join("weights.csv")).unwrap();
        assert!(w.starts_with("step,logit_1,logit_2,w_1,w_2,L_outer"));
    }

    #[test]
    fn resume_rejects_mismatched_config_or_seed() {
        let mut cfg = tiny_config();
        cfg.train.epochs = 1;
        let dir = tempfile::tempdir().unwrap();
        run_training(&cfg, 0, dir.path(), false).unwrap();
        assert!(run_training(&cfg, 5, dir.path(), true).is_err());
        let mut other = cfg.clone();
        other.train.lambda = 0.5;
        assert!(run_training(&other, 0, dir.path(), true).is_err());
    }

    #[test]
    fn latent_dump_shapes_are_consistent() {
        let mut cfg = tiny_config();
        cfg.train.epochs = 1;
        let dataset = generate_dataset(&cfg.data).unwrap();
        let out = train(&cfg, &dataset, 0).unwrap();
        let specs = build_specs(&cfg, &dataset).unwrap();
        let subset = vec!["a".to_string(), "b".to_string()];
        let bundles = dump_latents(&out.state, &specs, &dataset.test, &subset, 3).unwrap();
        assert_eq!(bundles.len(), 3);
        for b in &bundles {
            assert_eq!(b.teacher.len(), 4);
            assert_eq!(b.students.len(), 2);
            assert_eq!(b.refined.len(), 2);
            for z in b.students.values().chain(b.refined.values()) {
                assert_eq!(z.len(), 4);
            }
        }
    }
}
