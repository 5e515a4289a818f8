//! Encoders, latent projections, weighted teacher fusion, and the task head.
//!
//! The model is described by [`ModelSpecs`]; its parameters live in a
//! [`ParamStore`]. Every forward path exists in two forms: a tape builder
//! (`*_t`, used by training so gradients flow) and a plain wrapper that
//! builds a throwaway tape internally, guaranteeing both paths compute
//! byte-identical arithmetic.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::data_synth::{AvailabilityMask, Label, TaskSpec};
use crate::error::{PtaError, Result};
use crate::nn::{AdapterSpec, Binder, LinearSpec, MlpSpec, NoisePredictorSpec};
use crate::params::ParamStore;
use crate::rng::{stream, stream_rng};
use crate::tape::{Tape, Var};

/// Width/depth knobs for every sub-network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Shared feature dimension produced by each encoder.
    pub d_f: usize,
    /// Latent dimension used by the diffusion machinery.
    pub d_z: usize,
    pub encoder_hidden: usize,
    pub head_hidden: usize,
    pub predictor_hidden: usize,
    pub predictor_blocks: usize,
    pub adapter_hidden: usize,
    /// Diffusion timestep count the predictor is tabled for.
    pub t_max: usize,
}

impl ModelDims {
    /// Desk-scale defaults; the published setup uses d_f = 512, which stays
    /// selectable but is far slower on a CPU.
    pub fn desk_default() -> Self {
        ModelDims {
            d_f: 64,
            d_z: 16,
            encoder_hidden: 64,
            head_hidden: 32,
            predictor_hidden: 8,
            predictor_blocks: 2,
            adapter_hidden: 8,
            t_max: 200,
        }
    }
}

/// Per-modality feature vectors plus the fused teacher, all length `d_f`.
#[derive(Clone, Debug, Default)]
pub struct FeatureBundle {
    pub features: BTreeMap<String, Vec<f64>>,
    pub teacher: Option<Vec<f64>>,
}

/// Latent-space view: teacher latent, per-modality student latents, and the
/// refined (denoised) student latents.
#[derive(Clone, Debug, Default)]
pub struct LatentBundle {
    pub teacher: Vec<f64>,
    pub students: BTreeMap<String, Vec<f64>>,
    pub refined: BTreeMap<String, Vec<f64>>,
}

/// Which projection to apply.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student(String),
}

/// Full architecture description: one encoder and one student projection per
/// modality, a teacher projection, an inverse projection back to feature
/// space, the task head, and the diffusion networks.
#[derive(Clone, Debug)]
pub struct ModelSpecs {
    pub modality_order: Vec<String>,
    pub obs_dims: BTreeMap<String, usize>,
    pub task: TaskSpec,
    pub label_dim: usize,
    pub dims: ModelDims,
    encoders: BTreeMap<String, MlpSpec>,
    proj_teacher: LinearSpec,
    proj_students: BTreeMap<String, LinearSpec>,
    inv_proj: LinearSpec,
    head: MlpSpec,
    pub predictor: NoisePredictorSpec,
    pub adapter: AdapterSpec,
}

impl ModelSpecs {
    pub fn build(modalities: &[(String, usize)], task: TaskSpec, dims: ModelDims) -> Result<Self> {
        if modalities.is_empty() {
            return Err(PtaError::config("model needs at least one modality"));
        }
        if dims.d_z > dims.d_f {
            return Err(PtaError::config(format!(
                "latent dim {} must not exceed feature dim {}",
                dims.d_z, dims.d_f
            )));
        }
        for v in [dims.d_f, dims.d_z, dims.encoder_hidden, dims.head_hidden, dims.predictor_hidden, dims.predictor_blocks, dims.adapter_hidden, dims.t_max] {
            if v == 0 {
                return Err(PtaError::config("all model dimensions must be >= 1"));
            }
        }
        let label_dim = task.label_dim();
        let mut encoders = BTreeMap::new();
        let mut proj_students = BTreeMap::new();
        let mut obs_dims = BTreeMap::new();
        let mut order = Vec::new();
        for (name, obs_dim) in modalities {
            if obs_dims.contains_key(name) {
                return Err(PtaError::config(format!("duplicate modality '{name}'")));
            }
            if *obs_dim == 0 {
                return Err(PtaError::config(format!("modality '{name}' has obs_dim 0")));
            }
            order.push(name.clone());
            obs_dims.insert(name.clone(), *obs_dim);
            encoders.insert(
                name.clone(),
                MlpSpec::new(
                    format!("enc.{name}"),
                    vec![*obs_dim, dims.encoder_hidden, dims.encoder_hidden, dims.d_f],
                ),
            );
            proj_students.insert(
                name.clone(),
                LinearSpec::new_no_bias(format!("proj.student.{name}"), dims.d_f, dims.d_z),
            );
        }
        Ok(ModelSpecs {
            modality_order: order,
            obs_dims,
            task,
            label_dim,
            proj_teacher: LinearSpec::new_no_bias("proj.teacher", dims.d_f, dims.d_z),
            inv_proj: LinearSpec::new_no_bias("proj.inv", dims.d_z, dims.d_f),
            head: MlpSpec::new("head", vec![dims.d_f, dims.head_hidden, label_dim]),
            predictor: NoisePredictorSpec::new(
                "phi",
                dims.d_z,
                dims.predictor_hidden,
                dims.predictor_blocks,
                dims.t_max,
            ),
            adapter: AdapterSpec::new("gate", dims.d_z, dims.adapter_hidden),
            encoders,
            proj_students,
            dims,
        })
    }

    /// Fresh parameters for every sub-network, in declaration order.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, stream::INIT, &[]);
        for name in &self.modality_order {
            self.encoders[name].init(&mut store, &mut rng)?;
        }
        self.proj_teacher.init(&mut store, &mut rng)?;
        for name in &self.modality_order {
            self.proj_students[name].init(&mut store, &mut rng)?;
        }
        self.inv_proj.init(&mut store, &mut rng)?;
        self.head.init(&mut store, &mut rng)?;
        self.predictor.init(&mut store, &mut rng)?;
        self.adapter.init(&mut store, &mut rng)?;
        Ok(store)
    }

    pub fn n_params(&self) -> usize {
        self.encoders.values().map(|e| e.n_params()).sum::<usize>()
            + self.proj_teacher.n_params()
            + self.proj_students.values().map(|p| p.n_params()).sum::<usize>()
            + self.inv_proj.n_params()
            + self.head.n_params()
            + self.predictor.n_params()
            + self.adapter.n_params()
    }

    fn encoder(&self, name: &str) -> Result<&MlpSpec> {
        self.encoders
            .get(name)
            .ok_or_else(|| PtaError::NotFound(format!("encoder for modality '{name}'")))
    }

    /// Tape forward of one modality encoder.
    pub fn encode_t(&self, t: &mut Tape, b: &mut Binder, name: &str, obs: &[f64]) -> Result<Var> {
        let enc = self.encoder(name)?;
        let want = self.obs_dims[name];
        if obs.len() != want {
            return Err(PtaError::shape(format!(
                "modality '{name}' expects {want} dims, got {}",
                obs.len()
            )));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(PtaError::invalid(format!("non-finite observation for '{name}'")));
        }
        let x = t.leaf(obs.to_vec());
        Ok(enc.forward(t, b, x))
    }

    /// Tape forward of a projection (teacher or per-modality student).
    pub fn project_t(&self, t: &mut Tape, b: &mut Binder, role: &Role, f: Var) -> Result<Var> {
        let spec = match role {
            Role::Teacher => &self.proj_teacher,
            Role::Student(name) => self
                .proj_students
                .get(name)
                .ok_or_else(|| PtaError::NotFound(format!("student projection for '{name}'")))?,
        };
        if t.value(f).len() != spec.in_dim {
            return Err(PtaError::shape(format!(
                "projection input must be length {}, got {}",
                spec.in_dim,
                t.value(f).len()
            )));
        }
        Ok(spec.forward(t, b, f))
    }

    /// Tape forward of the learned latent-to-feature map.
    pub fn inverse_project_t(&self, t: &mut Tape, b: &mut Binder, z: Var) -> Result<Var> {
        if t.value(z).len() != self.dims.d_z {
            return Err(PtaError::shape(format!(
                "inverse projection input must be length {}, got {}",
                self.dims.d_z,
                t.value(z).len()
            )));
        }
        Ok(self.inv_proj.forward(t, b, z))
    }

    /// Tape forward of the task head on a fused feature.
    pub fn head_t(&self, t: &mut Tape, b: &mut Binder, fused: Var) -> Result<Var> {
        if t.value(fused).len() != self.dims.d_f {
            return Err(PtaError::shape(format!(
                "head input must be length {}, got {}",
                self.dims.d_f,
                t.value(fused).len()
            )));
        }
        Ok(self.head.forward(t, b, fused))
    }

    /// Plain encoder forward.
    pub fn encode_modality(&self, store: &ParamStore, name: &str, obs: &[f64]) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let mut b = Binder::new(store);
        let f = self.encode_t(&mut t, &mut b, name, obs)?;
        Ok(t.value(f).to_vec())
    }

    /// Plain projection forward.
    pub fn project(&self, store: &ParamStore, role: &Role, f: &[f64]) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let mut b = Binder::new(store);
        let x = t.leaf(f.to_vec());
        let z = self.project_t(&mut t, &mut b, role, x)?;
        Ok(t.value(z).to_vec())
    }

    /// Plain inverse projection forward.
    pub fn inverse_project(&self, store: &ParamStore, z: &[f64]) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let mut b = Binder::new(store);
        let x = t.leaf(z.to_vec());
        let f = self.inverse_project_t(&mut t, &mut b, x)?;
        Ok(t.value(f).to_vec())
    }

    /// Plain task-head forward: a vector prediction for regression, logits
    /// for classification.
    pub fn task_forward(&self, store: &ParamStore, fused: &[f64]) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let mut b = Binder::new(store);
        let x = t.leaf(fused.to_vec());
        let y = self.head_t(&mut t, &mut b, x)?;
        Ok(t.value(y).to_vec())
    }
}

/// Rescales weights to sum to one over the masked modalities.
pub(crate) fn renormalize_weight_map(
    weights: &BTreeMap<String, f64>,
    mask: &AvailabilityMask,
) -> Result<BTreeMap<String, f64>> {
    let mut sum = 0.0;
    for name in mask.names() {
        let w = weights
            .get(name)
            .ok_or_else(|| PtaError::NotFound(format!("weight for modality '{name}'")))?;
        sum += w;
    }
    if sum.abs() < 1e-30 {
        return Err(PtaError::numeric("masked weight sum underflows".to_string()));
    }
    Ok(mask
        .names()
        .map(|name| (name.to_string(), weights[name] / sum))
        .collect())
}

/// Weighted sum of the masked modality features.
///
/// With `renormalize` set, weights are first rescaled to sum to one over the
/// mask so the teacher's magnitude does not shrink when modalities drop; with
/// it unset the globally normalized weights are used as-is.
pub fn build_teacher(
    features: &BTreeMap<String, Vec<f64>>,
    weights: &BTreeMap<String, f64>,
    mask: &AvailabilityMask,
    renormalize: bool,
) -> Result<Vec<f64>> {
    let effective: BTreeMap<String, f64> = if renormalize {
        renormalize_weight_map(weights, mask)?
    } else {
        mask.names()
            .map(|name| {
                weights
                    .get(name)
                    .map(|w| (name.to_string(), *w))
                    .ok_or_else(|| PtaError::NotFound(format!("weight for modality '{name}'")))
            })
            .collect::<Result<_>>()?
    };
    let mut out: Option<Vec<f64>> = None;
    for name in mask.names() {
        let f = features
            .get(name)
            .ok_or_else(|| PtaError::NotFound(format!("feature for modality '{name}'")))?;
        let w = effective[name];
        match &mut out {
            None => out = Some(f.iter().map(|v| w * v).collect()),
            Some(acc) => {
                if acc.len() != f.len() {
                    return Err(PtaError::shape("features must share one length".to_string()));
                }
                for (a, v) in acc.iter_mut().zip(f) {
                    *a += w * v;
                }
            }
        }
    }
    Ok(out.expect("mask is non-empty by construction"))
}

/// Tape version of [`build_teacher`]: weights are scalar nodes so gradients
/// can flow into the fusion logits.
pub fn fuse_features_t(
    t: &mut Tape,
    features: &BTreeMap<String, Var>,
    weights: &BTreeMap<String, Var>,
    mask: &AvailabilityMask,
    renormalize: bool,
) -> Result<Var> {
    let mut kept: Vec<(&str, Var, Var)> = Vec::new();
    for name in mask.names() {
        let f = *features
            .get(name)
            .ok_or_else(|| PtaError::NotFound(format!("feature for modality '{name}'")))?;
        let w = *weights
            .get(name)
            .ok_or_else(|| PtaError::NotFound(format!("weight for modality '{name}'")))?;
        kept.push((name, f, w));
    }
    let weight_vars: Vec<Var> = kept.iter().map(|(_, _, w)| *w).collect();
    let effective: Vec<Var> = if renormalize {
        let total = t.sum_list(&weight_vars);
        if t.scalar_value(total).abs() < 1e-30 {
            return Err(PtaError::numeric("masked weight sum underflows".to_string()));
        }
        weight_vars.iter().map(|w| t.div_scalar(*w, total)).collect()
    } else {
        weight_vars
    };
    let parts: Vec<Var> = kept
        .iter()
        .zip(&effective)
        .map(|((_, f, _), w)| t.mul_scalar(*f, *w))
        .collect();
    Ok(t.sum_list(&parts))
}

/// Task loss on the tape: mean squared error for vector labels,
/// cross-entropy for class labels.
pub fn task_loss_t(t: &mut Tape, prediction: Var, label: &Label) -> Result<Var> {
    match label {
        Label::Vector(y) => {
            if t.value(prediction).len() != y.len() {
                return Err(PtaError::shape(format!(
                    "prediction length {} vs label length {}",
                    t.value(prediction).len(),
                    y.len()
                )));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(PtaError::invalid("non-finite label".to_string()));
            }
            let target = t.leaf(y.clone());
            Ok(t.mse(prediction, target))
        }
        Label::Class(c) => {
            if *c >= t.value(prediction).len() {
                return Err(PtaError::invalid(format!(
                    "class {c} out of range for {} logits",
                    t.value(prediction).len()
                )));
            }
            Ok(t.cross_entropy(prediction, *c))
        }
    }
}

/// Plain task loss.
pub fn task_loss(prediction: &[f64], label: &Label) -> Result<f64> {
    if prediction.iter().any(|v| !v.is_finite()) {
        return Err(PtaError::invalid("non-finite prediction".to_string()));
    }
    let mut t = Tape::new();
    let p = t.leaf(prediction.to_vec());
    let l = task_loss_t(&mut t, p, label)?;
    Ok(t.scalar_value(l))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PTAC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    modalities: Vec<(String, usize)>,
    task: TaskSpec,
    label_dim: usize,
    dims: ModelDims,
    seed: u64,
    params: Vec<ParamOffset>,
    extras: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ParamOffset {
    name: String,
    /// Offset in f32 elements into the blob.
    offset: usize,
    len: usize,
}

/// Writes the interchange checkpoint: a JSON header (architecture, seed,
/// named parameter offsets, caller extras) followed by one flat little-endian
/// `f32` blob. This is a lossy export (f32); training resume uses the exact
/// trainer state file instead.
pub fn save_model_checkpoint(
    path: &Path,
    specs: &ModelSpecs,
    store: &ParamStore,
    seed: u64,
    extras: serde_json::Value,
) -> Result<()> {
    let mut offsets = Vec::new();
    let mut blob_data: Vec<f32> = Vec::new();
    for i in 0..store.len() {
        let v = store.value_at(i);
        offsets.push(ParamOffset {
            name: store.name_at(i).to_string(),
            offset: blob_data.len(),
            len: v.len(),
        });
        blob_data.extend(v.iter().map(|x| *x as f32));
    }
    let header = CheckpointHeader {
        modalities: specs
            .modality_order
            .iter()
            .map(|n| (n.clone(), specs.obs_dims[n]))
            .collect(),
        task: specs.task.clone(),
        label_dim: specs.label_dim,
        dims: specs.dims.clone(),
        seed,
        params: offsets,
        extras,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&blob::f32_to_bytes(&blob_data));
    fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_model_checkpoint`], rebuilding the
/// architecture and parameters (at f32 precision) plus the caller extras.
pub fn load_model_checkpoint(
    path: &Path,
) -> Result<(ModelSpecs, ParamStore, u64, serde_json::Value)> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(PtaError::CorruptArtifact("not a model checkpoint".to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(PtaError::CorruptArtifact(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(PtaError::CorruptArtifact("truncated checkpoint header".to_string()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])?;
    let blob_data = blob::bytes_to_f32(&bytes[12 + header_len..])?;
    let specs = ModelSpecs::build(&header.modalities, header.task.clone(), header.dims.clone())?;
    let mut store = ParamStore::new();
    for p in &header.params {
        if p.offset + p.len > blob_data.len() {
            return Err(PtaError::CorruptArtifact(format!(
                "parameter '{}' overruns blob",
                p.name
            )));
        }
        let v: Vec<f64> = blob_data[p.offset..p.offset + p.len].iter().map(|x| *x as f64).collect();
        store.insert(&p.name, v)?;
    }
    Ok((specs, store, header.seed, header.extras))
}
