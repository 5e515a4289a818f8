//! Synthetic multimodal data with a shared latent ground truth.
//!
//! Each sample starts from a latent scene `u ~ N(0, I_k)`. Every modality
//! observes `A_i u + sigma_i * eps` through its own fixed view matrix `A_i`,
//! with `sigma_i` calibrated so the modality hits a target signal-to-noise
//! ratio. Labels derive from `u` alone, so a clean modality is informative
//! and a low-SNR modality is a controlled contaminant.
//!
//! Observations are quantized to `f32` at generation time (the storage
//! precision), which makes the on-disk round trip lossless.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{PtaError, Result};
use crate::rng::{stream, stream_rng};

/// Task flavor and its output dimensionality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSpec {
    Regression { label_dim: usize },
    Classification { n_classes: usize },
}

impl TaskSpec {
    pub fn label_dim(&self) -> usize {
        match self {
            TaskSpec::Regression { label_dim } => *label_dim,
            TaskSpec::Classification { n_classes } => *n_classes,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskSpec::Classification { .. })
    }
}

/// JSON has no literal for infinities, so SNR fields serialize them as the
/// strings `"inf"` / `"-inf"`.
mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("bad SNR value '{other}'"))),
            },
        }
    }
}

/// Requested shape of one modality before calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub name: String,
    pub obs_dim: usize,
    /// Target SNR in decibels; `f64::INFINITY` requests a noiseless view.
    #[serde(with = "snr_serde")]
    pub target_snr_db: f64,
}

/// Dataset generation request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub task: TaskSpec,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    pub modalities: Vec<ModalityConfig>,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default = "default_split_fractions")]
    pub split_fractions: [f64; 3],
}

fn default_latent_dim() -> usize {
    8
}

fn default_split_fractions() -> [f64; 3] {
    [0.75, 0.125, 0.125]
}

/// High/medium/contaminating three-modality regression setup.
pub fn default_regression_config() -> DataConfig {
    DataConfig {
        task: TaskSpec::Regression { label_dim: 3 },
        latent_dim: 8,
        modalities: default_modalities(),
        n_samples: 2048,
        seed: 0,
        split_fractions: default_split_fractions(),
    }
}

/// Same sensor layout driving a 4-way classification task.
pub fn default_classification_config() -> DataConfig {
    DataConfig {
        task: TaskSpec::Classification { n_classes: 4 },
        latent_dim: 8,
        modalities: default_modalities(),
        n_samples: 2048,
        seed: 0,
        split_fractions: default_split_fractions(),
    }
}

fn default_modalities() -> Vec<ModalityConfig> {
    vec![
        ModalityConfig { name: "depth".into(), obs_dim: 16, target_snr_db: 20.0 },
        ModalityConfig { name: "lidar".into(), obs_dim: 12, target_snr_db: 10.0 },
        ModalityConfig { name: "wifi".into(), obs_dim: 24, target_snr_db: -10.0 },
    ]
}

/// Calibrated modality: fixed view matrix plus the noise level realizing the
/// target SNR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub obs_dim: usize,
    pub latent_dim: usize,
    /// Row-major `obs_dim x latent_dim` view matrix.
    pub view: Vec<f64>,
    pub noise_sigma: f64,
    #[serde(with = "snr_serde")]
    pub target_snr_db: f64,
}

impl ModalitySpec {
    /// Noiseless view `A u` of a latent vector.
    pub fn observe_clean(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.latent_dim);
        let mut out = vec![0.0; self.obs_dim];
        for r in 0..self.obs_dim {
            let row = &self.view[r * self.latent_dim..(r + 1) * self.latent_dim];
            out[r] = row.iter().zip(u).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// Squared Frobenius norm of the view matrix; the mean signal power per
    /// observation coordinate is this over `obs_dim` for unit-variance
    /// latents.
    pub fn frobenius_sq(&self) -> f64 {
        self.view.iter().map(|v| v * v).sum()
    }
}

/// One sample: one observation vector per declared modality plus the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub observations: BTreeMap<String, Vec<f64>>,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Vector(Vec<f64>),
    Class(usize),
}

/// Non-empty subset of the declared modalities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityMask {
    kept: BTreeSet<String>,
}

impl AvailabilityMask {
    pub fn new<I: IntoIterator<Item = String>>(kept: I, universe: &[String]) -> Result<Self> {
        let kept: BTreeSet<String> = kept.into_iter().collect();
        if kept.is_empty() {
            return Err(PtaError::invalid("availability mask must be non-empty"));
        }
        for name in &kept {
            if !universe.contains(name) {
                return Err(PtaError::NotFound(format!("modality '{name}' not declared")));
            }
        }
        Ok(AvailabilityMask { kept })
    }

    pub fn full(universe: &[String]) -> Result<Self> {
        AvailabilityMask::new(universe.iter().cloned(), universe)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.kept.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.kept.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Sorted `a+b+c` rendering used in reports and file names.
    pub fn key(&self) -> String {
        self.kept.iter().cloned().collect::<Vec<_>>().join("+")
    }
}

/// Generated dataset with its calibrated specs and split collections.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub config: DataConfig,
    pub specs: Vec<ModalitySpec>,
    /// Row-major `label_dim x latent_dim` map behind the labels.
    pub label_map: Vec<f64>,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl SyntheticDataset {
    pub fn modality_names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    pub fn n_samples(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    /// SHA-256 over the concatenated split blobs; the determinism fingerprint.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for split in [&self.train, &self.val, &self.test] {
            bytes.extend_from_slice(&blob::f32_to_bytes(&flatten_split(split, &self.specs)));
        }
        blob::sha256_hex(&bytes)
    }
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn quantize_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn validate_config(config: &DataConfig) -> Result<()> {
    if config.modalities.is_empty() {
        return Err(PtaError::config("at least one modality is required"));
    }
    if config.n_samples == 0 {
        return Err(PtaError::config("n_samples must be >= 1"));
    }
    if config.latent_dim == 0 {
        return Err(PtaError::config("latent_dim must be >= 1"));
    }
    let mut seen = BTreeSet::new();
    for m in &config.modalities {
        if m.obs_dim == 0 {
            return Err(PtaError::config(format!("modality '{}' has obs_dim 0", m.name)));
        }
        if !seen.insert(m.name.clone()) {
            return Err(PtaError::config(format!("duplicate modality name '{}'", m.name)));
        }
        if m.target_snr_db.is_nan() {
            return Err(PtaError::config(format!("modality '{}' has NaN target SNR", m.name)));
        }
    }
    let f = config.split_fractions;
    if f.iter().any(|x| *x <= 0.0) {
        return Err(PtaError::config("split fractions must be positive"));
    }
    if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(PtaError::config("split fractions must sum to 1"));
    }
    match config.task {
        TaskSpec::Regression { label_dim } if label_dim == 0 => {
            Err(PtaError::config("label_dim must be >= 1"))
        }
        TaskSpec::Classification { n_classes } if n_classes < 2 => {
            Err(PtaError::config("classification needs >= 2 classes"))
        }
        _ => Ok(()),
    }
}

/// Calibrates the noise level of one modality against its target SNR.
///
/// With `u ~ N(0, I)` the expected signal power is `|A|_F^2` while the noise
/// power is `obs_dim * sigma^2`, so the target linear SNR fixes `sigma`.
pub fn calibrate_spec(cfg: &ModalityConfig, latent_dim: usize, seed: u64, index: u64) -> ModalitySpec {
    let mut rng = stream_rng(seed, stream::VIEW, &[index]);
    let scale = 1.0 / (latent_dim as f64).sqrt();
    let view: Vec<f64> = standard_normal_vec(&mut rng, cfg.obs_dim * latent_dim)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    let mut spec = ModalitySpec {
        name: cfg.name.clone(),
        obs_dim: cfg.obs_dim,
        latent_dim,
        view,
        noise_sigma: 0.0,
        target_snr_db: cfg.target_snr_db,
    };
    if !(cfg.target_snr_db.is_infinite() && cfg.target_snr_db > 0.0) {
        let snr_lin = 10f64.powf(cfg.target_snr_db / 10.0);
        spec.noise_sigma = (spec.frobenius_sq() / (cfg.obs_dim as f64 * snr_lin)).sqrt();
    }
    spec
}

/// Generates the full dataset for `config`, split into train/val/test.
///
/// Pure function of the config (which includes the seed): every latent and
/// noise vector comes from a counter-addressed stream, so regeneration is
/// bit-identical and per-sample work could run in any order.
pub fn generate_dataset(config: &DataConfig) -> Result<SyntheticDataset> {
    validate_config(config)?;
    let k = config.latent_dim;
    let specs: Vec<ModalitySpec> = config
        .modalities
        .iter()
        .enumerate()
        .map(|(i, m)| calibrate_spec(m, k, config.seed, i as u64))
        .collect();

    let label_rows = config.task.label_dim();
    let label_map: Vec<f64> = {
        let mut rng = stream_rng(config.seed, stream::LABEL, &[]);
        let scale = 1.0 / (k as f64).sqrt();
        standard_normal_vec(&mut rng, label_rows * k)
            .into_iter()
            .map(|v| v * scale)
            .collect()
    };

    let mut samples = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        let mut u_rng = stream_rng(config.seed, stream::LATENT, &[i as u64]);
        let u = standard_normal_vec(&mut u_rng, k);

        let mut observations = BTreeMap::new();
        for (m_ix, spec) in specs.iter().enumerate() {
            let mut clean = spec.observe_clean(&u);
            if spec.noise_sigma > 0.0 {
                let mut n_rng = stream_rng(config.seed, stream::NOISE, &[i as u64, m_ix as u64]);
                let noise = standard_normal_vec(&mut n_rng, spec.obs_dim);
                for (c, n) in clean.iter_mut().zip(&noise) {
                    *c += spec.noise_sigma * n;
                }
            }
            let obs: Vec<f64> = clean.into_iter().map(quantize_f32).collect();
            observations.insert(spec.name.clone(), obs);
        }

        let raw_label: Vec<f64> = (0..label_rows)
            .map(|r| label_map[r * k..(r + 1) * k].iter().zip(&u).map(|(a, b)| a * b).sum())
            .collect();
        let label = match config.task {
            TaskSpec::Regression { .. } => {
                Label::Vector(raw_label.into_iter().map(quantize_f32).collect())
            }
            TaskSpec::Classification { .. } => {
                let best = raw_label
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                Label::Class(best)
            }
        };
        samples.push(SyntheticSample { observations, label });
    }

    let n = config.n_samples;
    let n_train = (config.split_fractions[0] * n as f64).round() as usize;
    let n_val = (config.split_fractions[1] * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let val_end = n_train + n_val;
    let mut it = samples.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let val: Vec<_> = it.by_ref().take(val_end - n_train).collect();
    let test: Vec<_> = it.collect();

    Ok(SyntheticDataset {
        config: config.clone(),
        specs,
        label_map,
        train,
        val,
        test,
    })
}

/// Draws an availability mask by dropping each modality independently with
/// probability `drop_prob`, resampling whole draws until at least one
/// modality survives. Returns the mask and the number of resamples.
pub fn sample_availability_mask(
    modalities: &[String],
    drop_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(AvailabilityMask, u64)> {
    if modalities.is_empty() {
        return Err(PtaError::config("cannot sample a mask over zero modalities"));
    }
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(PtaError::config(format!(
            "drop_prob must lie in [0, 1), got {drop_prob}"
        )));
    }
    let mut resamples = 0u64;
    loop {
        let kept: Vec<String> = modalities
            .iter()
            .filter(|_| rng.random::<f64>() >= drop_prob)
            .cloned()
            .collect();
        if !kept.is_empty() {
            let mask = AvailabilityMask::new(kept, modalities)?;
            return Ok((mask, resamples));
        }
        resamples += 1;
    }
}

/// Measured SNR in dB over `n` fresh samples of the given modality.
///
/// Returns `f64::INFINITY` for a noiseless modality (`sigma = 0`).
pub fn compute_empirical_snr(spec: &ModalitySpec, n: usize, seed: u64) -> Result<f64> {
    if n < 100 {
        return Err(PtaError::invalid("need n >= 100 samples for an SNR estimate"));
    }
    if spec.noise_sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mut signal_power = 0.0;
    let mut noise_power = 0.0;
    for i in 0..n {
        let mut u_rng = stream_rng(seed, stream::LATENT, &[i as u64]);
        let u = standard_normal_vec(&mut u_rng, spec.latent_dim);
        let clean = spec.observe_clean(&u);
        signal_power += clean.iter().map(|v| v * v).sum::<f64>();

        let mut n_rng = stream_rng(seed, stream::NOISE, &[i as u64]);
        let eps = standard_normal_vec(&mut n_rng, spec.obs_dim);
        noise_power += eps.iter().map(|v| (spec.noise_sigma * v).powi(2)).sum::<f64>();
    }
    Ok(10.0 * (signal_power / noise_power).log10())
}

fn split_fields(specs: &[ModalitySpec], label_dim: usize) -> Vec<(String, usize)> {
    let mut fields: Vec<(String, usize)> = specs.iter().map(|s| (s.name.clone(), s.obs_dim)).collect();
    fields.push(("label".to_string(), label_dim));
    fields
}

fn flatten_split(samples: &[SyntheticSample], specs: &[ModalitySpec]) -> Vec<f32> {
    let mut out = Vec::new();
    for s in samples {
        for spec in specs {
            out.extend(s.observations[&spec.name].iter().map(|v| *v as f32));
        }
        match &s.label {
            Label::Vector(v) => out.extend(v.iter().map(|x| *x as f32)),
            Label::Class(c) => out.push(*c as f32),
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ShapeSidecar {
    n_samples: usize,
    fields: Vec<ShapeField>,
}

#[derive(Serialize, Deserialize)]
struct ShapeField {
    name: String,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    specs: Vec<ModalitySpec>,
    seed: u64,
    n: usize,
    split_fractions: [f64; 3],
    checksum: String,
    task: TaskSpec,
    latent_dim: usize,
    label_map: Vec<f64>,
}

/// Writes `manifest.json` plus one `{split}.f32` blob and `{split}.shape.json`
/// sidecar per split.
pub fn save_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let label_dim = match ds.config.task {
        TaskSpec::Regression { label_dim } => label_dim,
        TaskSpec::Classification { .. } => 1,
    };
    for (name, samples) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        let flat = flatten_split(samples, &ds.specs);
        blob::write_f32_blob(&dir.join(format!("{name}.f32")), &flat)?;
        let sidecar = ShapeSidecar {
            n_samples: samples.len(),
            fields: split_fields(&ds.specs, label_dim)
                .into_iter()
                .map(|(name, dim)| ShapeField { name, dim })
                .collect(),
        };
        fs::write(
            dir.join(format!("{name}.shape.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
    }
    let manifest = Manifest {
        specs: ds.specs.clone(),
        seed: ds.config.seed,
        n: ds.config.n_samples,
        split_fractions: ds.config.split_fractions,
        checksum: ds.checksum(),
        task: ds.config.task.clone(),
        latent_dim: ds.config.latent_dim,
        label_map: ds.label_map.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`], verifying the
/// manifest checksum against the blobs.
pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let label_dim = match manifest.task {
        TaskSpec::Regression { label_dim } => label_dim,
        TaskSpec::Classification { .. } => 1,
    };
    let mut splits: Vec<Vec<SyntheticSample>> = Vec::new();
    for name in ["train", "val", "test"] {
        let flat = blob::read_f32_blob(&dir.join(format!("{name}.f32")))?;
        let sidecar: ShapeSidecar =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}.shape.json")))?)?;
        let row_len: usize = sidecar.fields.iter().map(|f| f.dim).sum();
        if flat.len() != sidecar.n_samples * row_len {
            return Err(PtaError::CorruptArtifact(format!(
                "{name}.f32 holds {} floats, sidecar implies {}",
                flat.len(),
                sidecar.n_samples * row_len
            )));
        }
        let mut samples = Vec::with_capacity(sidecar.n_samples);
        for row in flat.chunks_exact(row_len) {
            let mut offset = 0;
            let mut observations = BTreeMap::new();
            for field in &sidecar.fields {
                let chunk: Vec<f64> = row[offset..offset + field.dim].iter().map(|v| *v as f64).collect();
                offset += field.dim;
                if field.name == "label" {
                    let label = match manifest.task {
                        TaskSpec::Regression { .. } => Label::Vector(chunk),
                        TaskSpec::Classification { .. } => Label::Class(chunk[0] as usize),
                    };
                    samples.push(SyntheticSample { observations: std::mem::take(&mut observations), label });
                } else {
                    observations.insert(field.name.clone(), chunk);
                }
            }
        }
        if label_dim == 0 {
            return Err(PtaError::CorruptArtifact("label field missing".into()));
        }
        splits.push(samples);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    let ds = SyntheticDataset {
        config: DataConfig {
            task: manifest.task.clone(),
            latent_dim: manifest.latent_dim,
            modalities: manifest
                .specs
                .iter()
                .map(|s| ModalityConfig {
                    name: s.name.clone(),
                    obs_dim: s.obs_dim,
                    target_snr_db: s.target_snr_db,
                })
                .collect(),
            n_samples: manifest.n,
            seed: manifest.seed,
            split_fractions: manifest.split_fractions,
        },
        specs: manifest.specs,
        label_map: manifest.label_map,
        train,
        val,
        test,
    };
    let actual = ds.checksum();
    if actual != manifest.checksum {
        return Err(PtaError::CorruptArtifact(format!(
            "checksum mismatch: manifest {} vs blobs {}",
            manifest.checksum, actual
        )));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn small_config() -> DataConfig {
        DataConfig {
            task: TaskSpec::Regression { label_dim: 3 },
            latent_dim: 4,
            modalities: vec![
                ModalityConfig { name: "a".into(), obs_dim: 5, target_snr_db: 10.0 },
                ModalityConfig { name: "b".into(), obs_dim: 3, target_snr_db: f64::INFINITY },
            ],
            n_samples: 40,
            seed: 11,
            split_fractions: [0.5, 0.25, 0.25],
        }
    }

    #[test]
    fn noiseless_modality_observes_exact_linear_view() {
        let ds = generate_dataset(&small_config()).unwrap();
        let spec_b = ds.specs.iter().find(|s| s.name == "b").unwrap();
        assert_eq!(spec_b.noise_sigma, 0.0);
        for (i, s) in ds.train.iter().enumerate() {
            let mut u_rng = stream_rng(11, stream::LATENT, &[i as u64]);
            let u = standard_normal_vec(&mut u_rng, 4);
            let clean: Vec<f64> = spec_b.observe_clean(&u).into_iter().map(quantize_f32).collect();
            assert_eq!(s.observations["b"], clean);
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = small_config();
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        let mut cfg2 = cfg;
        cfg2.seed = 12;
        let c = generate_dataset(&cfg2).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn splits_are_disjoint_and_cover_all_samples() {
        let ds = generate_dataset(&small_config()).unwrap();
        assert_eq!(ds.train.len(), 20);
        assert_eq!(ds.val.len(), 10);
        assert_eq!(ds.test.len(), 10);
        assert_eq!(ds.n_samples(), 40);
        // Labels are dense enough that identical samples across splits would
        // betray an indexing bug.
        let mut seen: Vec<&SyntheticSample> = Vec::new();
        for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            assert!(!seen.contains(&s), "duplicate sample across splits");
            seen.push(s);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small_config();
        cfg.modalities.clear();
        assert!(generate_dataset(&cfg).is_err());

        let mut cfg = small_config();
        cfg.split_fractions = [0.5, 0.5, 0.0];
        assert!(generate_dataset(&cfg).is_err());

        let mut cfg = small_config();
        cfg.split_fractions = [0.5, 0.3, 0.3];
        assert!(generate_dataset(&cfg).is_err());

        let mut cfg = small_config();
        cfg.modalities[1].name = "a".into();
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn empirical_snr_tracks_target_within_five_percent() {
        let cfg = ModalityConfig { name: "w".into(), obs_dim: 24, target_snr_db: -10.0 };
        let spec = calibrate_spec(&cfg, 8, 3, 0);
        let snr = compute_empirical_snr(&spec, 10_000, 5).unwrap();
        assert!((snr - (-10.0)).abs() <= 0.5, "empirical {snr} dB vs target -10 dB");
    }

    #[test]
    fn zero_db_target_is_balanced_power() {
        let cfg = ModalityConfig { name: "z".into(), obs_dim: 16, target_snr_db: 0.0 };
        let spec = calibrate_spec(&cfg, 8, 7, 0);
        let snr = compute_empirical_snr(&spec, 10_000, 9).unwrap();
        assert!(snr.abs() <= 0.2, "empirical {snr} dB vs target 0 dB");
    }

    #[test]
    fn noiseless_snr_is_positive_infinity() {
        let cfg = ModalityConfig { name: "c".into(), obs_dim: 4, target_snr_db: f64::INFINITY };
        let spec = calibrate_spec(&cfg, 8, 1, 0);
        assert_eq!(compute_empirical_snr(&spec, 1000, 1).unwrap(), f64::INFINITY);
    }

    #[test]
    fn doubling_sigma_costs_six_db() {
        let cfg = ModalityConfig { name: "m".into(), obs_dim: 10, target_snr_db: 5.0 };
        let spec = calibrate_spec(&cfg, 8, 2, 0);
        let mut doubled = spec.clone();
        doubled.noise_sigma *= 2.0;
        let a = compute_empirical_snr(&spec, 2_000, 4).unwrap();
        let b = compute_empirical_snr(&doubled, 2_000, 4).unwrap();
        assert!(((a - b) - 20.0 * 2f64.log10()).abs() < 1e-9, "delta {} dB", a - b);
    }

    #[test]
    fn snr_estimate_requires_enough_samples() {
        let cfg = ModalityConfig { name: "m".into(), obs_dim: 4, target_snr_db: 0.0 };
        let spec = calibrate_spec(&cfg, 4, 2, 0);
        assert!(compute_empirical_snr(&spec, 99, 0).is_err());
    }

    #[test]
    fn mask_with_zero_drop_prob_is_always_full() {
        let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let mut rng = stream_rng(0, stream::MASK, &[0]);
        for _ in 0..50 {
            let (mask, resamples) = sample_availability_mask(&names, 0.0, &mut rng).unwrap();
            assert_eq!(mask.len(), 3);
            assert_eq!(resamples, 0);
        }
    }

    #[test]
    fn single_modality_mask_always_kept() {
        let names: Vec<String> = vec!["solo".into()];
        let mut rng = stream_rng(1, stream::MASK, &[0]);
        for _ in 0..100 {
            let (mask, _) = sample_availability_mask(&names, 0.9, &mut rng).unwrap();
            assert!(mask.contains("solo"));
        }
    }

    #[test]
    fn mask_rejects_certain_total_dropout() {
        let names: Vec<String> = vec!["a".into()];
        let mut rng = stream_rng(1, stream::MASK, &[0]);
        assert!(sample_availability_mask(&names, 1.0, &mut rng).is_err());
        assert!(sample_availability_mask(&names, -0.1, &mut rng).is_err());
    }

    #[test]
    fn mask_frequencies_match_conditioned_bernoulli_law() {
        let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        for (case, p) in [(0u64, 0.5f64), (1, 0.25)] {
            let mut rng = stream_rng(77, stream::MASK, &[case]);
            let mut counts: HashMap<String, usize> = HashMap::new();
            let draws = 100_000;
            for _ in 0..draws {
                let (mask, _) = sample_availability_mask(&names, p, &mut rng).unwrap();
                *counts.entry(mask.key()).or_default() += 1;
            }
            let denom = 1.0 - p.powi(3);
            for kept in 1..=3usize {
                let prob = p.powi(3 - kept as i32) * (1.0 - p).powi(kept as i32) / denom;
                // every subset of this size shares the same probability
                let subsets: Vec<String> = match kept {
                    1 => vec!["a".into(), "b".into(), "c".into()],
                    2 => vec!["a+b".into(), "a+c".into(), "b+c".into()],
                    _ => vec!["a+b+c".into()],
                };
                for key in subsets {
                    let freq = *counts.get(&key).unwrap_or(&0) as f64 / draws as f64;
                    assert!(
                        (freq - prob).abs() <= 0.02,
                        "p={p} subset {key}: freq {freq:.4} vs law {prob:.4}"
                    );
                }
            }
        }
    }

    #[test]
    fn classification_labels_follow_argmax_rule() {
        let mut cfg = small_config();
        cfg.task = TaskSpec::Classification { n_classes: 4 };
        let ds = generate_dataset(&cfg).unwrap();
        let k = cfg.latent_dim;
        for (i, s) in ds.train.iter().enumerate() {
            let mut u_rng = stream_rng(cfg.seed, stream::LATENT, &[i as u64]);
            let u = standard_normal_vec(&mut u_rng, k);
            let scores: Vec<f64> = (0..4)
                .map(|r| ds.label_map[r * k..(r + 1) * k].iter().zip(&u).map(|(a, b)| a * b).sum())
                .collect();
            let want = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(s.label, Label::Class(want));
        }
    }

    #[test]
    fn save_load_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small_config()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.checksum(), ds.checksum());
        assert_eq!(back.train, ds.train);
        assert_eq!(back.val, ds.val);
        assert_eq!(back.test, ds.test);
        assert_eq!(back.specs, ds.specs);
        assert_eq!(back.config, ds.config);
    }

    #[test]
    fn load_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small_config()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let blob_path = dir.path().join("train.f32");
        let mut bytes = fs::read(&blob_path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&blob_path, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(PtaError::CorruptArtifact(_))));
    }

    #[test]
    fn default_configs_generate() {
        let reg = generate_dataset(&DataConfig { n_samples: 64, ..default_regression_config() }).unwrap();
        assert_eq!(reg.modality_names(), vec!["depth", "lidar", "wifi"]);
        let cls = generate_dataset(&DataConfig { n_samples: 64, ..default_classification_config() }).unwrap();
        assert!(cls.train.iter().all(|s| matches!(s.label, Label::Class(_))));
    }
}
