//! Purify-then-Align: modality purification via meta-learned fusion weights,
//! followed by diffusion-based feature distillation, on synthetic multimodal data.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`data_synth`]: latent-factor synthetic scenes rendered into per-modality
//!   observations at controlled signal-to-noise ratios.
//! - [`model_core`]: encoders, latent projections, weighted fusion, task heads.
//! - [`diffusion_align`]: noise schedule, forward noising, noise predictor,
//!   deterministic few-step reverse refinement, and the distillation losses.
//! - [`meta_purify`]: bilevel loop that learns softmax fusion weights on a
//!   held-out split while the base parameters train on the inner objective.
//! - [`trainer`]: end-to-end training, ablation variants, checkpoint/resume.
//! - [`eval_report`]: modality-subset evaluation grids, report tables, charts.
//!
//! All numeric kernels run in `f64` on a small reverse-mode [`tape`], so every
//! loss used for training is differentiable end to end and can be verified
//! against the finite-difference oracle in [`gradcheck`].

pub mod blob;
pub mod data_synth;
pub mod diffusion_align;
pub mod error;
pub mod eval_report;
pub mod gradcheck;
pub mod meta_purify;
pub mod model_core;
pub mod nn;
pub mod params;
pub mod plot;
pub mod rng;
pub mod tape;
pub mod trainer;

pub use error::{PtaError, Result};
