//! Stage-by-stage error decomposition of the refined inference path.

use std::collections::BTreeMap;

use pta_core::data_synth::generate_dataset;
use pta_core::diffusion_align::{adapter_blend, ddim_refine, predict_gamma, sample_blend_noise};
use pta_core::meta_purify::effective_subset_weights;
use pta_core::model_core::{build_teacher, Role};
use pta_core::rng::{stream, stream_rng};
use pta_core::trainer::{build_specs, TrainState};

fn main() {
    let run = std::env::args().nth(1).expect("usage: diag <run-dir>");
    let state = TrainState::load(std::path::Path::new(&run).join("state.json").as_path()).unwrap();
    let dataset = generate_dataset(&state.config.data).unwrap();
    let specs = build_specs(&state.config, &dataset).unwrap();
    let schedule = state.config.train.schedule().unwrap();
    let plan = state.config.train.plan().unwrap();
    let mods: Vec<String> = specs.modality_order.clone();
    let positions: BTreeMap<&str, u64> =
        mods.iter().enumerate().map(|(i, m)| (m.as_str(), i as u64)).collect();

    let full_mask = pta_core::data_synth::AvailabilityMask::new(
        mods.iter().cloned(),
        &specs.modality_order,
    )
    .unwrap();
    let weights = effective_subset_weights(
        &state.meta,
        &full_mask,
        state.config.train.subset_weighting,
    )
    .unwrap();

    let mut err_raw: BTreeMap<String, f64> = Default::default();
    let mut err_roundtrip: BTreeMap<String, f64> = Default::default();
    let mut err_refined: BTreeMap<String, f64> = Default::default();
    let mut err_teacher_rt = 0.0;
    let mut err_raw_fused = 0.0;
    let mut z_t_sumsq = 0.0;
    let mut z_t_count = 0usize;
    let n = dataset.test.len();

    for (i, sample) in dataset.test.iter().enumerate() {
        let label = match &sample.label {
            pta_core::data_synth::Label::Vector(v) => v.clone(),
            _ => panic!("regression only"),
        };
        let dist = |pred: &[f64]| -> f64 {
            pred.iter().zip(&label).map(|(p, y)| (p - y) * (p - y)).sum::<f64>().sqrt()
        };
        let mut feats = BTreeMap::new();
        for m in &mods {
            let f = specs.encode_modality(&state.store, m, &sample.observations[m]).unwrap();
            // raw singleton
            let pred = specs.task_forward(&state.store, &f).unwrap();
            *err_raw.entry(m.clone()).or_default() += dist(&pred) / n as f64;
            // proj -> inv_proj round trip, no ladder
            let z_s = specs.project(&state.store, &Role::Student(m.clone()), &f).unwrap();
            let f_rt = specs.inverse_project(&state.store, &z_s).unwrap();
            let pred = specs.task_forward(&state.store, &f_rt).unwrap();
            *err_roundtrip.entry(m.clone()).or_default() += dist(&pred) / n as f64;
            // refined path as at inference
            let gamma = predict_gamma(&specs.adapter, &state.store, &z_s).unwrap();
            let mut erng = stream_rng(state.seed, stream::EVAL, &[i as u64, positions[m.as_str()]]);
            let eps = sample_blend_noise(specs.dims.d_z, &mut erng);
            let z_ts = adapter_blend(&z_s, &eps, gamma).unwrap();
            let z_hat = ddim_refine(&specs.predictor, &state.store, &plan, &schedule, &z_ts).unwrap();
            let f_hat = specs.inverse_project(&state.store, &z_hat).unwrap();
            let pred = specs.task_forward(&state.store, &f_hat).unwrap();
            *err_refined.entry(m.clone()).or_default() += dist(&pred) / n as f64;
            feats.insert(m.clone(), f);
        }
        let fused = build_teacher(&feats, &weights, &full_mask, false).unwrap();
        let pred = specs.task_forward(&state.store, &fused).unwrap();
        err_raw_fused += dist(&pred) / n as f64;
        let z_t = specs.project(&state.store, &Role::Teacher, &fused).unwrap();
        z_t_sumsq += z_t.iter().map(|v| v * v).sum::<f64>();
        z_t_count += z_t.len();
        let f_rt = specs.inverse_project(&state.store, &z_t).unwrap();
        let pred = specs.task_forward(&state.store, &f_rt).unwrap();
        err_teacher_rt += dist(&pred) / n as f64;
    }

    println!("raw fused (all mods):       {err_raw_fused:.4}");
    println!("teacher latent round trip:  {err_teacher_rt:.4}");
    println!("teacher latent rms:         {:.4}", (z_t_sumsq / z_t_count as f64).sqrt());
    for m in &mods {
        println!(
            "{m:<8} raw {:.4}  proj round trip {:.4}  refined {:.4}",
            err_raw[m], err_roundtrip[m], err_refined[m]
        );
    }
}
