use std::ffi::{CStr, CString};
use std::ptr;

use pta_ffi::*;

fn tiny_config_json() -> CString {
    CString::new(
        r#"{
        "data": {
            "task": { "regression": { "label_dim": 2 } },
            "latent_dim": 4,
            "modalities": [
                { "name": "a", "obs_dim": 6, "target_snr_db": 20.0 },
                { "name": "b", "obs_dim": 5, "target_snr_db": 0.0 }
            ],
            "n_samples": 160,
            "seed": 7,
            "split_fractions": [0.6, 0.2, 0.2]
        },
        "train": {
            "epochs": 2,
            "batch_size": 8,
            "outer_batch": 16,
            "inner_steps_per_outer": 5,
            "dims": {
                "d_f": 8, "d_z": 4, "encoder_hidden": 8, "head_hidden": 8,
                "predictor_hidden": 4, "predictor_blocks": 1, "adapter_hidden": 2,
                "t_max": 10
            }
        }
    }"#,
    )
    .unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(pta_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn full_lifecycle_through_the_c_surface() {
    let config = tiny_config_json();
    unsafe {
        let mut dataset: *mut PtaDataset = ptr::null_mut();
        assert_eq!(pta_dataset_generate(config.as_ptr(), &mut dataset), PtaStatus::Ok);
        assert!(!dataset.is_null());

        let (mut train_n, mut val_n, mut test_n) = (0usize, 0usize, 0usize);
        assert_eq!(
            pta_dataset_sizes(dataset, &mut train_n, &mut val_n, &mut test_n),
            PtaStatus::Ok
        );
        assert_eq!((train_n, val_n, test_n), (96, 32, 32));

        let mut run: *mut PtaRun = ptr::null_mut();
        assert_eq!(pta_train(config.as_ptr(), 0, dataset, &mut run), PtaStatus::Ok);
        assert!(!run.is_null());

        let mut n_mod = 0usize;
        assert_eq!(pta_run_n_modalities(run, &mut n_mod), PtaStatus::Ok);
        assert_eq!(n_mod, 2);

        let mut weights = [0.0f64; 2];
        assert_eq!(pta_run_weights(run, weights.as_mut_ptr(), 2), PtaStatus::Ok);
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(weights.iter().all(|w| (0.0..=1.0).contains(w)));

        let subset = CString::new("a,b").unwrap();
        let mut metric = f64::NAN;
        assert_eq!(
            pta_evaluate_subset(run, dataset, subset.as_ptr(), &mut metric),
            PtaStatus::Ok
        );
        assert!(metric.is_finite() && metric >= 0.0);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("run.json").to_str().unwrap()).unwrap();
        assert_eq!(pta_run_save(run, path.as_ptr()), PtaStatus::Ok);

        let mut reloaded: *mut PtaRun = ptr::null_mut();
        assert_eq!(pta_run_load(path.as_ptr(), &mut reloaded), PtaStatus::Ok);
        let mut metric_again = f64::NAN;
        assert_eq!(
            pta_evaluate_subset(reloaded, dataset, subset.as_ptr(), &mut metric_again),
            PtaStatus::Ok
        );
        assert_eq!(metric.to_bits(), metric_again.to_bits());

        pta_run_free(reloaded);
        pta_run_free(run);
        pta_dataset_free(dataset);
    }
}

#[test]
fn errors_set_codes_and_messages() {
    unsafe {
        let mut dataset: *mut PtaDataset = ptr::null_mut();
        assert_eq!(
            pta_dataset_generate(ptr::null(), &mut dataset),
            PtaStatus::NullPointer
        );
        assert!(!last_error().is_empty());

        let garbage = CString::new("{ not json").unwrap();
        assert_eq!(
            pta_dataset_generate(garbage.as_ptr(), &mut dataset),
            PtaStatus::JsonError
        );
        assert!(last_error().contains("json"));

        let config = tiny_config_json();
        assert_eq!(pta_dataset_generate(config.as_ptr(), &mut dataset), PtaStatus::Ok);
        let mut run: *mut PtaRun = ptr::null_mut();
        assert_eq!(pta_train(config.as_ptr(), 0, dataset, &mut run), PtaStatus::Ok);

        let missing = CString::new("a,zebra").unwrap();
        let mut metric = 0.0f64;
        let status = pta_evaluate_subset(run, dataset, missing.as_ptr(), &mut metric);
        assert_ne!(status, PtaStatus::Ok);
        assert!(last_error().contains("zebra"), "message: {}", last_error());

        let mut too_short = [0.0f64; 1];
        assert_eq!(
            pta_run_weights(run, too_short.as_mut_ptr(), 1),
            PtaStatus::ShapeMismatch
        );

        let bad_path = CString::new("/nonexistent/dir/state.json").unwrap();
        let mut reloaded: *mut PtaRun = ptr::null_mut();
        assert_eq!(pta_run_load(bad_path.as_ptr(), &mut reloaded), PtaStatus::IoError);

        pta_run_free(run);
        pta_dataset_free(dataset);
        pta_run_free(ptr::null_mut());
        pta_dataset_free(ptr::null_mut());
    }
}

#[test]
fn version_string_is_reachable() {
    let v = unsafe { CStr::from_ptr(pta_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn generated_header_declares_the_surface() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/pta.h");
    let text = std::fs::read_to_string(header).unwrap();
    for symbol in [
        "pta_version",
        "pta_last_error",
        "pta_dataset_generate",
        "pta_dataset_sizes",
        "pta_dataset_free",
        "pta_train",
        "pta_run_save",
        "pta_run_load",
        "pta_run_weights",
        "pta_run_n_modalities",
        "pta_evaluate_subset",
        "pta_run_free",
        "PtaStatus",
        "PtaDataset",
        "PtaRun",
    ] {
        assert!(text.contains(symbol), "header missing {symbol}");
    }
}
