use std::ffi::{CStr, CString};
use std::ptr;

use m2ae_ffi::*;

fn last_error() -> Option<String> {
    let p = m2ae_last_error_message();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

fn c(path: &std::path::Path) -> CString {
    CString::new(path.to_str().unwrap()).unwrap()
}

fn generate(subjects: u32, pairs: u32, seed: u64) -> *mut M2aeDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { m2ae_dataset_generate(subjects, pairs, seed, &mut ds) }, M2aeStatus::Ok);
    assert!(!ds.is_null());
    ds
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(m2ae_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn dataset_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(&dir.path().join("d.m2ds"));
    let ds = generate(3, 2, 7);
    assert_eq!(unsafe { m2ae_dataset_len(ds) }, 6);
    assert_eq!(unsafe { m2ae_dataset_segment_len(ds) }, 2048);
    assert_eq!(unsafe { m2ae_dataset_save(ds, path.as_ptr()) }, M2aeStatus::Ok);
    assert_eq!(last_error(), None);

    let mut back = ptr::null_mut();
    assert_eq!(unsafe { m2ae_dataset_load(path.as_ptr(), &mut back) }, M2aeStatus::Ok);
    assert_eq!(unsafe { m2ae_dataset_len(back) }, 6);
    let again = c(&dir.path().join("e.m2ds"));
    assert_eq!(unsafe { m2ae_dataset_save(back, again.as_ptr()) }, M2aeStatus::Ok);
    assert_eq!(std::fs::read(path.to_str().unwrap()).unwrap(), std::fs::read(again.to_str().unwrap()).unwrap());
    unsafe {
        m2ae_dataset_free(ds);
        m2ae_dataset_free(back);
    }
}

#[test]
fn null_arguments_are_reported_not_dereferenced() {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { m2ae_dataset_load(ptr::null(), &mut ds) }, M2aeStatus::NullArgument);
    assert!(last_error().unwrap().contains("path"));
    assert!(ds.is_null());
    assert_eq!(unsafe { m2ae_dataset_generate(2, 1, 0, ptr::null_mut()) }, M2aeStatus::NullArgument);
    assert_eq!(unsafe { m2ae_dataset_len(ptr::null()) }, 0);
    assert_eq!(unsafe { m2ae_model_d_enc(ptr::null()) }, 0);
    assert!(!unsafe { m2ae_model_is_cross_modal(ptr::null()) });
    assert_eq!(unsafe { m2ae_fingerprints_rows(ptr::null()) }, 0);
    let mut v = 0.0;
    assert_eq!(unsafe { m2ae_auroc(ptr::null(), ptr::null(), 0, &mut v) }, M2aeStatus::NullArgument);
    unsafe {
        m2ae_dataset_free(ptr::null_mut());
        m2ae_model_free(ptr::null_mut());
        m2ae_fingerprints_free(ptr::null_mut());
    }
}

#[test]
fn status_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = ptr::null_mut();
    let missing = c(&dir.path().join("missing.m2ds"));
    assert_eq!(unsafe { m2ae_dataset_load(missing.as_ptr(), &mut ds) }, M2aeStatus::Io);

    let junk = dir.path().join("junk.m2ds");
    std::fs::write(&junk, b"not a dataset at all").unwrap();
    assert_eq!(unsafe { m2ae_dataset_load(c(&junk).as_ptr(), &mut ds) }, M2aeStatus::Format);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { m2ae_model_load(c(&junk).as_ptr(), &mut model) }, M2aeStatus::Format);

    let bad = [0xffu8, 0xfe, 0];
    assert_eq!(unsafe { m2ae_dataset_load(bad.as_ptr().cast(), &mut ds) }, M2aeStatus::InvalidUtf8);
    assert!(ds.is_null() && model.is_null());

    let data = generate(4, 1, 0);
    let config = CString::new("model.d_enc = 0\n").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { m2ae_pretrain(data, config.as_ptr(), ptr::null(), &mut out) }, M2aeStatus::InvalidInput);
    assert!(last_error().unwrap().contains("d_enc"));
    assert!(out.is_null());
    unsafe { m2ae_dataset_free(data) };

    let scores = [0.1, 0.2];
    let labels = [1u8, 1];
    let mut v = 0.0;
    assert_eq!(unsafe { m2ae_auroc(scores.as_ptr(), labels.as_ptr(), 2, &mut v) }, M2aeStatus::InvalidInput);
}

#[test]
fn ranking_metrics_match_hand_values() {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [0u8, 0, 1, 1];
    let (mut roc, mut pr) = (0.0, 0.0);
    assert_eq!(unsafe { m2ae_auroc(scores.as_ptr(), labels.as_ptr(), 4, &mut roc) }, M2aeStatus::Ok);
    assert_eq!(unsafe { m2ae_auprc(scores.as_ptr(), labels.as_ptr(), 4, &mut pr) }, M2aeStatus::Ok);
    assert!((roc - 0.75).abs() < 1e-12);
    // Positives at ranks 1 and 3: (1/1 + 2/3) / 2.
    assert!((pr - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn pretrain_extract_and_reconstruct_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(20, 2, 3);
    let config = CString::new(
        "model.d_enc = 8\nmodel.enc_depth = 1\nmodel.dec_width = 8\nmodel.dec_depth = 1\nmodel.heads = 2\n\
         train.batch_size = 4\ntrain.max_epochs = 1\n",
    )
    .unwrap();
    let run_dir = c(&dir.path().join("run"));
    let mut model = ptr::null_mut();
    let status = unsafe { m2ae_pretrain(ds, config.as_ptr(), run_dir.as_ptr(), &mut model) };
    assert_eq!(status, M2aeStatus::Ok, "{:?}", last_error());
    assert!(dir.path().join("run/metrics.csv").exists());
    assert_eq!(unsafe { m2ae_model_d_enc(model) }, 8);
    assert!(unsafe { m2ae_model_is_cross_modal(model) });

    let ckpt = c(&dir.path().join("m.m2ck"));
    assert_eq!(unsafe { m2ae_model_save(model, ckpt.as_ptr()) }, M2aeStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { m2ae_model_load(ckpt.as_ptr(), &mut loaded) }, M2aeStatus::Ok);

    let mut fp = ptr::null_mut();
    assert_eq!(unsafe { m2ae_extract_fingerprints(loaded, ds, M2aeSource::Paired as u32, &mut fp) }, M2aeStatus::Ok);
    let (rows, dim) = unsafe { (m2ae_fingerprints_rows(fp), m2ae_fingerprints_dim(fp)) };
    assert_eq!((rows, dim), (40, 8));
    let mut small = vec![0.0; rows * dim - 1];
    assert_eq!(unsafe { m2ae_fingerprints_copy(fp, small.as_mut_ptr(), small.len()) }, M2aeStatus::BufferTooSmall);
    let mut values = vec![f64::NAN; rows * dim];
    assert_eq!(unsafe { m2ae_fingerprints_copy(fp, values.as_mut_ptr(), values.len()) }, M2aeStatus::Ok);
    assert!(values.iter().all(|v| v.is_finite()));
    let (mut subject, mut segment) = (u32::MAX, u32::MAX);
    assert_eq!(unsafe { m2ae_fingerprints_key(fp, 1, &mut subject, &mut segment) }, M2aeStatus::Ok);
    assert_eq!((subject, segment), (0, 1));
    assert_eq!(unsafe { m2ae_fingerprints_key(fp, rows, &mut subject, &mut segment) }, M2aeStatus::InvalidInput);
    let csv = c(&dir.path().join("fp.csv"));
    assert_eq!(unsafe { m2ae_fingerprints_write_csv(fp, csv.as_ptr()) }, M2aeStatus::Ok);
    assert_eq!(std::fs::read_to_string(csv.to_str().unwrap()).unwrap().lines().count(), rows + 1);

    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { m2ae_extract_fingerprints(loaded, ds, 9, &mut bad) }, M2aeStatus::InvalidInput);

    let mut mae = f64::NAN;
    let status = unsafe { m2ae_reconstruct_mae(loaded, ds, M2aeDirection::EcgToPpg as u32, &mut mae) };
    assert_eq!(status, M2aeStatus::Ok);
    assert!(mae.is_finite() && mae > 0.0);
    assert_eq!(unsafe { m2ae_reconstruct_mae(loaded, ds, 2, &mut mae) }, M2aeStatus::InvalidInput);

    unsafe {
        m2ae_fingerprints_free(fp);
        m2ae_model_free(model);
        m2ae_model_free(loaded);
        m2ae_dataset_free(ds);
    }
}

#[test]
fn single_modal_model_rejects_cross_modal_calls() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(20, 1, 5);
    let config = CString::new(
        "model.d_enc = 8\nmodel.enc_depth = 1\nmodel.dec_width = 8\nmodel.dec_depth = 1\nmodel.heads = 2\n\
         train.batch_size = 4\ntrain.max_epochs = 1\ntrain.mode = single_modal_ecg\n",
    )
    .unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { m2ae_pretrain(ds, config.as_ptr(), ptr::null(), &mut model) };
    assert_eq!(status, M2aeStatus::Ok, "{:?}", last_error());
    assert!(!unsafe { m2ae_model_is_cross_modal(model) });
    let mut fp = ptr::null_mut();
    let status = unsafe { m2ae_extract_fingerprints(model, ds, M2aeSource::Ppg as u32, &mut fp) };
    assert_eq!(status, M2aeStatus::ModalityMismatch);
    let mut mae = 0.0;
    let status = unsafe { m2ae_reconstruct_mae(model, ds, M2aeDirection::EcgToPpg as u32, &mut mae) };
    assert_eq!(status, M2aeStatus::ModalityMismatch);
    assert!(dir.path().read_dir().unwrap().next().is_none());
    unsafe {
        m2ae_model_free(model);
        m2ae_dataset_free(ds);
    }
}

#[test]
fn header_declares_every_exported_function() {
    let root = env!("CARGO_MANIFEST_DIR");
    let source = std::fs::read_to_string(format!("{root}/src/lib.rs")).unwrap();
    let header = std::fs::read_to_string(format!("{root}/include/m2ae.h")).unwrap();
    let exported: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exported.len() >= 20, "{exported:?}");
    for name in &exported {
        assert!(header.contains(&format!(" {name}(")) || header.contains(&format!("*{name}(")), "{name} missing");
    }
    for ty in
        ["M2AE_STATUS_OK", "M2AE_SOURCE_PAIRED", "M2AE_DIRECTION_PPG_TO_ECG", "typedef struct M2aeModel M2aeModel"]
    {
        assert!(header.contains(ty), "{ty} missing");
    }
}
