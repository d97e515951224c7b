use std::ffi::{CStr, CString};
use std::ptr;

use prognosis::embedding::HashEmbedder;
use prognosis::retrieval::{build_index, parse_corpus, save_index, HnswParams, IndexBackend};
use prognosis_ffi::*;

const CASE: &str = include_str!("../../core/fixtures/synthetic8/case-03.json");

fn take(p: *mut std::ffi::c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { prognosis_string_free(p) };
    s
}

fn last_error() -> String {
    let p = prognosis_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn predict_round_trip_matches_library() {
    let mut engine = ptr::null_mut();
    assert_eq!(unsafe { prognosis_engine_new(ptr::null(), &mut engine) }, PrognosisStatus::Ok);
    let case = CString::new(CASE).unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { prognosis_predict(engine, case.as_ptr(), ptr::null(), -1, &mut out) };
    assert_eq!(status, PrognosisStatus::Ok);
    let json: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
    assert_eq!(json["label"], "excellent");
    assert!(prognosis_last_error().is_null());

    let variant = CString::new("no-rag").unwrap();
    let status = unsafe { prognosis_predict(engine, case.as_ptr(), variant.as_ptr(), 5, &mut out) };
    assert_eq!(status, PrognosisStatus::Ok);
    let json: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
    assert_eq!(json["retrieval_k"], 0);
    unsafe { prognosis_engine_free(engine) };
}

#[test]
fn errors_map_to_status_codes() {
    let mut engine = ptr::null_mut();
    assert_eq!(unsafe { prognosis_engine_new(ptr::null(), &mut engine) }, PrognosisStatus::Ok);
    let mut out = ptr::null_mut();

    let bad = CString::new("{\"patient_id\": 3}").unwrap();
    assert_eq!(unsafe { prognosis_predict(engine, bad.as_ptr(), ptr::null(), -1, &mut out) }, PrognosisStatus::Validation);
    assert!(out.is_null());
    assert!(last_error().contains("case bundle"));

    let case = CString::new(CASE).unwrap();
    let variant = CString::new("half").unwrap();
    assert_eq!(
        unsafe { prognosis_predict(engine, case.as_ptr(), variant.as_ptr(), -1, &mut out) },
        PrognosisStatus::InvalidArgument
    );
    assert_eq!(unsafe { prognosis_predict(ptr::null(), case.as_ptr(), ptr::null(), -1, &mut out) }, PrognosisStatus::NullPointer);
    assert_eq!(unsafe { prognosis_predict(engine, case.as_ptr(), ptr::null(), -1, ptr::null_mut()) }, PrognosisStatus::NullPointer);

    let missing = CString::new("/nonexistent/prognosis.toml").unwrap();
    let mut other = ptr::null_mut();
    assert_ne!(unsafe { prognosis_engine_new(missing.as_ptr(), &mut other) }, PrognosisStatus::Ok);
    assert!(other.is_null());
    unsafe { prognosis_engine_free(engine) };
    unsafe { prognosis_engine_free(ptr::null_mut()) };
    unsafe { prognosis_string_free(ptr::null_mut()) };
}

#[test]
fn scales_and_metrics() {
    let mut label = -1;
    for (score, want) in [(0, PROGNOSIS_LABEL_POOR), (20, 0), (21, PROGNOSIS_LABEL_FAIR), (60, PROGNOSIS_LABEL_GOOD), (61, PROGNOSIS_LABEL_EXCELLENT), (80, 3)] {
        assert_eq!(unsafe { prognosis_lefs_label(score, &mut label) }, PrognosisStatus::Ok);
        assert_eq!(label, want, "LEFS {score}");
    }
    assert_eq!(unsafe { prognosis_lefs_label(81, &mut label) }, PrognosisStatus::InvalidArgument);
    for (score, want) in [(9, 0), (10, 1), (17, 1), (18, 2), (25, 2), (26, 3), (30, 3)] {
        assert_eq!(unsafe { prognosis_enneking_label(score, &mut label) }, PrognosisStatus::Ok);
        assert_eq!(label, want, "Enneking {score}");
    }
    assert_eq!(unsafe { prognosis_enneking_label(-1, &mut label) }, PrognosisStatus::InvalidArgument);

    let reference = [0, 1, 2, 3, 0, 1, 2, 3];
    let predicted = [0, 1, 2, 3, 0, 2, 2, 3];
    let mut f1 = 0.0;
    assert_eq!(unsafe { prognosis_macro_f1(reference.as_ptr(), predicted.as_ptr(), 8, &mut f1) }, PrognosisStatus::Ok);
    assert!((f1 - 13.0 / 15.0).abs() < 1e-12);
    assert_eq!(unsafe { prognosis_macro_f1(reference.as_ptr(), predicted.as_ptr(), 0, &mut f1) }, PrognosisStatus::InvalidArgument);
    let bad = [7];
    assert_eq!(unsafe { prognosis_macro_f1(bad.as_ptr(), bad.as_ptr(), 1, &mut f1) }, PrognosisStatus::InvalidArgument);

    let scores = [0.0f64, 0.0, 0.0, 0.0];
    let mut c = 0.0;
    assert_eq!(unsafe { prognosis_confidence(scores.as_ptr(), 2, &mut c) }, PrognosisStatus::Ok);
    assert!((c - 0.25).abs() < 1e-12);
    let scores = [f64::NAN, 0.0, 0.0, 0.0];
    assert_eq!(unsafe { prognosis_confidence(scores.as_ptr(), 2, &mut c) }, PrognosisStatus::InvalidArgument);

    let mut schema = ptr::null_mut();
    assert_eq!(unsafe { prognosis_schema_json(&mut schema) }, PrognosisStatus::Ok);
    let schema: Vec<serde_json::Value> = serde_json::from_str(&take(schema)).unwrap();
    assert_eq!(schema.len(), 12);
}

#[test]
fn index_load_and_search() {
    let corpus = "{\"id\":\"a\",\"category\":\"clinical_guideline\",\"title\":\"Implant retention\",\"text\":\"Retained hardware raises recurrence risk.\",\"source\":\"t\"}\n\
                  {\"id\":\"b\",\"category\":\"outcome_study\",\"title\":\"Limb function\",\"text\":\"Functional scores improve after union.\",\"source\":\"t\"}\n";
    let entries = parse_corpus(corpus.as_bytes()).unwrap();
    let embedder = HashEmbedder::new(64).unwrap();
    let index = build_index(entries, &embedder, IndexBackend::Exact, HnswParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("idx.bin");
    save_index(&index, &path).unwrap();

    let mut handle = ptr::null_mut();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { prognosis_index_load(cpath.as_ptr(), &mut handle) }, PrognosisStatus::Ok);
    let mut len = 0;
    assert_eq!(unsafe { prognosis_index_len(handle, &mut len) }, PrognosisStatus::Ok);
    assert_eq!(len, 2);
    let q = CString::new("retained hardware recurrence").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { prognosis_index_search(handle, q.as_ptr(), 1, &mut out) }, PrognosisStatus::Ok);
    let hits: Vec<serde_json::Value> = serde_json::from_str(&take(out)).unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0]["entry_id"], "a");
    unsafe { prognosis_index_free(handle) };

    let missing = CString::new(dir.path().join("none.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { prognosis_index_load(missing.as_ptr(), &mut handle) }, PrognosisStatus::Io);
    assert!(handle.is_null());
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not an index").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { prognosis_index_load(junk.as_ptr(), &mut handle) }, PrognosisStatus::InvalidArgument);
}

#[test]
fn invalid_utf8_is_rejected() {
    let bytes = CString::new(vec![0xffu8, 0xfe]).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { prognosis_index_load(bytes.as_ptr(), &mut handle) }, PrognosisStatus::InvalidUtf8);
}
