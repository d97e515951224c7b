//! Compiles a C program against the generated header and static library.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "prognosis.h"

int main(void) {
    int label = -1;
    if (prognosis_enneking_label(26, &label) != PROGNOSIS_STATUS_OK || label != PROGNOSIS_LABEL_EXCELLENT) return 10;
    if (prognosis_lefs_label(99, &label) != PROGNOSIS_STATUS_INVALID_ARGUMENT) return 11;
    if (prognosis_last_error() == NULL) return 12;
    int ref[4] = {0, 1, 2, 3};
    double f1 = 0.0;
    if (prognosis_macro_f1(ref, ref, 4, &f1) != PROGNOSIS_STATUS_OK || f1 != 1.0) return 13;
    PrognosisEngine *engine = NULL;
    if (prognosis_engine_new(NULL, &engine) != PROGNOSIS_STATUS_OK) return 14;
    const char *bundle = "{\"patient_id\":\"c\",\"documents\":[{\"id\":\"d\",\"modality\":\"ehr_record\",\"text\":\"Laboratory findings: WBC 7.1 x10^9/L.\"}]}";
    char *out = NULL;
    if (prognosis_predict(engine, bundle, "full", -1, &out) != PROGNOSIS_STATUS_OK) {
        fprintf(stderr, "%s\n", prognosis_last_error());
        return 15;
    }
    if (strstr(out, "\"label\"") == NULL) return 16;
    prognosis_string_free(out);
    prognosis_engine_free(engine);
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let lib = target_dir().join("libprognosis_ffi.a");
    let cc = ["cc", "gcc", "clang"].into_iter().find(|c| Command::new(c).arg("--version").output().is_ok());
    let (Some(cc), true) = (cc, lib.exists()) else {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let bin = dir.path().join("smoke");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}
