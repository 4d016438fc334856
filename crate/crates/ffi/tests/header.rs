//! Compiles and runs a small C program against the generated header and static library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "unlearn_forge.h"

int main(void) {
    UfTable *t = NULL;
    if (uf_table_default(7, &t) != UF_STATUS_OK) return 1;
    double pts[4] = {2.0, 2.0, -2.0, -2.0};
    size_t cls[2];
    if (uf_table_classify(t, pts, 2, cls) != UF_STATUS_OK) return 2;
    if (cls[0] != 0 || cls[1] != 1) return 3;
    double gu[2] = {1.0, -1.0}, gr[2] = {0.0, 1.0}, g[2];
    if (uf_surgery(gu, gr, 2, 1.0, g) != UF_STATUS_OK || g[0] != 1.0 || g[1] != 0.0) return 4;
    if (uf_table_default(7, NULL) != UF_STATUS_NULL_POINTER) return 5;
    char msg[64];
    uf_last_error_message(msg, sizeof msg);
    if (strstr(msg, "null") == NULL) return 6;
    uf_table_free(t);
    printf("ok %s\n", uf_version());
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    let header_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(header_dir.join("unlearn_forge.h").exists());
    let lib = target_dir().join("libunlearn_forge_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!(
            "skipping: no C compiler or static library at {}",
            lib.display()
        );
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
