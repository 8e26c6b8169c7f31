use std::process::{Command, Output};

use serde_json::Value;

use finslerlab_cli::report::validate_json;

fn finslerlab(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_finslerlab"))
        .args(args)
        .env("FINSLERLAB_THREADS", threads)
        .output()
        .expect("binary runs")
}

fn report(out: &Output) -> Value {
    let v: Value = serde_json::from_slice(&out.stdout).expect("stdout is JSON");
    validate_json(&v).unwrap();
    v
}

fn without_clock(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("wall_clock_ms");
    v
}

#[test]
fn bl_of_linf_at_origin() {
    let out = finslerlab(&["bl", "--scene", "linf2d", "--point", "0,0"], "1");
    assert_eq!(out.status.code(), Some(0));
    let v = report(&out);
    let g = &v["payload"]["g_bl"];
    for (i, j, want) in [(0, 0, 0.75), (1, 1, 0.75), (0, 1, 0.0)] {
        assert!((g[i][j].as_f64().unwrap() - want).abs() <= 1e-3, "{g}");
    }
}

#[test]
fn berwald_on_ell4_product_passes() {
    let out = finslerlab(&["berwald", "--scene", "sphere-x-line-ell4", "--tol", "1e-6"], "1");
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report(&out)["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true));
}

#[test]
fn reports_are_identical_across_thread_counts() {
    for args in [
        &["holonomy", "--scene", "sphere-x-line", "--point", "1.1,0.4,-0.3"][..],
        &["fried", "--scene", "punctured-plane", "--samples", "3"][..],
        &["bl", "--scene", "l1-2d", "--point", "0,0", "--backend", "monte-carlo", "--samples", "20000"][..],
    ] {
        let a = finslerlab(args, "1");
        let b = finslerlab(args, "2");
        assert_eq!(a.status.code(), b.status.code(), "{args:?}");
        assert_eq!(without_clock(report(&a)), without_clock(report(&b)), "{args:?}");
    }
}

#[test]
fn suite_twice_gives_identical_reports() {
    let a = finslerlab(&["suite", "--seed", "42"], "1");
    let b = finslerlab(&["suite", "--seed", "42"], "2");
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(b.status.code(), Some(0));
    let (ra, rb) = (report(&a), report(&b));
    assert_eq!(ra["checks"].as_array().unwrap().len(), rb["checks"].as_array().unwrap().len());
    assert_eq!(without_clock(ra).to_string(), without_clock(rb).to_string());
}

#[test]
fn split_csv_has_the_scan_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.csv");
    let out = finslerlab(
        &["split", "--scene", "line-x-bumped-punctured", "--samples", "4", "--format", "csv", "--out", path.to_str().unwrap()],
        "1",
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x1,x2,x3,R1,R2,witness_angle,verdict"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn csv_without_a_table_is_a_validation_error() {
    let out = finslerlab(&["bl", "--scene", "linf2d", "--point", "0,0", "--format", "csv"], "1");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_scene_file_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.scene");
    std::fs::write(&path, "[scene]\nname = bad\ndim = 2\n[metric]\ng11 = 1 +\ng22 = 1\n").unwrap();
    let out = finslerlab(&["check-scene", "--scene", path.to_str().unwrap()], "1");
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn check_scene_reports_normalized_text() {
    let out = finslerlab(&["check-scene", "--scene", "hopf-ell4"], "1");
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = report(&out);
    assert!(v["payload"]["normalized"].as_str().unwrap().starts_with("[scene]"));
}

#[test]
fn boundaryless_fried_and_unknown_scene_are_validation_errors() {
    assert_eq!(finslerlab(&["fried", "--scene", "euclidean", "--samples", "1"], "1").status.code(), Some(2));
    assert_eq!(finslerlab(&["bl", "--scene", "no-such-scene"], "1").status.code(), Some(2));
    assert_eq!(finslerlab(&["bl", "--bogus"], "1").status.code(), Some(2));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let out = finslerlab(&["bl", "--scene", "linf2d", "--point", "0,0", "--out", "/nonexistent-dir/x.json"], "1");
    assert_eq!(out.status.code(), Some(3));
}
