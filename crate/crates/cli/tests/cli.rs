//! End-to-end command-line tests: exit codes, diagnostics with positions,
//! transport equivalence at the process level, counter export, and the
//! dual-run fusion comparison.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tla() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tla"))
}

fn scripts_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts")
}

fn temp_dir(label: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tla-cli-{label}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn hello_prints_three_and_exits_zero() {
    let out = tla().arg(scripts_dir().join("hello.tla")).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "3");
}

#[test]
fn malformed_script_exits_nonzero_with_line_and_col() {
    let dir = temp_dir("badsyntax");
    let path = dir.join("bad.tla");
    std::fs::write(&path, "(add 1").unwrap();
    let out = tla().arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("1:1"), "diagnostic must carry line:col, got {err}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn unknown_primitive_is_a_compile_error() {
    let dir = temp_dir("unknown");
    let path = dir.join("u.tla");
    std::fs::write(&path, "(frobnicate 1)").unwrap();
    let out = tla().arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("frobnicate"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn runtime_error_exits_three() {
    let dir = temp_dir("runtime");
    let path = dir.join("r.tla");
    std::fs::write(&path, "(dot (constant 1 2 2) (constant 1 3 3))").unwrap();
    let out = tla().arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn script_value_is_identical_across_locality_counts() {
    // Architecture-agnostic contract: byte-identical script, byte-identical
    // stdout at P=1 and P=4.
    let script = scripts_dir().join("distributed_sum.tla");
    let mut outputs = Vec::new();
    for p in ["1", "4"] {
        let out = tla()
            .arg(&script)
            .args(["--localities", p, "--seed", "9"])
            .output()
            .unwrap();
        assert!(out.status.success(), "P={p}: {}", stderr(&out));
        outputs.push(stdout(&out));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn inproc_and_socket_transports_print_the_same_value() {
    let script = scripts_dir().join("spatial_conv.tla");
    let inproc = tla()
        .arg(&script)
        .args(["--localities", "2", "--seed", "4"])
        .output()
        .unwrap();
    assert!(inproc.status.success(), "{}", stderr(&inproc));
    let socket = tla()
        .arg(&script)
        .args([
            "--localities",
            "2",
            "--seed",
            "4",
            "--transport",
            "socket",
            "--spawn-local",
            "--port",
            "7731",
        ])
        .output()
        .unwrap();
    assert!(socket.status.success(), "{}", stderr(&socket));
    assert_eq!(stdout(&inproc), stdout(&socket));
}

#[test]
fn counters_export_and_reload() {
    let dir = temp_dir("counters");
    let path = dir.join("counters.csv");
    let out = tla()
        .arg(scripts_dir().join("distributed_sum.tla"))
        .args(["--localities", "2", "--counters"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let report = tla_core::counters::CounterReport::read_file(&path).unwrap();
    assert!(report.get("envelopes_sent") >= 1);
    assert!(report.get("frames_sent") <= report.get("envelopes_sent"));
    assert!(report.get("wall_time_ns") > 0);
    assert!(report.get("prim.tile.calls") >= 2);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn fusion_dual_run_fewer_frames_same_envelopes() {
    let dir = temp_dir("fusion");
    let script = dir.join("chatty.tla");
    // Many small collectives: every one produces envelopes below the fusion
    // threshold.
    let mut src = String::new();
    for i in 0..30 {
        src.push_str(&format!("(define c{i} (all-reduce (random 4)))\n"));
    }
    src.push_str("(sum (all-reduce (random 4)))");
    std::fs::write(&script, src).unwrap();

    let run = |fusion_bytes: &str, path: &Path| {
        let out = tla()
            .arg(&script)
            .args(["--localities", "3", "--fusion-bytes", fusion_bytes, "--counters"])
            .arg(path)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        tla_core::counters::CounterReport::read_file(path).unwrap()
    };
    let on = run("65536", &dir.join("on.csv"));
    let off = run("0", &dir.join("off.csv"));
    assert_eq!(
        on.get("envelopes_sent"),
        off.get("envelopes_sent"),
        "fusion must not change envelope count"
    );
    assert!(
        on.get("frames_sent") < off.get("frames_sent"),
        "fusion on must send fewer frames: {} vs {}",
        on.get("frames_sent"),
        off.get("frames_sent")
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn resilience_flag_accepts_both_policies() {
    let script = scripts_dir().join("resilient_sum.tla");
    for policy in ["replay:2", "replicate:3:checksum"] {
        let out = tla().arg(&script).args(["--resilience", policy]).output().unwrap();
        assert!(out.status.success(), "{policy}: {}", stderr(&out));
        assert_eq!(stdout(&out).trim(), "8386560", "{policy}");
    }
    let out = tla().arg(&script).args(["--resilience", "bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_smoke_produces_csv() {
    let dir = temp_dir("bench");
    let path = dir.join("bench.csv");
    let out = tla()
        .args([
            "--bench", "cnn4", "--batch", "8", "--plist", "1,2", "--repeats", "3", "--bench-out",
        ])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = tla_core::runtime::rows_from_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.mean_seconds > 0.0));
    // stdout carries the same CSV.
    assert_eq!(tla_core::runtime::rows_from_csv(&stdout(&out)).unwrap(), rows);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn grain_auto_calibrates() {
    let out = tla()
        .arg(scripts_dir().join("hello.tla"))
        .args(["--grain", "auto"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("calibrated grain threshold"));
    assert_eq!(stdout(&out).trim(), "3");
}
