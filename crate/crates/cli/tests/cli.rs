use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wvt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wvt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn wvt")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_tiny(dir: &Path, n: usize) {
    let o = wvt(&[
        "gen-data",
        "--config",
        "tiny",
        "--n-clips",
        &n.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn selftest_passes() {
    let o = wvt(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&wvt(&["train", "--bogus"])), 2);
    assert_eq!(code(&wvt(&["no-such-command"])), 2);
    assert_eq!(code(&wvt(&["sweep", "--data", "x", "--axis", "window"])), 2);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = wvt(&["bench", "--config", "tiny", "--set", "nope=1", "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
    assert_eq!(code(&wvt(&["bench", "--config", "huge", "--out", out])), 1);
}

#[test]
fn gradcheck_tiny_passes() {
    let o = wvt(&["gradcheck", "--config", "tiny"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("max rel err"));
}

#[test]
fn gradcheck_fails_on_impossible_tolerance() {
    let o = wvt(&["gradcheck", "--config", "gradcheck", "--tolerance", "0"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny(&data, 20);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = wvt(&[
            "train",
            "--config",
            "tiny",
            "--set",
            "epochs=1",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in [
        "map.csv",
        "map_back_row.csv",
        "detections.csv",
        "train_log.csv",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(a.join("checkpoint").exists());

    let eval_out = dir.path().join("eval");
    let o = wvt(&[
        "eval",
        "--config",
        "tiny",
        "--detections",
        a.join("detections.csv").to_str().unwrap(),
        "--gt",
        data.join("gt.csv").to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("frame-mAP@0.5"));

    let o = wvt(&[
        "dump-attn",
        "--config",
        "tiny",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        a.join("checkpoint").to_str().unwrap(),
        "--out",
        dir.path().join("attn").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("attn/windows.csv").exists());
}

#[test]
fn sweep_records_invalid_settings() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny(&data, 12);
    let out = dir.path().join("sweep");
    let o = wvt(&[
        "sweep",
        "--config",
        "tiny",
        "--set",
        "epochs=1",
        "--data",
        data.to_str().unwrap(),
        "--axis",
        "window",
        "--values",
        "3,5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep_window.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "window,map,back_row_map,status");
    assert!(
        rows[1].starts_with("3,") && rows[1].ends_with(",ok"),
        "{csv}"
    );
    assert!(rows[2].starts_with("5,,,invalid"), "{csv}");
}

#[test]
fn stats_and_bench_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny(&data, 6);
    let out = dir.path().join("stats");
    let o = wvt(&[
        "stats",
        "--gt",
        data.join("gt.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_dir(&out).unwrap().count() > 0);

    let out = dir.path().join("bench");
    let o = wvt(&[
        "bench",
        "--config",
        "tiny",
        "--iters",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert!(csv.starts_with("config,params,flops,forward_ms,threads\ntiny,"));
    assert!(csv.contains("\nfull,172157690,"), "{csv}");
}
