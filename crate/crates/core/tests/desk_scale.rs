//! Kept in its own test binary so the timing is not shared with other tests.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn activecq(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_activecq"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ACTIVECQ_OUT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn minimal_config_round_trip_is_desk_scale() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let start = Instant::now();
    assert_eq!(code(&activecq(&["datagen", "--gen", "visualization", "--n", "500", "--out", "data.csv"], d)), 0);
    let config = write(d, "min.json", r#"{"cq_kind":"cate","generator":"visualization"}"#);
    let run = activecq(&["run", &config, "--out", "res"], d);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let report = activecq(&["report", "res/aggregate.csv"], d);
    assert_eq!(code(&report), 0);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "round trip took {secs:.0}s");
    // 180 / 5 rounds plus the warm-start row.
    assert_eq!(String::from_utf8(report.stdout).unwrap().lines().count(), 1 + 37);
}
