use std::fs;
use std::path::Path;
use std::process::{Command, Output};

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
fn datagen_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = activecq(&["datagen", "--gen", "visualization", "--n", "10", "--seed", "7", "--out", "a.csv"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert_eq!(csv.lines().next().unwrap(), "a,z_1,s_1,s_2,y");
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("a.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["generator"], "visualization");
    assert_eq!(meta["seed"], 7);

    activecq(&["datagen", "--gen", "visualization", "--n", "10", "--seed", "7", "--out", "b.csv"], d);
    assert_eq!(csv, fs::read_to_string(d.join("b.csv")).unwrap());

    let sim = activecq(&["datagen", "--gen", "simulation", "--n", "20", "--out", "sim.csv"], d);
    assert_eq!(code(&sim), 0);
    let header = fs::read_to_string(d.join("sim.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), "a,z_1,s_1,s_2,s_3,s_4,y");
    let meta = fs::read_to_string(d.join("sim.meta.json")).unwrap();
    assert!(meta.contains("spec_v1"));
}

#[test]
fn datagen_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&activecq(&["datagen", "--gen", "unknown", "--n", "3"], dir.path())), 2);
    assert_eq!(code(&activecq(&["datagen", "--gen", "visualization", "--mode", "binary"], dir.path())), 2);
    assert_eq!(code(&activecq(&["datagen", "--gen", "semi_synthetic"], dir.path())), 2);
    assert_eq!(code(&activecq(&["frobnicate"], dir.path())), 2);
}

#[test]
fn datagen_write_failure_is_io() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blocker"), "").unwrap();
    let out = activecq(&["datagen", "--gen", "visualization", "--n", "5", "--out", "blocker/x.csv"], dir.path());
    assert_eq!(code(&out), 3);
}

#[test]
fn datagen_uses_output_env() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_activecq"))
        .args(["datagen", "--gen", "simulation", "--n", "5", "--seed", "3"])
        .current_dir(dir.path())
        .env("ACTIVECQ_OUT", "envout")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("envout/simulation_n5_seed3.csv").exists());
}

const SMALL_RUN: &str = r#"{
    "cq_kind": "cate",
    "generator": "visualization",
    "strategies": ["random", "tvr_cme"],
    "seeds": [0, 1],
    "budget": 20,
    "n": 120,
    "oracle_samples": 20000
}"#;

#[test]
fn run_writes_results_and_guards_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = write(d, "run.json", SMALL_RUN);
    let out = activecq(&["run", &config, "--out", "res"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let aggregate = fs::read_to_string(d.join("res/aggregate.csv")).unwrap();
    let mut lines = aggregate.lines();
    assert_eq!(
        lines.next().unwrap(),
        "strategy,round,labeled,mean_sqrt_amse,se_sqrt_amse,n_trials,aborted"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows.iter().filter(|r| r.starts_with("random,")).count(), 5);
    assert_eq!(rows.iter().filter(|r| r.starts_with("tvr_cme,")).count(), 5);
    assert!(rows[4].starts_with("random,4,40,"));

    let trial = fs::read_to_string(d.join("res/trials/tvr_cme_seed1.csv")).unwrap();
    assert_eq!(
        trial.lines().next().unwrap(),
        "strategy,cq_kind,seed,round,labeled,sqrt_amse,trace_q,logdet_q,wall_time_s,aborted"
    );
    assert_eq!(trial.lines().count(), 6);

    let effective: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("res/effective_config.json")).unwrap()).unwrap();
    assert_eq!(effective["spec_version"], 1);
    assert_eq!(effective["warm_start"], 20);
    assert_eq!(effective["gp"]["iterations"], 500);

    let again = activecq(&["run", &config, "--out", "res"], d);
    assert_eq!(code(&again), 2);
    let forced = activecq(&["run", &config, "--out", "res", "--force"], d);
    assert_eq!(code(&forced), 0);
    assert_eq!(trial, fs::read_to_string(d.join("res/trials/tvr_cme_seed1.csv")).unwrap());

    let report = activecq(&["report", "res/aggregate.csv", "--out", "wide.csv"], d);
    assert_eq!(code(&report), 0);
    let wide = String::from_utf8(report.stdout).unwrap();
    assert_eq!(wide.lines().next().unwrap(), "round,labeled,random,tvr_cme");
    assert_eq!(wide.lines().count(), 6);
    assert_eq!(wide, fs::read_to_string(d.join("wide.csv")).unwrap());
}

#[test]
fn run_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let unknown = write(d, "u.json", r#"{"cq_kind":"cate","generator":"visualization","foo":1}"#);
    let out = activecq(&["run", &unknown, "--out", "x"], d);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("foo"));
    let budget = write(d, "b.json", r#"{"cq_kind":"cate","generator":"visualization","budget":7}"#);
    let out = activecq(&["run", &budget, "--out", "x"], d);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget"));
    let version = write(d, "v.json", r#"{"spec_version":3,"cq_kind":"cate","generator":"visualization"}"#);
    assert_eq!(code(&activecq(&["run", &version, "--out", "x"], d)), 2);
    assert!(!d.join("x").exists());
}

#[test]
fn aborted_trials_exit_4_with_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = write(
        d,
        "semi.json",
        r#"{"cq_kind":"ate","generator":"semi_synthetic","covariates":"missing.csv","seeds":[0,1],
            "strategies":["random"],"warm_start":10,"budget":10}"#,
    );
    let out = activecq(&["run", &config, "--out", "res"], d);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("res/aggregate.csv").exists());
    let trial = fs::read_to_string(d.join("res/trials/random_seed0.csv")).unwrap();
    assert_eq!(trial.lines().count(), 1);
}

#[test]
fn semisynthetic_run_from_covariates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut csv = String::from("c_age,c_income,b_female,treatment\n");
    for i in 0..120 {
        let x = i as f64 / 120.0;
        csv += &format!("{},{},{},{}\n", 20.0 + 40.0 * x, (7.0 * x).sin(), i % 3 == 0, u8::from(i % 2 == 0));
    }
    write(d, "cov.csv", &csv.replace("true", "1").replace("false", "0"));
    let config = write(
        d,
        "semi.json",
        r#"{"cq_kind":"att","generator":"semi_synthetic","covariates":"cov.csv","seeds":[0],
            "strategies":["ig_cme","random"],"warm_start":20,"budget":10}"#,
    );
    let out = activecq(&["run", &config, "--out", "res"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let agg = fs::read_to_string(d.join("res/aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 2 * 3);
}

#[test]
fn report_rejects_mismatched_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let head = "strategy,round,labeled,mean_sqrt_amse,se_sqrt_amse,n_trials,aborted\n";
    write(d, "a.csv", &format!("{head}random,0,20,0.3,0.01,2,0\nrandom,1,25,0.2,0.01,2,0\n"));
    write(d, "b.csv", &format!("{head}tvr_cme,0,20,0.3,0.01,2,0\ntvr_cme,2,30,0.1,0.01,2,0\n"));
    write(d, "c.csv", "strategy,round\nrandom,0\n");
    let out = activecq(&["report", "a.csv", "b.csv"], d);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("round 1"));
    assert_eq!(code(&activecq(&["report", "c.csv"], d)), 2);
    assert_eq!(code(&activecq(&["report", "nope.csv"], d)), 3);
}
