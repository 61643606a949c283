use std::fs;
use std::path::Path;

use tofa::cli::main_with_args;

fn tofa(wd: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["tofa".to_string(), "--workdir".into(), wd.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    main_with_args(argv)
}

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let code = tofa(
        dir.path(),
        &["synth", "--classes", "6", "--dim", "8", "--per-class", "40", "--mean-scale", "1.5", "--out", "data.tfe", "--prompts-out", "bank.tfp"],
    );
    assert_eq!(code, 0);
    dir
}

const RUN: &[&str] = &["run", "--train", "data.tfe", "--prompts", "bank.tfp", "--clients", "3", "--shots", "5"];

fn run_with(wd: &Path, extra: &[&str]) -> i32 {
    let args: Vec<&str> = RUN.iter().chain(extra).copied().collect();
    tofa(wd, &args)
}

#[test]
fn run_writes_report_table_and_timings() {
    let dir = fixture();
    assert_eq!(run_with(dir.path(), &["--alpha", "1.0", "--out", "out/report.json"]), 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["alpha"], 1.0);
    assert_eq!(report["config"]["partition"]["clients"], 3);
    assert_eq!(report["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(report["messages"]["visual_uploads"], 3);
    assert_eq!(report["messages"]["broadcasts"], 1);
    assert!(report.get("timings").is_none());
    let table = fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3 * 3);
    assert!(dir.path().join("out/report.timings.json").exists());
}

#[test]
fn embedded_config_reproduces_the_report() {
    let dir = fixture();
    let wd = dir.path();
    assert_eq!(
        run_with(wd, &["--alpha", "0.25", "--partition", "dirichlet:0.5", "--seed", "7", "--out", "a.json"]),
        0
    );
    let code = tofa(
        wd,
        &["run", "--config", "a.json", "--train", "data.tfe", "--prompts", "bank.tfp", "--out", "b.json"],
    );
    assert_eq!(code, 0);
    assert_eq!(fs::read(wd.join("a.json")).unwrap(), fs::read(wd.join("b.json")).unwrap());

    // thread count does not change the output
    assert_eq!(
        tofa(wd, &["--threads", "1", "run", "--config", "a.json", "--train", "data.tfe", "--prompts", "bank.tfp", "--out", "c.json"]),
        0
    );
    assert_eq!(fs::read(wd.join("a.json")).unwrap(), fs::read(wd.join("c.json")).unwrap());
}

#[test]
fn toml_config_with_flag_overrides() {
    let dir = fixture();
    let wd = dir.path();
    fs::write(
        wd.join("cfg.toml"),
        "alpha = 0.5\ntau_t = 0.25\ncalibration = false\n\n[partition]\nscheme = \"iid\"\nclients = 2\n",
    )
    .unwrap();
    let code = tofa(
        wd,
        &["run", "--config", "cfg.toml", "--alpha", "0.75", "--train", "data.tfe", "--prompts", "bank.tfp", "--out", "r.json"],
    );
    assert_eq!(code, 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(wd.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["alpha"], 0.75);
    assert_eq!(report["config"]["tau_t"], 0.25);
    assert_eq!(report["config"]["calibration"], false);
    assert_eq!(report["config"]["partition"]["scheme"], "iid");
    assert_eq!(report["clients"].as_array().unwrap().len(), 2);

    fs::write(wd.join("bad.toml"), "alpha = 0.5\nbogus = 1\n").unwrap();
    let code = tofa(
        wd,
        &["run", "--config", "bad.toml", "--train", "data.tfe", "--prompts", "bank.tfp", "--out", "r.json"],
    );
    assert_eq!(code, 1);
}

#[test]
fn exit_codes() {
    let dir = fixture();
    let wd = dir.path();
    assert_eq!(run_with(wd, &["--alpha", "1.5", "--out", "x.json"]), 1);
    assert_eq!(run_with(wd, &["--alpha", "-0.1", "--out", "x.json"]), 1);
    assert_eq!(run_with(wd, &["--frobnicate", "--out", "x.json"]), 1);
    assert_eq!(tofa(wd, &["run", "--train", "data.tfe"]), 1);
    assert_eq!(tofa(wd, &["run", "--train", "missing.tfe", "--prompts", "bank.tfp", "--out", "x.json"]), 2);
    fs::write(wd.join("junk.tfe"), b"not an embedding file").unwrap();
    assert_eq!(tofa(wd, &["run", "--train", "junk.tfe", "--prompts", "bank.tfp", "--out", "x.json"]), 2);
    // class-split needs at least as many classes as clients
    assert_eq!(
        tofa(wd, &["run", "--train", "data.tfe", "--prompts", "bank.tfp", "--clients", "9", "--out", "x.json"]),
        1
    );
    assert!(!wd.join("x.json").exists());
    assert_eq!(tofa::Error::SingularCovariance { min_eigenvalue: -1.0 }.exit_code(), 3);
    assert_eq!(tofa(wd, &["--help"]), 0);
}

#[test]
fn partition_then_eval_and_stats() {
    let dir = fixture();
    let wd = dir.path();
    assert_eq!(
        tofa(wd, &["partition", "--train", "data.tfe", "--out", "parts", "--clients", "3", "--partition", "iid", "--shots", "4"]),
        0
    );
    for k in 0..3 {
        assert!(wd.join(format!("parts/client_{k:03}/train.tfe")).exists());
    }
    assert!(wd.join("parts/partition.json").exists());
    assert_eq!(tofa(wd, &["eval", "--clients", "parts", "--prompts", "bank.tfp", "--out", "e.json"]), 0);
    assert_eq!(
        tofa(wd, &["stats", "--train", "parts/client_001/train.tfe", "--client-id", "1", "--out", "s.tfs"]),
        0
    );
    let msg = tofa::ClientStatsMessage::load(wd.join("s.tfs")).unwrap();
    assert_eq!(msg.client_id, 1);
    assert_eq!(msg.total_count(), 6 * 4);
}

#[test]
fn report_sweeps_alpha_and_shots() {
    let dir = fixture();
    let wd = dir.path();
    let code = tofa(
        wd,
        &["report", "--train", "data.tfe", "--prompts", "bank.tfp", "--out", "sweep.csv", "--clients", "3", "--alphas", "0,0.5,1", "--shot-grid", "1,4"],
    );
    assert_eq!(code, 0);
    let table = fs::read_to_string(wd.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "sweep,value,visual,text,fused,fused_all_class");
    assert_eq!(rows.len(), 1 + 3 + 2);
    assert!(rows[1].starts_with("alpha,0,") && rows[5].starts_with("shots,4,"));
}

#[test]
fn per_client_prompt_directory_with_prefilter() {
    let dir = fixture();
    let wd = dir.path();
    fs::create_dir(wd.join("banks")).unwrap();
    for k in 0..3 {
        fs::copy(wd.join("bank.tfp"), wd.join(format!("banks/client_{k}.tfp"))).unwrap();
    }
    assert_eq!(
        tofa(wd, &["run", "--train", "data.tfe", "--prompts", "banks", "--clients", "3", "--prefilter", "--out", "p.json"]),
        0
    );
    assert_eq!(
        tofa(wd, &["run", "--train", "data.tfe", "--prompts", "banks", "--clients", "4", "--out", "p.json"]),
        2
    );
}
