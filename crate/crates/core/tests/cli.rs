use std::path::Path;

use clap::Parser;
use icarus::cli::{execute, sha256_hex, Cli, RunManifest, MANIFEST_FILE};

const SMALL_SIM: &str = r#"
[sim]
qps = [0.5]

[sim.workload]
requests = 6
turns = { min = 2, max = 4 }
"#;

fn run(args: &[&str]) -> (i32, String) {
    let cli = Cli::try_parse_from(std::iter::once("icarus").chain(args.iter().copied())).unwrap();
    let mut log = Vec::new();
    let code = execute(&cli, &mut log).unwrap();
    (code, String::from_utf8(log).unwrap())
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

#[test]
fn verify_passes_and_injection_fails_the_kv_suite() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ok");
    let (code, log) = run(&["verify", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{log}");
    assert_eq!(log.matches("PASS").count(), 5);

    let bad = tmp.path().join("bad");
    let (code, log) = run(&["verify", "--inject-kv-adapter", "--out", bad.to_str().unwrap()]);
    assert_eq!(code, 1);
    let line = log.lines().find(|l| l.contains("kv_identity")).unwrap();
    assert!(line.starts_with("FAIL") && line.contains("case 0"), "{line}");
}

#[test]
fn verify_summary_is_stable_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let hash = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let (_, log) = run(&["verify", "--seed", seed, "--out", out.to_str().unwrap()]);
        log.lines()
            .find(|l| l.starts_with("summary sha256"))
            .unwrap()
            .to_string()
    };
    assert_eq!(hash("a", "3"), hash("b", "3"));
    assert_ne!(hash("c", "3"), hash("d", "4"));
}

#[test]
fn zero_steps_give_header_only_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    let (code, _) = run(&["train", "--steps", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    for mode in ["icarus", "conventional"] {
        let csv = std::fs::read_to_string(out.join(format!("loss_{mode}.csv"))).unwrap();
        assert_eq!(csv, "step,mode,loss\n");
    }
}

#[test]
fn unknown_corpus_rule_names_the_valid_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[train.corpus]\nrule = \"reverse\"\n");
    let cli = Cli::try_parse_from(["icarus", "train", "--config", &cfg, "--out", "unused"]).unwrap();
    let err = execute(&cli, &mut Vec::new()).unwrap_err().to_string();
    assert!(
        err.contains("reverse") && err.contains("copy") && err.contains("mod_add"),
        "{err}"
    );
}

#[test]
fn invalid_mode_is_a_usage_error() {
    for sub in ["sim", "train"] {
        let err = Cli::try_parse_from(["icarus", sub, "--mode", "fast"]).unwrap_err();
        assert_eq!(err.kind(), clap::error::ErrorKind::ValueValidation);
    }
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_icarus"))
        .args(["sim", "--mode", "fast"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
}

#[test]
fn single_agent_sim_columns_match() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_SIM);
    let out = tmp.path().join("s");
    run(&["sim", "--config", &cfg, "--agents", "1", "--out", out.to_str().unwrap()]);
    let csv = std::fs::read_to_string(out.join("sim.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].replacen("baseline", "icarus", 1), rows[1]);
}

#[test]
fn flags_override_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_SIM);
    let out = tmp.path().join("s");
    run(&[
        "sim",
        "--config",
        &cfg,
        "--qps",
        "0.25,2",
        "--mode",
        "icarus",
        "--eviction",
        "swap",
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(out.join("sim.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r[1] == "icarus" && r[2] == "swap"));
    assert_eq!((rows[0][4], rows[1][4]), ("0.250000", "2.000000"));
}

#[test]
fn manifest_hashes_every_output_and_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_SIM);
    let out = tmp.path().join("s");
    run(&["sim", "--config", &cfg, "--seed", "9", "--out", out.to_str().unwrap()]);
    let m = manifest(&out);
    assert_eq!(m.subcommand, "sim");
    assert_eq!(m.seed, Some(9));
    assert_eq!(m.inputs[0].sha256, sha256_hex(SMALL_SIM.as_bytes()));
    let names: Vec<&str> = m.outputs.iter().map(|a| a.path.as_str()).collect();
    assert_eq!(names, ["config.json", "sim.csv", "summary.json"]);
    for a in &m.outputs {
        assert_eq!(a.sha256, sha256_hex(&std::fs::read(out.join(&a.path)).unwrap()));
    }
}
