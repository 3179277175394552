use std::path::Path;
use std::process::{Command, Output};

use online_wpe::eval::{Algorithm, MetricsReport};

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_online-wpe"))
        .current_dir(dir)
        .args(["--log-level", "warn"])
        .args(args)
        .output()
        .unwrap()
}

const SMALL: &[&str] = &["gen-data", "--num", "2", "--secs", "3"];

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(bin(d, &["dereverb", "--bogus"]).status.code(), Some(2));
    assert_eq!(bin(d, &["dereverb", "--input", "missing.wav", "--output", "o.wav"]).status.code(), Some(3));
    std::fs::write(d.join("bad.toml"), "[wpe]\nnot_a_key = 1\n").unwrap();
    assert_eq!(bin(d, &["--config", "bad.toml", "bench"]).status.code(), Some(2));
    std::fs::write(d.join("zero.toml"), "[wpe]\nnum_taps = 0\n").unwrap();
    assert_eq!(bin(d, &["--config", "zero.toml", "bench"]).status.code(), Some(2));

    assert!(bin(d, SMALL).status.success());
    let input = "out/data/seq0000_reverb.wav";
    let no_ckpt = bin(d, &["dereverb", "--input", input, "--output", "o.wav", "--psd-mode", "model"]);
    assert_eq!(no_ckpt.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&no_ckpt.stderr).contains("checkpoint"));
    let short = bin(d, &["evaluate", "--manifest", "out/data/manifest.json", "--init-secs", "30"]);
    assert_eq!(short.status.code(), Some(2));
    let no_target = bin(d, &["dereverb", "--input", input, "--output", "o.wav", "--psd-mode", "oracle"]);
    assert_eq!(no_target.status.code(), Some(2));
}

#[test]
fn outputs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert!(bin(d, &["--output-dir", "a", "gen-data", "--num", "2", "--secs", "3"]).status.success());
    assert!(bin(d, &["--output-dir", "b", "gen-data", "--num", "2", "--secs", "3"]).status.success());
    for f in ["manifest.json", "seq0000_reverb.wav", "seq0001_target_ha.wav"] {
        assert_eq!(read(&format!("a/data/{f}")), read(&format!("b/data/{f}")), "{f}");
    }
    assert!(bin(d, &["--seed", "1", "--output-dir", "c", "gen-data", "--num", "2", "--secs", "3"]).status.success());
    assert_ne!(read("a/data/seq0000_reverb.wav"), read("c/data/seq0000_reverb.wav"));

    for out in ["r1", "r2"] {
        let o = bin(d, &["evaluate", "--manifest", "a/data/manifest.json", "--algorithms", "unprocessed,vanilla-wpe", "--init-secs", "1", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read("r1/report.csv"), read("r2/report.csv"));

    for out in ["v1.wav", "v2.wav"] {
        assert!(bin(d, &["dereverb", "--input", "a/data/seq0000_reverb.wav", "--output", out]).status.success());
    }
    assert_eq!(read("v1.wav"), read("v2.wav"));
    let input = online_wpe::read_wav::<f64>(d.join("a/data/seq0000_reverb.wav")).unwrap();
    let output = online_wpe::read_wav::<f64>(d.join("v1.wav")).unwrap();
    assert_eq!(input.len(), output.len());
    assert_eq!(input.num_channels(), output.num_channels());
}

#[test]
fn evaluate_reports_missing_models_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(bin(d, SMALL).status.success());
    let o = bin(
        d,
        &["evaluate", "--manifest", "out/data/manifest.json", "--algorithms", "vanilla-wpe,dnn-wpe", "--dnn", "nope.json", "--init-secs", "1"],
    );
    assert!(o.status.success());
    let json = std::fs::read_to_string(d.join("out/report/report.json")).unwrap();
    let rep: MetricsReport = serde_json::from_str(&json).unwrap();
    assert!(rep.bucket(Algorithm::VanillaWpe, "all").is_some());
    assert!(rep.bucket(Algorithm::DnnWpe, "all").is_none());
    assert_eq!(rep.errors.len(), 1);
    assert!(rep.errors[0].1.contains("nope.json"));
}

#[test]
fn flag_overrides_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.toml"), "[wpe]\nnum_taps = 6\n").unwrap();
    let taps = |args: &[&str]| {
        let mut all = vec!["--output-dir", "o"];
        all.extend_from_slice(args);
        all.extend_from_slice(&["bench", "--secs", "1"]);
        assert!(bin(d, &all).status.success());
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("o/bench.json")).unwrap()).unwrap();
        v["taps"].as_u64().unwrap()
    };
    assert_eq!(taps(&[]), 10);
    assert_eq!(taps(&["--config", "run.toml"]), 6);
    assert_eq!(taps(&["--config", "run.toml", "--taps", "3"]), 3);
}

#[test]
fn dirac_demo_writes_matrices_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(bin(d, &["demo-dirac", "--out", "dirac"]).status.success());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("dirac/summary.json")).unwrap()).unwrap();
    let tails = v["tail_energy_db"].as_array().unwrap();
    let get = |name: &str| tails.iter().find(|t| t[0] == name).unwrap()[1].as_f64().unwrap();
    assert!(get("vanilla_wpe") < get("reverberant") - 3.0);
    let csv = std::fs::read_to_string(d.join("dirac/reverberant_logspec.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 257);
}

#[test]
fn readme_config_example_parses() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let start = readme.find("```toml\n").unwrap() + 8;
    let block = &readme[start..start + readme[start..].find("```").unwrap()];
    let cfg = online_wpe_cli::config::RunConfig::from_toml_str(block).unwrap();
    assert_eq!(cfg.wpe.num_taps, 10);
    assert_eq!(cfg.data.source_floor_db, Some(-40.0));
}
