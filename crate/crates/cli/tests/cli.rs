use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rcl_cli::{parse_summary, run, run_sweep, Command as Cmd, RunConfig};
use rcl_core::constraints::{build_system, check_mechanism};
use rcl_core::model::{validate_instance, RawInstance};
use rcl_core::presets::{random_instance, RandomSpec};
use rcl_core::transform::to_utility_units;

fn rcl(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcl"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn summary_roundtrips_through_check_mechanism() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ["reinsurance_halfline", "reinsurance_wholeline", "log_delegation"] {
        let out = dir.path().join(preset);
        let o = rcl(&["solve", "--preset", preset, "--max-iters", "5000"], &out);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
        let raw: RawInstance = serde_json::from_value(result["instance"].clone()).unwrap();
        let inst = validate_instance(raw).unwrap();
        let uu = to_utility_units(&inst).unwrap();
        let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
        let mech = parse_summary(&summary, inst.n_types(), inst.n_atoms()).unwrap();
        assert!(check_mechanism(&build_system(&uu), &mech, 1e-8).unwrap().feasible, "{preset}");
        assert!(fs::read_to_string(out.join("trace.csv")).unwrap().starts_with("iter,value,max_violation\n"));
    }
}

#[test]
fn oracle_over_cap_reports_the_count() {
    let dir = tempfile::tempdir().unwrap();
    let o = rcl(&["oracle", "--preset", "cara_hedging", "--levels", "5"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    // 5^(6 atoms * 3 types)
    assert!(String::from_utf8_lossy(&o.stderr).contains("3814697265625"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = rcl(&["solve", "--preset", "reinsurance_halfline", "--tol", "1e-300", "--max-iters", "20"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = rcl(&["solve", "--preset", "no_such_preset"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = rcl(&["solve", "--preset", "reinsurance_halfline", "--instance", "x.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = rcl(&["solve", "--instance", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
}

#[test]
fn equivalence_on_an_instance_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inst = random_instance(&mut rng, &RandomSpec::new(2, 3, 2)).unwrap();
    let path = dir.path().join("inst.json");
    fs::write(&path, inst.to_json().unwrap()).unwrap();
    let out = dir.path().join("eq");
    let o = rcl(&["equivalence", "--instance", path.to_str().unwrap(), "--candidates", "5"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(r["result"]["menu_value"], r["result"]["mechanism_value"]);
    assert_eq!(r["result"]["passed"], true);
}

#[test]
fn market_and_ae_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let o = rcl(&["market", "--nodes", "10", "--alpha", "1.0"], &out);
    assert_eq!(o.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    for t in r["result"]["types"].as_array().unwrap() {
        assert!(t["cara_oracle_gap"].as_f64().unwrap() <= 1e-7);
        assert!(t["log_oracle_gap"].as_f64().unwrap() <= 1e-7);
    }
    let out = dir.path().join("a");
    let o = rcl(&["ae-check", "--utility", r#"{"family":"crra","gamma":0.5}"#], &out);
    assert_eq!(o.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(r["result"]["pass"], true);
}

#[test]
fn sweep_matches_single_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (k, preset) in ["reinsurance_halfline", "reinsurance_wholeline", "cara_hedging"].iter().enumerate() {
        let mut cfg = RunConfig::new(Cmd::Solve, dir.path().join(format!("sweep{k}")));
        cfg.preset = Some(preset.to_string());
        cfg.max_iters = Some(2000);
        runs.push(cfg);
    }
    let entries = run_sweep(&runs, Some(2)).unwrap();
    assert!(entries.iter().all(|e| e.exit_code == 0));
    for (k, cfg) in runs.iter().enumerate() {
        let mut single = cfg.clone();
        single.out = dir.path().join(format!("single{k}"));
        run(&single).unwrap();
        for f in ["result.json", "summary.csv", "trace.csv"] {
            assert_eq!(fs::read(cfg.out.join(f)).unwrap(), fs::read(single.out.join(f)).unwrap());
        }
    }
}
