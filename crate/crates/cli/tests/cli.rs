use std::path::Path;
use std::process::Command;

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_fraclab");

fn run(experiment: &str, config: &str, out: &Path, extra: &[&str]) -> i32 {
    let dir = out.parent().unwrap();
    let cfg = dir.join(format!("{experiment}.toml"));
    std::fs::write(&cfg, config).unwrap();
    Command::new(BIN)
        .arg(experiment)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(out)
        .args(extra)
        .status()
        .unwrap()
        .code()
        .unwrap()
}

fn results(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("results.json")).unwrap()).unwrap()
}

fn check<'a>(r: &'a Value, name: &str) -> &'a Value {
    r["checks"].as_array().unwrap().iter().find(|c| c["name"] == name).unwrap()
}

const OPERATOR: &str = r#"
[grid]
n = 1
N = 33
Lbox = 2.0
[operator]
s = 0.5
"#;

const DOMAIN: &str = r#"
[grid]
n = 1
N = 33
Lbox = 2.0
[operator]
s = 0.5
[domain]
omega = { ball = { center = [0.0], radius = 0.5 } }
o1 = { box = { lower = [0.75], upper = [1.75] } }
o2 = { box = { lower = [-1.75], upper = [-0.75] } }
"#;

#[test]
fn operator_semigroup_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(run("operator", OPERATOR, &out, &[]), 0);
    let r = results(&out);
    assert_eq!(r["status"], "pass");
    let c = check(&r, "semigroup residual S(0.3)S(0.4)");
    assert!(c["value"].as_f64().unwrap() <= 1e-10);
    for a in r["artifacts"].as_array().unwrap() {
        let text = std::fs::read_to_string(out.join(a.as_str().unwrap())).unwrap();
        assert!(text.starts_with("# n=1,N=33,s=0.5,truncation=reflecting"));
    }
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(out.join("metadata.json")).unwrap()).unwrap();
    assert!(meta["elapsed_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn dnmap_equal_potentials_identity_vanishes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = format!(
        "seed = 4\n{DOMAIN}[potentials]\nq1 = {{ kind = \"constant\", value = 0.5 }}\nq2 = {{ kind = \"constant\", value = 0.5 }}\n"
    );
    assert_eq!(run("dnmap", &cfg, &out, &[]), 0);
    let r = results(&out);
    let c = check(&r, "integral identity residual");
    assert_eq!(c["tolerance"].as_f64().unwrap(), 1e-12);
    assert!(c["value"].as_f64().unwrap() <= 1e-12);
}

#[test]
fn missing_s_is_a_config_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(run("operator", &OPERATOR.replace("s = 0.5", ""), &out, &[]), 2);
    assert!(!out.exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    // randomized experiment without a seed
    assert_eq!(run("forward", DOMAIN, &out, &[]), 2);
    assert_eq!(run("operator", &format!("experiment = \"dnmap\"\n{OPERATOR}"), &out, &[]), 2);
    assert_eq!(run("operator", &format!("{OPERATOR}\n[parameters]\nsweep = 1\n"), &out, &[]), 2);
    assert!(!out.exists());
}

#[test]
fn results_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{DOMAIN}[potentials]\nq1 = {{ kind = \"bump\", amplitude = 1.0, center = [0.0], radius = 0.5 }}\n");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(run("forward", &cfg, &a, &["--seed", "17"]), 0);
    assert_eq!(run("forward", &cfg, &b, &["--seed", "17"]), 0);
    assert_eq!(run("forward", &cfg, &c, &["--seed", "18"]), 0);
    let read = |p: &Path| std::fs::read(p.join("results.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(results(&a)["seed"], 17);
}

#[test]
fn failing_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    // one-sided controls cannot reach this tolerance
    let cfg = format!("{DOMAIN}[parameters]\ntolerance = 1e-12\n");
    assert_eq!(run("runge", &cfg, &out, &[]), 1);
    assert_eq!(results(&out)["status"], "fail");
}
