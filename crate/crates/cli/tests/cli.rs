use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bbm92(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bbm92"))
        .args(args)
        .output()
        .expect("spawn bbm92")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("bbm92-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("cfg.toml");
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

fn report_field(path: &Path, key: &str) -> String {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing in {}", path.display()))
        .to_owned()
}

#[test]
fn keys_over_tcp_agree() {
    let dir = scratch("keys");
    let out = dir.display().to_string();
    let o = bbm92(&["keys", "--out", &out, "--seed", "5", "--pump-mw", "3", "--duration-s", "0.05"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = fs::read(dir.join("alice.key")).unwrap();
    let b = fs::read(dir.join("bob.key")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let l: usize = report_field(&dir.join("alice.report.txt"), "l").parse().unwrap();
    assert_eq!(a.len(), l.div_ceil(8));
    for key in ["n", "q_est", "leak_bits", "pa_seed", "cascade_seed"] {
        assert_eq!(
            report_field(&dir.join("alice.report.txt"), key),
            report_field(&dir.join("bob.report.txt"), key),
            "{key}"
        );
    }
}

#[test]
fn noisy_source_aborts_with_code_3() {
    let dir = scratch("abort");
    let cfg = write_config(&dir, "[source]\nwerner_p = 0.7\n");
    let out = dir.display().to_string();
    let o = bbm92(&["keys", "--config", &cfg, "--out", &out, "--duration-s", "0.02"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(report_field(&dir.join("alice.report.txt"), "aborted"), "QBER_THRESHOLD");
    assert_eq!(fs::read(dir.join("alice.key")).unwrap().len(), 0);
}

#[test]
fn config_errors_exit_2() {
    let dir = scratch("config");
    for body in ["[source]\nwerner_p = 1.5\n", "[detector]\npreset = \"nope\"\n", "[bogus]\nx = 1\n"] {
        let cfg = write_config(&dir, body);
        let o = bbm92(&["run", "--config", &cfg, "--out", &dir.display().to_string()]);
        assert_eq!(o.status.code(), Some(2), "{body}");
    }
    let o = bbm92(&["run", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bbm92(&["run", "--duration-s", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_and_compare_write_csv() {
    let dir = scratch("run");
    let out = dir.display().to_string();
    let o = bbm92(&["compare", "--out", &out, "--pump-mw", "2", "--duration-s", "0.02"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("# bbm92 sweep schema v1"));
    assert!(sweep.contains("config_sha256="));
    // Two header lines, the column row, one row per scheme.
    assert_eq!(sweep.lines().count(), 5);
    let cmp = fs::read_to_string(dir.join("comparison.csv")).unwrap();
    assert!(cmp.lines().any(|l| l.starts_with("2,present")), "{cmp}");
}

#[test]
fn same_seed_same_csv() {
    let runs: Vec<String> = (0..2)
        .map(|i| {
            let dir = scratch(&format!("det{i}"));
            let o = bbm92(&["run", "--out", &dir.display().to_string(), "--seed", "9", "--duration-s", "0.02"]);
            assert!(o.status.success());
            fs::read_to_string(dir.join("sweep.csv")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn characterize_writes_json() {
    let dir = scratch("char");
    let cfg = write_config(
        &dir,
        "[source]\nwerner_p = 0.9\n[characterization]\nfringe_counts = 500.0\nchsh_counts = 500.0\ntomography_counts = 500.0\n",
    );
    let o = bbm92(&["characterize", "--config", &cfg, "--out", &dir.display().to_string()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("characterization.json")).unwrap()).unwrap();
    let f = json["fidelity"].as_f64().unwrap();
    assert!((f - 0.925).abs() < 0.05, "{f}");
}
