use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG_A: &str = r#"
beta1 = 0.0
beta2 = -0.431
p1 = 0.5
q = 0.5
rho_s = 0.03
rho_u = 0.03
r_bar = 0.5
alpha = 0.05
power = 0.8
cluster_dist = "discrete_uniform"
cluster_lo = 34
cluster_hi = 56
"#;

fn zipcrt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zipcrt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn samplesize_reports_table_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.toml", CONFIG_A);
    let out = zipcrt(&["samplesize", "--config", s(&cfg)]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("N_z = 19\n"), "{text}");
    assert!(text.contains("sigma2_sq = 0.441618"), "{text}");
    assert!(text.contains("zeta1 = "), "{text}");
}

#[test]
fn omitted_q_matches_explicit_half() {
    let dir = tempfile::tempdir().unwrap();
    let explicit = write_config(dir.path(), "e.toml", CONFIG_A);
    let implicit = write_config(dir.path(), "i.toml", &CONFIG_A.replace("q = 0.5\n", ""));
    let a = stdout(&zipcrt(&["samplesize", "--config", s(&explicit)]));
    let b = stdout(&zipcrt(&["samplesize", "--config", s(&implicit)]));
    assert_eq!(a.replace("q = 0.5,", "q = 0.5 (default),"), b);
}

#[test]
fn zero_effect_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "z.toml",
        &CONFIG_A.replace("beta2 = -0.431", "beta2 = 0.0"),
    );
    let out = zipcrt(&["samplesize", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta2 is zero"));
}

#[test]
fn contradictory_zero_structure_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{CONFIG_A}p2 = 0.7\n"));
    let out = zipcrt(&["samplesize", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("p2") && err.contains("q"), "{err}");
}

#[test]
fn sweep_rows_and_inline_errors() {
    let dir = tempfile::tempdir().unwrap();
    let tp = CONFIG_A
        .replace("rho_s = 0.03", "rho_s = 0.05")
        .replace("rho_u = 0.03", "rho_u = 0.05")
        .replace(
            "cluster_dist = \"discrete_uniform\"",
            "cluster_dist = \"truncated_poisson\"\ncluster_rate = 45.0",
        )
        .replace("cluster_lo = 34", "cluster_lo = 20")
        .replace("cluster_hi = 56", "cluster_hi = 70");
    let cfg = write_config(dir.path(), "tp.toml", &tp);
    let out = zipcrt(&["sweep", "--config", s(&cfg)]);
    assert!(out.status.success());
    let nz: Vec<String> = stdout(&out)
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().to_string())
        .collect();
    assert_eq!(nz, ["24", "25", "25", "26", "27"]);

    let out = zipcrt(&["sweep", "--config", s(&cfg), "--q", "0.5"]);
    assert_eq!(stdout(&out).lines().count(), 2);

    let out = zipcrt(&["sweep", "--config", s(&cfg), "--q", "0.5,1.2"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let bad = text.lines().nth(2).unwrap();
    assert!(
        bad.starts_with("1.2,,,,") && bad.contains("domain error"),
        "{bad}"
    );

    let out = zipcrt(&["sweep", "--config", s(&cfg), "--q", "1.2"]);
    assert_eq!(out.status.code(), Some(2));
}

fn fit_estimate(text: &str, name: &str) -> f64 {
    text.lines()
        .find(|l| l.starts_with(&format!("{name},")))
        .and_then(|l| l.split(',').nth(1))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn simulate_then_fit_recovers_effect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.toml", CONFIG_A);
    let data = dir.path().join("trial.csv");
    let out = zipcrt(&[
        "simulate",
        "--config",
        s(&cfg),
        "--seed",
        "11",
        "--clusters",
        "10000",
        "--out",
        s(&data),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("trial.csv.manifest.toml").exists());
    let fit = zipcrt(&["fit", "--data", s(&data)]);
    assert!(
        fit.status.success(),
        "{}",
        String::from_utf8_lossy(&fit.stderr)
    );
    let text = stdout(&fit);
    let beta2 = fit_estimate(&text, "beta2");
    assert!((beta2 + 0.431).abs() <= 0.02, "{text}");
    assert!(text.contains("jackknife,"), "{text}");
    assert!(text.contains("test,statistic,reference,critical_value,reject"));
}

#[test]
fn simulation_replays_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.toml", CONFIG_A);
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for path in [&a, &b] {
        let out = zipcrt(&[
            "simulate",
            "--config",
            s(&cfg),
            "--seed",
            "3",
            "--out",
            s(path),
        ]);
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let manifest = |p: &Path| -> toml::Value {
        let path = p.with_file_name(format!(
            "{}.manifest.toml",
            p.file_name().unwrap().to_str().unwrap()
        ));
        toml::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
    };
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["config_digest"], mb["config_digest"]);
    assert_eq!(ma["seed"].as_str(), Some("3"));
    assert_eq!(ma["command"].as_str(), Some("simulate"));
}

#[test]
fn missing_seed_is_generated_and_printed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.toml", CONFIG_A);
    let out = zipcrt(&[
        "simulate",
        "--config",
        s(&cfg),
        "--clusters",
        "4",
        "--out",
        s(&dir.path().join("x.csv")),
    ]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "{stderr}");
    let printed = stderr
        .split("generated seed: ")
        .nth(1)
        .and_then(|rest| rest.split_whitespace().next())
        .expect("generated seed on stderr");
    let manifest: toml::Table =
        toml::from_str(&std::fs::read_to_string(dir.path().join("x.csv.manifest.toml")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"].as_str(), Some(printed));
}

#[test]
fn fit_without_both_arms_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_config(
        dir.path(),
        "one_arm.csv",
        "cluster_id,arm,y\n0,0,1\n0,0,0\n1,0,2\n1,0,0\n",
    );
    let out = zipcrt(&["fit", "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("arm 1"));
    let missing = zipcrt(&["fit", "--data", s(&dir.path().join("nope.csv"))]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn study_reproduces_jackknife_power() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "b.toml",
        &CONFIG_A
            .replace("rho_s = 0.03", "rho_s = 0.05")
            .replace("rho_u = 0.03", "rho_u = 0.05"),
    );
    let report = dir.path().join("study.csv");
    let out = zipcrt(&[
        "study",
        "--config",
        s(&cfg),
        "--reps",
        "2000",
        "--seed",
        "21",
        "--sizing",
        "t",
        "--out",
        s(&report),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text, stdout(&out));
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "28");
    let power: f64 = row[4].parse().unwrap();
    assert!((0.77..=0.86).contains(&power), "{text}");
    assert!(dir.path().join("study.csv.manifest.toml").exists());
}

#[test]
fn study_flags_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.toml", CONFIG_A);
    let out = zipcrt(&[
        "study",
        "--config",
        s(&cfg),
        "--reps",
        "10",
        "--seed",
        "1",
        "--df-rule",
        "n-3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = zipcrt(&[
        "study",
        "--config",
        s(&cfg),
        "--reps",
        "10",
        "--seed",
        "1",
        "--workers",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = zipcrt(&[
        "study",
        "--config",
        s(&cfg),
        "--reps",
        "20",
        "--seed",
        "1",
        "--workers",
        "2",
        "--df-rule",
        "n-4",
        "--null",
    ]);
    assert!(out.status.success());
}

#[test]
fn tables_sizes_only_and_unknown_id() {
    let out = zipcrt(&["tables", "--tables", "table1", "--seed", "0"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 31);
    assert!(
        text.contains("table1,\"DU(34,56)\",0.03,0.03,0.5,19,"),
        "{text}"
    );
    let out = zipcrt(&["tables", "--tables", "table7", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn largest_seed_round_trips_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.toml", CONFIG_A);
    let data = dir.path().join("big.csv");
    let out = zipcrt(&[
        "simulate",
        "--config",
        s(&cfg),
        "--clusters",
        "4",
        "--seed",
        "18446744073709551615",
        "--out",
        s(&data),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest: toml::Table =
        toml::from_str(&std::fs::read_to_string(dir.path().join("big.csv.manifest.toml")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"].as_str(), Some("18446744073709551615"));
}
