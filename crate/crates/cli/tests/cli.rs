use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cashbench::data::{write_households, write_individuals, write_villages};
use cashbench::simlab::{generate, DgpSpec};
use cashbench::tables::{FIGURE_MANIFEST, TABLE_MANIFEST};

fn reference_text() -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("reference.toml");
    fs::read_to_string(p).unwrap()
}

/// The bundled configuration with fewer replications so tests stay quick.
fn quick_config() -> String {
    reference_text()
        .replace("[simulate]\nreps = 200", "[simulate]\nreps = 100")
        .replace("[power]\nreps = 300", "[power]\nreps = 100")
        .replace("config = { trees = 500 }", "config = { trees = 200 }")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cashbench"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("CASHBENCH_CONFIG")
        .output()
        .unwrap()
}

fn files(dir: &Path) -> BTreeSet<String> {
    fs::read_dir(dir)
        .map(|rd| rd.map(|e| e.unwrap().file_name().into_string().unwrap()).collect())
        .unwrap_or_default()
}

fn error_record(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().expect("an error record on stderr");
    serde_json::from_str(line).unwrap()
}

#[test]
fn validate_prints_design_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &quick_config());
    let o = run(&["validate"], &cfg, &tmp.path().join("out"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for line in [
        "Control            74       521        298",
        "Gikuriro           74       541        297",
        "GD_Lower           22       165         88",
        "GD_Middle          22       154         87",
        "GD_Upper           22       167         88",
        "GD_Large           34       246        137",
        "total             248      1794        995",
    ] {
        assert!(stdout.contains(line), "missing `{line}` in\n{stdout}");
    }
    let ledger = fs::read_to_string(tmp.path().join("out/cost_ledger.csv")).unwrap();
    assert!(ledger.lines().any(|l| l.starts_with("GD_Lower,66.02,1.0,0.81,0.18,")));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &quick_config());
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for cmd in ["simulate", "itt", "report"] {
        for out in [&a, &b] {
            let o = run(&[cmd, "--seed", "9"], &cfg, out);
            assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        }
    }
    let o = run(&["itt", "--seed", "10"], &cfg, &c);
    assert!(o.status.success());
    let names = files(&a);
    assert_eq!(names, files(&b));
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs between runs");
    }
    assert_ne!(fs::read(a.join("itt.csv")).unwrap(), fs::read(c.join("itt.csv")).unwrap());
}

#[test]
fn every_layout_has_exactly_one_emitting_command() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &quick_config());
    let commands: BTreeSet<&str> = TABLE_MANIFEST.iter().map(|(_, c)| *c).collect();
    let mut produced: Vec<(String, String)> = Vec::new();
    for cmd in commands.iter().copied().chain(["report"]) {
        let out = tmp.path().join(cmd);
        let o = run(&[cmd], &cfg, &out);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        for f in files(&out) {
            produced.push((f, cmd.to_string()));
        }
    }
    let mut expected: Vec<(String, String)> = TABLE_MANIFEST
        .iter()
        .map(|(l, c)| (format!("{l}.csv"), c.to_string()))
        .chain(FIGURE_MANIFEST.iter().map(|f| (format!("{f}.svg"), "report".to_string())))
        .collect();
    produced.sort();
    expected.sort();
    assert_eq!(produced, expected);
}

fn csv_data_config(dir: &Path, with_ledger: bool) -> PathBuf {
    let ds = generate(&DgpSpec::reference(), 4).unwrap();
    write_villages(fs::File::create(dir.join("villages.csv")).unwrap(), &ds.panel.design).unwrap();
    write_households(fs::File::create(dir.join("households.csv")).unwrap(), &ds.panel.households).unwrap();
    write_individuals(fs::File::create(dir.join("individuals.csv")).unwrap(), &ds.panel.individuals).unwrap();
    let mut text = String::from(
        "schema_version = 1\n\
         [data]\n\
         villages = \"villages.csv\"\n\
         households = \"households.csv\"\n\
         individuals = \"individuals.csv\"\n\
         [[analysis.outcomes]]\n\
         name = \"y\"\n\
         level = \"household\"\n",
    );
    if with_ledger {
        text.push_str("[ledger]\n");
        for e in cashbench::costing::CostLedger::reference().entries() {
            text.push_str(&format!(
                "[[ledger.arms]]\narm = \"{}\"\ncost_per_beneficiary = {}\naverted_share = {}\n\
                 compliance_eligible = {}\ncompliance_population = {}\n",
                serde_json::to_value(e.arm).unwrap().as_str().unwrap(),
                e.cost_per_beneficiary,
                e.averted_share,
                e.compliance_eligible,
                e.compliance_population
            ));
        }
    }
    write_config(dir, &text)
}

#[test]
fn csv_input_matches_simulated_input() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = csv_data_config(tmp.path(), true);
    let o = run(&["ce"], &cfg, &tmp.path().join("csv"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sim_dir = tmp.path().join("simcfg");
    fs::create_dir_all(&sim_dir).unwrap();
    let sim = write_config(
        &sim_dir,
        "schema_version = 1\nseed = 4\n[dgp]\nblocks = 22\n\
         eligible_totals = { control = 521, gikuriro = 541, gd_lower = 165, gd_middle = 154, gd_upper = 167, gd_large = 246 }\n\
         ineligible_totals = { control = 298, gikuriro = 297, gd_lower = 88, gd_middle = 87, gd_upper = 88, gd_large = 137 }\n\
         modality_totals = [[83, 51, 31], [87, 50, 17], [104, 41, 22], [147, 68, 31]]\n",
    );
    let o = run(&["ce"], &sim, &tmp.path().join("sim"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(tmp.path().join("csv/cost_equivalence.csv")).unwrap(),
        fs::read(tmp.path().join("sim/cost_equivalence.csv")).unwrap()
    );
}

#[test]
fn ce_without_ledger_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = csv_data_config(tmp.path(), false);
    let o = run(&["ce"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    let rec = error_record(&o);
    assert_eq!(rec["kind"], "config");
    assert_eq!(rec["command"], "ce");
    assert!(rec["message"].as_str().unwrap().contains("ledger"));
    assert!(files(&tmp.path().join("out")).is_empty());
}

#[test]
fn unknown_key_and_missing_config_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{}\n[analysis.extra]\n", quick_config()));
    let o = run(&["itt"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_record(&o)["kind"], "config");

    let o = Command::new(env!("CARGO_BIN_EXE_cashbench"))
        .arg("itt")
        .env_remove("CASHBENCH_CONFIG")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_path_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &quick_config());
    let out = tmp.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_cashbench"))
        .args(["validate", "--out"])
        .arg(&out)
        .env("CASHBENCH_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("design_counts.csv").exists());
}

#[test]
fn estimation_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let text = quick_config().replace("icc = 0.1\n", "icc = 0.1\nattrition = { control_rate = 0.0 }\n");
    let cfg = write_config(tmp.path(), &text);
    let o = run(&["attrition"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(error_record(&o)["kind"], "estimation");
}

#[test]
fn variant_flag_is_applied_and_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &quick_config());
    let out = tmp.path().join("out");
    let o = run(&["ce", "--variant", "cubic"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("cost_equivalence.csv")).unwrap();
    assert!(table.lines().skip(1).all(|l| l.contains(",cubic,")));
    let o = run(&["ce", "--variant", "quartic"], &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
}
