use std::path::PathBuf;
use std::process::Command;

fn ufa() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ufa"));
    c.env_remove("UFA_SEED");
    c
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

#[test]
fn run_writes_report_and_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let out = ufa()
        .args(["run", "--format", "json", "--out"])
        .arg(dir.path())
        .arg(scenario("steady_state_populated.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.json", "events.jsonl", "availability.csv", "utilization.csv", "class_series.csv", "burst.csv", "cities.csv"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["scenario"], "steady_state_populated");

    let rerender = ufa().args(["report", "--format", "table"]).arg(dir.path().join("report.json")).output().unwrap();
    assert_eq!(rerender.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&rerender.stdout).contains("critical avail"));
}

#[test]
fn invalid_config_exits_two_and_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(scenario("steady_state_empty.json")).unwrap()).unwrap();
    v["availability_floor"] = serde_json::json!(1.5);
    std::fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
    let out = ufa().arg("run").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("availability_floor"));
}

#[test]
fn seed_flag_and_env_agree() {
    let run = |flag: bool| {
        let mut c = ufa();
        c.args(["run", "--format", "json"]);
        if flag {
            c.args(["--seed", "11"]);
        } else {
            c.env("UFA_SEED", "11");
        }
        let out = c.arg(scenario("steady_state_empty.json")).output().unwrap();
        assert_eq!(out.status.code(), Some(0));
        out.stdout
    };
    assert_eq!(run(true), run(false));
}
