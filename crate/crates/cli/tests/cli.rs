use std::fs;
use std::path::Path;
use std::process::Command;

const GEOMETRY: &str = "geometry.channels = 2\ngeometry.ways = 2\ngeometry.planes = 1\n\
geometry.blocks_per_plane = 64\ngeometry.pages_per_block = 64\ngeometry.page_size = 4096\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ftlbench"))
}

fn write_cfg(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("sim.cfg");
    fs::write(&p, body).unwrap();
    p
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn minimal_ideal_run() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        d.path(),
        &format!("{GEOMETRY}ftl = ideal\nwarmup.multiplier = 1\nworkload.requests = 10\n"),
    );
    let out = d.path().join("out");
    let st = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    let r = report(&out);
    assert_eq!(r["reads"]["double_fraction"], 0.0);
    assert_eq!(r["host"]["read_requests"], 10);
    let lat = fs::read_to_string(out.join("latency.csv")).unwrap();
    assert_eq!(lat.lines().count(), 10);
    assert!(lat.lines().all(|l| l.parse::<f64>().is_ok()));
}

#[test]
fn same_seed_same_bytes() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), &format!("{GEOMETRY}ftl = learnedftl\nwarmup.multiplier = 1\nworkload.pattern = mixed\nworkload.requests = 2000\n"));
    let mut outs = Vec::new();
    for name in ["a", "b", "c"] {
        let out = d.path().join(name);
        let seed = if name == "c" { "8" } else { "7" };
        let st = bin()
            .args(["run", "--seed", seed, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(st.success());
        outs.push(fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    assert_ne!(outs[0], outs[2]);
    assert_eq!(report(&d.path().join("a"))["seed"], 7);
}

#[test]
fn missing_geometry_key_fails_with_one_line() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        d.path(),
        &GEOMETRY.replace("geometry.pages_per_block = 64\n", ""),
    );
    let o = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(d.path().join("o"))
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("geometry.pages_per_block"));
}

#[test]
fn unknown_key_fails() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), &format!("{GEOMETRY}mapping.cmt_size = 3\n"));
    let o = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(!o.status.success());
}

#[test]
fn json_config_accepted() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("sim.json");
    fs::write(
        &p,
        r#"{"geometry": {"channels": 2, "ways": 2, "planes": 1, "blocks_per_plane": 64, "pages_per_block": 64, "page_size": 4096},
            "ftl": "dftl", "workload": {"requests": 20}}"#,
    )
    .unwrap();
    let out = d.path().join("o");
    assert!(bin()
        .args(["run", "--config"])
        .arg(&p)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap()
        .success());
    assert!(out.join("report.json").exists());
}

#[test]
fn sweep_over_all_variants() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        d.path(),
        &format!("{GEOMETRY}warmup.multiplier = 1\nworkload.requests = 500\n"),
    );
    let out = d.path().join("sw");
    let st = bin()
        .env("FTLBENCH_THREADS", "2")
        .args([
            "sweep",
            "--axis",
            "ftl=ideal,dftl,tpftl,leaftl,learnedftl",
            "--config",
        ])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);
    let reports = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().join("report.json").exists())
        .count();
    assert_eq!(reports, 5);
}

#[test]
fn sweep_with_failed_cell_exits_nonzero_but_finishes() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), &format!("{GEOMETRY}workload.requests = 50\n"));
    let out = d.path().join("sw");
    let st = bin()
        .args([
            "sweep",
            "--axis",
            "mapping.cmt_fraction=0.05,7,0.2",
            "--config",
        ])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(!st.success());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert_eq!(summary.lines().filter(|l| l.contains(",ok,")).count(), 2);
}

#[test]
fn unknown_axis_key_rejected() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), GEOMETRY);
    let o = bin()
        .args(["sweep", "--axis", "gc.nothing=1,2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(d.path())
        .output()
        .unwrap();
    assert!(!o.status.success());
}
