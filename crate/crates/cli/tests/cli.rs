//! End-to-end checks of the command-line surface.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_peerclust"))
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn simulate_writes_reloadable_files() {
    let dir = std::env::temp_dir().join(format!("peerclust-sim-{}", std::process::id()));
    let out = bin()
        .args(["simulate", "--G", "10", "--n", "20", "--seed", "7"])
        .arg("--out")
        .arg(&dir)
        .output()
        .expect("spawn");
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for name in ["nodes.csv", "edges.csv", "truth.json"] {
        assert!(dir.join(name).exists(), "{name} missing");
    }
    let panel =
        peerclust::data::load_panel_from_paths(&dir.join("nodes.csv"), &dir.join("edges.csv"))
            .expect("reloadable");
    assert_eq!(panel.n_groups(), 10);
    assert_eq!(panel.total_individuals(), 200);

    // Same seed: byte-identical files.
    let dir2 = std::env::temp_dir().join(format!("peerclust-sim2-{}", std::process::id()));
    let out = bin()
        .args(["simulate", "--G", "10", "--n", "20", "--seed", "7"])
        .arg("--out")
        .arg(&dir2)
        .output()
        .expect("spawn");
    assert!(out.status.success());
    for name in ["nodes.csv", "edges.csv", "truth.json"] {
        assert_eq!(read(&dir.join(name)), read(&dir2.join(name)), "{name} differs");
    }
    std::fs::remove_dir_all(&dir).ok();
    std::fs::remove_dir_all(&dir2).ok();
}

#[test]
fn simulate_rejects_zero_groups() {
    let dir = std::env::temp_dir().join(format!("peerclust-sim0-{}", std::process::id()));
    let out = bin()
        .args(["simulate", "--G", "0", "--n", "20", "--seed", "7"])
        .arg("--out")
        .arg(&dir)
        .output()
        .expect("spawn");
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2), "validation errors exit with 2");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn pipeline_runs_and_is_thread_count_invariant() {
    let dir = std::env::temp_dir().join(format!("peerclust-pipe-{}", std::process::id()));
    let status = bin()
        .args(["simulate", "--G", "12", "--n", "40", "--seed", "3"])
        .arg("--out")
        .arg(&dir)
        .status()
        .expect("spawn");
    assert!(status.success());

    let run = |threads: &str, name: &str| {
        let report = dir.join(name);
        let out = bin()
            .arg("pipeline")
            .arg("--nodes")
            .arg(dir.join("nodes.csv"))
            .arg("--edges")
            .arg(dir.join("edges.csv"))
            .arg("--out")
            .arg(&report)
            .args(["--seed", "5", "--k-max", "3", "--boot-reps", "8", "--threads", threads])
            .output()
            .expect("spawn");
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("selected K"));
        report
    };
    let a = run("1", "report1.json");
    let b = run("4", "report4.json");
    assert_eq!(read(&a), read(&b), "reports differ across worker counts");
    assert!(dir.join("report1.ic.csv").exists());
    let csv = String::from_utf8(read(&dir.join("report1.ic.csv"))).unwrap();
    assert!(csv.starts_with("k,ic,fit_term,penalty\n"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn pipeline_missing_edges_file_reports_io_context() {
    let dir = std::env::temp_dir().join(format!("peerclust-noedges-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("nodes.csv"), "group_id,individual_id,y,x_1\na,1,0,0.5\n").unwrap();
    let out = bin()
        .arg("pipeline")
        .arg("--nodes")
        .arg(dir.join("nodes.csv"))
        .arg("--edges")
        .arg(dir.join("edges.csv"))
        .arg("--out")
        .arg(dir.join("report.json"))
        .output()
        .expect("spawn");
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("edges.csv"), "stderr: {stderr}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn montecarlo_single_rep_smoke() {
    let dir = std::env::temp_dir().join(format!("peerclust-mc-{}", std::process::id()));
    let out = bin()
        .args([
            "montecarlo",
            "--preset",
            "table1",
            "--reps",
            "1",
            "--G",
            "9",
            "--n",
            "25",
            "--k-max",
            "3",
            "--seed",
            "2",
        ])
        .arg("--out")
        .arg(&dir)
        .output()
        .expect("spawn");
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("summary.json").exists());
    let csv = String::from_utf8(read(&dir.join("table1.csv"))).unwrap();
    assert!(csv.starts_with("g,n,reps,freq_k1"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn montecarlo_unknown_preset_rejected() {
    let dir = std::env::temp_dir().join(format!("peerclust-mcbad-{}", std::process::id()));
    let out = bin()
        .args(["montecarlo", "--preset", "tableX", "--reps", "1"])
        .arg("--out")
        .arg(&dir)
        .output()
        .expect("spawn");
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
}
