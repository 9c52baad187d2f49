use std::path::Path;
use std::process::Command;

fn dtsim(args: &[&str]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dtsim")).args(args).output().unwrap();
    (out.status.success(), String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn scenario(dir: &Path) -> std::path::PathBuf {
    std::fs::write(dir.join("tp.plan"), "shard fc1.weight S(1) @TP\nshard fc2.weight S(0) @TP\nfactory input.<out> S(0) @DP\nfactory target.<out> S(0) @DP\n").unwrap();
    let s = dir.join("tp.scenario");
    std::fs::write(&s, "mesh = M=DP:2,TP:2\nlayers = 8,16,8\nplan = tp.plan\nsteps = 4\ndropout = 0.1\nout = report\n").unwrap();
    s
}

#[test]
fn run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path());
    let (ok, stdout, stderr) = dtsim(&["run", s.to_str().unwrap()]);
    assert!(ok, "{stderr}");
    assert!(stdout.contains("steps=4"), "{stdout}");
    let first = read(&dir.path().join("report/report.json"));
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["losses"].as_array().unwrap().len(), 4);
    assert_eq!(v["rng_checks"][0]["cells"], v["rng_checks"][0]["matched"]);
    assert!(!v["ledger"]["entries"].as_array().unwrap().is_empty());
    let first_ledger = read(&dir.path().join("report/ledger.csv"));
    assert!(first_ledger.starts_with("collective,mesh_dims,S,P,bytes_per_device,rounds,T_model"));

    let (ok, _, _) = dtsim(&["run", s.to_str().unwrap()]);
    assert!(ok);
    assert_eq!(first, read(&dir.path().join("report/report.json")));
    assert_eq!(first_ledger, read(&dir.path().join("report/ledger.csv")));
}

#[test]
fn digests_agree_across_modes() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path());
    let s = s.to_str().unwrap();
    let digest = |out: &str| -> String {
        let v: serde_json::Value = serde_json::from_str(&read(&dir.path().join(out).join("report.json"))).unwrap();
        v["weight_digest"].as_str().unwrap().to_string()
    };
    let dyn_out = dir.path().join("dyn");
    let rec_out = dir.path().join("rec");
    assert!(dtsim(&["run", s, "--out", dyn_out.to_str().unwrap()]).0);
    let (ok, stdout, stderr) = dtsim(&["record-plan", s, "--out", rec_out.to_str().unwrap()]);
    assert!(ok, "{stderr}");
    assert!(stdout.contains("replay_bitwise=true static_inferences=0"), "{stdout}");
    assert_eq!(digest("dyn"), digest("rec"));

    let static_out = dir.path().join("static");
    let plan = rec_out.join("static.plan");
    let (ok, stdout, stderr) = dtsim(&["run", s, "--mode", "static", "--plan", plan.to_str().unwrap(), "--out", static_out.to_str().unwrap()]);
    assert!(ok, "{stderr}");
    assert!(stdout.contains("inferences=0"), "{stdout}");
    assert_eq!(digest("dyn"), digest("static"));
}

#[test]
fn static_mode_without_plan_metadata_fails_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path());
    let (ok, _, stderr) = dtsim(&["run", s.to_str().unwrap(), "--mode", "static", "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!ok);
    assert!(stderr.contains("<out>"), "{stderr}");
}

#[test]
fn bad_scenario_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("bad.scenario");
    std::fs::write(&s, "steps = 2\nlayers = 8,x\n").unwrap();
    let (ok, _, stderr) = dtsim(&["run", s.to_str().unwrap()]);
    assert!(!ok);
    assert!(stderr.contains("line 2"), "{stderr}");

    std::fs::write(dir.path().join("bad.plan"), "shard fc1.weight S(1) @TP\nshard fc2.weight Q @TP\n").unwrap();
    std::fs::write(&s, "plan = bad.plan\n").unwrap();
    let (ok, _, stderr) = dtsim(&["run", s.to_str().unwrap()]);
    assert!(!ok);
    assert!(stderr.contains("line 2"), "{stderr}");
}

#[test]
fn small_rng_sweep_all_match() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (ok, stdout, stderr) = dtsim(&["rng-sweep", "--dims", "1,2", "--sizes", "256", "--mesh", "1,2,4", "--threads", "1,32", "--out", out]);
    assert!(ok, "{stderr}");
    let csv = read(&dir.path().join("sweep.csv"));
    assert!(csv.starts_with("op,dims,size,shape,shard_dims,mesh,threads,result\n"));
    assert!(!csv.contains("mismatch"));
    let rows = csv.lines().count() - 1;
    assert!(stdout.contains(&format!("cells={rows} matched={rows}")), "{stdout}");
}

#[test]
fn cost_tables() {
    let (ok, stdout, _) = dtsim(&["cost"]);
    assert!(ok);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "P,N,T_vanilla,T_fused,ratio");
    assert_eq!(lines[1], "2x2,2,2,1.5,1.3333333333333333");
    assert!(lines[2].starts_with("8x8,2,3.5,"));
}

#[test]
fn consistency_reports_small_differences() {
    let dir = tempfile::tempdir().unwrap();
    let (ok, stdout, stderr) = dtsim(&["consistency", "--steps", "5", "--out", dir.path().to_str().unwrap()]);
    assert!(ok, "{stderr}");
    assert!(stdout.contains("mesh=2x2"), "{stdout}");
    let csv = read(&dir.path().join("consistency.csv"));
    for row in csv.lines().skip(1) {
        let diff: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!(diff <= 1e-9, "{row}");
    }
    let (ok, stdout, _) = dtsim(&["consistency", "--steps", "5", "--dtype", "i64", "--out", dir.path().to_str().unwrap()]);
    assert!(ok);
    assert!(stdout.contains("mesh=2x2 max_loss_diff=0e0 weights_bitwise=true"), "{stdout}");
}
