use bls_harness::run::{RunOptions, RESULTS_FILE};
use bls_harness::{merge, run, HarnessError, RunConfig};
use std::path::{Path, PathBuf};
use std::process::Command;

const ESTIMATE: &str = r#"
checkpoint_every = 4

[experiment]
kind = "estimate-p"
alphas = [0.0, 0.2]
ks = [1, 2]
lambdas = [0.5, 1.0]
r_grid = [0.0, 0.5, 1.0]
outer_n = 12
inner_m = 6
delta = 0.02
h = 0.42
t_min = 0.045
min_loop_steps = 4
walk_budget = 1e5
seed = 31
"#;

const CUTSCAN: &str = r#"
checkpoint_every = 2

[experiment]
kind = "cutscan"
j = 4
n_range = [8, 9, 10]
alpha = 0.1
delta = 0.01
h = 0.3
t_min = 0.0225
min_loop_steps = 4
hit_delta = 0.01
max_cubes_per_n = 12
soup_mode = "independent"
replicas = 4
seed = 5

[experiment.loop_law]
kind = "fixed_duration_bridge"
duration = 0.0625
root = { x = 0.25, y = 0.0, z = 0.0 }
"#;

const SURVEY: &str = r#"
checkpoint_every = 3

[experiment]
kind = "cluster-survey"
alphas = [0.05, 0.2]
diameter_bound = 0.5
window_radius = 2.0
delta = 0.02
h = 0.42
t_min = 0.045
t_max = 16.0
min_loop_steps = 4
replicas = 6
seed = 3
"#;

fn opts(dir: &Path, threads: usize) -> RunOptions {
    RunOptions {
        out: dir.to_path_buf(),
        resume: false,
        threads: Some(threads),
        max_chunks: None,
    }
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let cfg = RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        cfg.experiment.validate().unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert!(n >= 9);
}

#[test]
fn unknown_fields_and_kinds_are_config_errors() {
    let extra = ESTIMATE.replace("seed = 31", "seed = 31\nspeed = 2");
    assert!(matches!(RunConfig::from_toml(&extra), Err(HarnessError::Config(_))));
    let kind = ESTIMATE.replace("estimate-p", "estimate-q");
    assert!(matches!(RunConfig::from_toml(&kind), Err(HarnessError::Config(_))));
    let missing = ESTIMATE.replace("delta = 0.02\n", "");
    let e = RunConfig::from_toml(&missing).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    let bad = RunConfig::from_toml(&ESTIMATE.replace("inner_m = 6", "inner_m = 0")).unwrap();
    assert_eq!(bad.experiment.validate().unwrap_err().exit_code(), 2);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    for text in [ESTIMATE, CUTSCAN, SURVEY] {
        let cfg = RunConfig::from_toml(text).unwrap();
        let mut reference = None;
        for threads in [1, 4, 16] {
            let dir = tempfile::tempdir().unwrap();
            run(&cfg, &opts(dir.path(), threads)).unwrap();
            let out = outputs(dir.path());
            match &reference {
                None => reference = Some(out),
                Some(r) => assert!(r == &out, "{} differs at {threads} threads", cfg.experiment.name()),
            }
        }
    }
}

#[test]
fn interrupted_run_resumes_to_the_same_bytes() {
    let cfg = RunConfig::from_toml(ESTIMATE).unwrap();
    let whole = tempfile::tempdir().unwrap();
    run(&cfg, &opts(whole.path(), 2)).unwrap();

    let part = tempfile::tempdir().unwrap();
    let mut o = opts(part.path(), 2);
    o.max_chunks = Some(1);
    let m = run(&cfg, &o).unwrap();
    assert!(!m.finished);
    assert_eq!(m.completed, vec![(0, 4)]);
    assert!(!part.path().join(RESULTS_FILE).exists());
    // A torn trailing line from a crash is discarded on resume.
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().append(true).open(part.path().join("replicas.jsonl")).unwrap();
    f.write_all(b"{\"type\":\"estimate\",\"repl").unwrap();
    drop(f);
    assert!(matches!(run(&cfg, &o), Err(HarnessError::Config(_))), "needs --resume");
    o.max_chunks = None;
    o.resume = true;
    let m = run(&cfg, &o).unwrap();
    assert!(m.finished);
    assert_eq!(outputs(whole.path()), outputs(part.path()));

    // Re-running a finished manifest changes nothing.
    let before = read(part.path(), "manifest.json");
    run(&cfg, &o).unwrap();
    assert_eq!(before, read(part.path(), "manifest.json"));
}

#[test]
fn merged_halves_equal_the_whole() {
    for text in [ESTIMATE, SURVEY, CUTSCAN] {
        let cfg = RunConfig::from_toml(text).unwrap();
        let n = cfg.experiment.replicas();
        let whole = tempfile::tempdir().unwrap();
        run(&cfg, &opts(whole.path(), 2)).unwrap();

        let mut a = cfg.clone();
        a.experiment.set_replicas(n / 2);
        let mut b = cfg.clone();
        b.first_replica = n / 2;
        b.experiment.set_replicas(n - n / 2);
        assert_eq!(a.hash(), b.hash());
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run(&a, &opts(da.path(), 1)).unwrap();
        run(&b, &opts(db.path(), 3)).unwrap();

        let ab = tempfile::tempdir().unwrap();
        let ba = tempfile::tempdir().unwrap();
        merge(&[da.path().into(), db.path().into()], ab.path()).unwrap();
        merge(&[db.path().into(), da.path().into()], ba.path()).unwrap();
        for ((na, a), (nb, b)) in outputs(whole.path()).iter().zip(outputs(ab.path()).iter()) {
            assert_eq!(na, nb);
            assert!(a == b, "{} {na}:\n{}\n{}", cfg.experiment.name(), String::from_utf8_lossy(a), String::from_utf8_lossy(b));
        }
        assert_eq!(outputs(whole.path()).len(), outputs(ab.path()).len());
        assert_eq!(outputs(ab.path()), outputs(ba.path()));

        let err = merge(&[da.path().into(), da.path().into()], tempfile::tempdir().unwrap().path()).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }
}

#[test]
fn merge_rejects_hash_mismatch() {
    let cfg = RunConfig::from_toml(ESTIMATE).unwrap();
    let mut other = cfg.clone();
    other.experiment.set_seed(32);
    other.first_replica = 100;
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&cfg, &opts(da.path(), 1)).unwrap();
    run(&other, &opts(db.path(), 1)).unwrap();
    let err = merge(&[da.path().into(), db.path().into()], tempfile::tempdir().unwrap().path()).unwrap_err();
    assert!(err.to_string().contains("hash mismatch"));
    assert_eq!(err.exit_code(), 2);
    // A different config into an existing run directory is refused too.
    let mut o = opts(da.path(), 1);
    o.resume = true;
    assert!(run(&other, &o).unwrap_err().to_string().contains("hash mismatch"));
}

#[test]
fn results_echo_parameters_and_provenance() {
    let cfg = RunConfig::from_toml(ESTIMATE).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = run(&cfg, &opts(dir.path(), 1)).unwrap();
    let text = String::from_utf8(read(dir.path(), RESULTS_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2 * 2 * 3 * 2);
    for l in &lines {
        assert_eq!(l["config_hash"], m.config_hash.as_str());
        assert_eq!(l["seed"], 31);
        assert_eq!(l["params"]["kind"], "estimate-p");
        assert!(l["streams"].as_str().unwrap().contains("stream_id"));
        for f in ["alpha", "k", "lambda", "r", "p_hat", "stderr", "outer_n", "inner_m", "delta", "h", "seed", "estimator"] {
            assert!(!l["result"][f].is_null(), "{f}");
        }
    }
    assert!(m.loops_sampled > 0 && m.path_steps > 0 && m.path_steps_per_sec > 0.0);
    assert!(dir.path().join("plot.csv").exists());
}

#[test]
fn seed_collisions_are_detected() {
    assert!(bls_harness::run::check_seed_collisions(&[(0, 10_000)]).is_ok());
    assert!(bls_harness::run::check_seed_collisions(&[(0, 10), (5, 6)]).is_err());
}

#[test]
fn fit_and_continuity_runs_produce_reports() {
    let fit = ESTIMATE
        .replace("kind = \"estimate-p\"", "kind = \"fit\"\nband_tol = 10.0\n\n[experiment.window]\nr_min = 0.5\nmin_avoiding = 1\nbootstrap = 20\n\n[experiment.estimate]")
        .replace("[experiment]\nkind = \"fit\"", "[experiment]\nkind = \"fit\"");
    let cfg = RunConfig::from_toml(&fit).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run(&cfg, &opts(dir.path(), 1)).unwrap();
    let text = String::from_utf8(read(dir.path(), RESULTS_FILE)).unwrap();
    assert_eq!(text.lines().count(), 2 * 2 * 2);
    let cont = fit.replace("kind = \"fit\"", "kind = \"continuity\"");
    let cfg = RunConfig::from_toml(&cont).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run(&cfg, &opts(dir.path(), 1)).unwrap();
    let text = String::from_utf8(read(dir.path(), RESULTS_FILE)).unwrap();
    assert_eq!(text.lines().count(), 2 * 2);
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_bls");
    let ok = Command::new(bin).args(["--threads", "2", "validate"]).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(String::from_utf8_lossy(&ok.stdout).lines().all(|l| l.starts_with("PASS")));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[experiment]\nkind = \"nonsense\"\n").unwrap();
    let out = Command::new(bin)
        .args(["run", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let good = dir.path().join("est.toml");
    std::fs::write(&good, ESTIMATE).unwrap();
    let o = dir.path().join("run");
    let run_cli = |extra: &[&str]| {
        Command::new(bin)
            .args(["--threads", "1", "run", "--config"])
            .arg(&good)
            .arg("--out")
            .arg(&o)
            .args(extra)
            .output()
            .unwrap()
    };
    let r = run_cli(&["--replicas", "4", "--seed", "9"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(run_cli(&["--replicas", "4", "--seed", "9"]).status.code(), Some(2));
    assert!(run_cli(&["--replicas", "4", "--seed", "9", "--resume"]).status.success());
    let rep = Command::new(bin).args(["report", "--run"]).arg(&o).output().unwrap();
    assert!(rep.status.success());
    let fit = Command::new(bin)
        .args(["fit", "--r-min", "0.5", "--min-avoiding", "1", "--bootstrap", "10", "--run"])
        .arg(&o)
        .output()
        .unwrap();
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    assert!(o.join("fit.jsonl").exists());
}
