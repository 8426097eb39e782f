use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bsde_core::builtin_2d;

fn lab(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bsde-lab"));
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("RAYON_NUM_THREADS", t.to_string());
    }
    cmd.output().expect("spawn bsde-lab")
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const SMALL: [&str; 10] = [
    "--N", "200", "--dt", "0.1", "--iters", "3", "--trials", "2", "--seed", "7",
];

#[test]
fn table1_bytes_do_not_depend_on_threads_or_repeats() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (dir, threads) in dirs.iter().zip([1, 3, 3]) {
        let out = dir.path().to_str().unwrap();
        let mut args = vec!["table1", "--out", out];
        args.extend(SMALL);
        let o = lab(&args, Some(threads));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in [
        "table1_trials.csv",
        "table1_summary.csv",
        "table1_costs.csv",
        "table1_gt.csv",
    ] {
        let a = read(dirs[0].path(), name);
        assert!(a.starts_with(b"method,"), "{name} lacks header");
        assert_eq!(
            a,
            read(dirs[1].path(), name),
            "{name} differs across thread counts"
        );
        assert_eq!(
            a,
            read(dirs[2].path(), name),
            "{name} differs across repeats"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(dirs[0].path(), "manifest.json")).unwrap();
    assert_eq!(manifest["command"], "table1");
    assert_eq!(manifest["trial_seeds"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["config"]["N"], 200);
}

#[test]
fn sweep_rows_cover_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"experiment":"sweep-n","n_values":[50,100],"methods":["tr-c","ls-c"],"dt":0.2,"iters":2,"trials":2}"#,
    )
    .unwrap();
    let out = dir.path().join("res");
    let o = lab(
        &[
            "sweep-n",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--trials",
            "3",
        ],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("sweep_n.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("N,method,trial,seed,mse,unstable_flag"));
    // 2 grid points x 2 methods x 3 trials (flag overrides the file)
    assert_eq!(lines.count(), 12);
    let summary = fs::read_to_string(out.join("sweep_n_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(
        !manifest.contains("defaults to 50"),
        "iters were set explicitly"
    );
}

#[test]
fn solve_from_dumped_json_matches_builtin() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prob.json");
    builtin_2d().save(&path).unwrap();
    let run = |problem: &str, sub: &str| {
        let out = dir.path().join(sub);
        let o = lab(
            &[
                "solve",
                "--problem",
                problem,
                "--methods",
                "tr-c",
                "--out",
                out.to_str().unwrap(),
                "--N",
                "300",
                "--dt",
                "0.1",
                "--iters",
                "3",
            ],
            None,
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("builtin-2d", "a");
    let b = run(path.to_str().unwrap(), "b");
    for name in [
        "solve_g.csv",
        "solve_gain.csv",
        "solve_history.csv",
        "oracle.csv",
    ] {
        assert_eq!(read(&a, name), read(&b, name), "{name}");
    }
    let g = fs::read_to_string(a.join("solve_g.csv")).unwrap();
    assert!(g.starts_with("k,t,G[0][0],G[0][1],G[1][0],G[1][1],Gstar[0][0]"));
    assert_eq!(g.lines().count(), 42);
    let gain = fs::read_to_string(a.join("solve_gain.csv")).unwrap();
    assert!(gain.starts_with("k,t,K[0][0],K[0][1],Kstar[0][0]"));
}

#[test]
fn oracle_method_emits_riccati_alone() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(
        &[
            "solve",
            "--methods",
            "oracle",
            "--out",
            dir.path().to_str().unwrap(),
        ],
        None,
    );
    assert!(o.status.success());
    assert!(dir.path().join("oracle.csv").exists());
    assert!(!dir.path().join("solve_history.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for bad in [
        vec!["table1", "--dt", "-0.1", "--out", out],
        vec!["table1", "--methods", "ls-x", "--out", out],
        vec!["table1", "--N", "0", "--out", out],
        vec!["table1", "--methods", "oracle", "--out", out],
        vec!["solve", "--problem", "/no/such/file.json", "--out", out],
        vec!["solve", "--config", "/no/such/cfg.json", "--out", out],
        vec!["sweep-dt", "--bogus"],
    ] {
        let o = lab(&bad, None);
        assert_eq!(o.status.code(), Some(1), "{bad:?}");
    }
    // four samples cannot fit the quadratic class: every trial fails
    let o = lab(
        &[
            "table1",
            "--methods",
            "ls-v",
            "--N",
            "4",
            "--iters",
            "2",
            "--trials",
            "2",
            "--dt",
            "0.2",
            "--out",
            out,
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
    let trials = fs::read_to_string(dir.path().join("table1_trials.csv")).unwrap();
    assert_eq!(trials.lines().filter(|l| l.contains(",NaN,1,")).count(), 2);
}
