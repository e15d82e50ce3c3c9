// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::process::Command;

use sdemoments_cli::config::{InitConfig, LinearParams, ModelKind, QueryConfig, SchemeKind};
use sdemoments_cli::{read_bench, read_moments, run, Manifest, RunConfig, Subcommand};

fn linear_config(out: &Path, a: Vec<Vec<f64>>, l: Vec<Vec<f64>>, init: InitConfig) -> RunConfig {
    RunConfig {
        model: ModelKind::Linear,
        benes: None,
        linear: Some(LinearParams { a, l }),
        init: Some(init),
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

#[test]
fn zero_model_keeps_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let init = InitConfig { mean: vec![1.0, -2.0], cov: Some(vec![vec![0.5, 0.1], vec![0.1, 0.3]]) };
    for scheme in [SchemeKind::Linearized, SchemeKind::Matched] {
        let mut cfg = linear_config(dir.path(), vec![vec![0.0; 2]; 2], vec![vec![0.0; 2]; 2], init.clone());
        cfg.scheme = scheme;
        run(Subcommand::Propagate, &cfg).unwrap();
        let rows = read_moments(&dir.path().join("moments.csv")).unwrap();
        assert_eq!(rows.len(), 101);
        for (_, s, _) in &rows {
            assert_eq!(s.mean.as_slice(), &[1.0, -2.0]);
            assert_eq!(s.cov.as_slice(), &[0.5, 0.1, 0.1, 0.3]);
        }
    }
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn same_config_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (Subcommand::Propagate, vec!["moments.csv"]),
        (Subcommand::Sample, vec!["moments.csv", "paths.csv"]),
        (Subcommand::FpkGrid, vec!["density.csv"]),
    ];
    for (cmd, files) in cases {
        let mut texts = Vec::new();
        for run_idx in 0..2 {
            let mut cfg = RunConfig {
                n: 300,
                dump_paths: true,
                out: dir.path().join(format!("{}-{run_idx}", cmd.name())),
                ..RunConfig::default()
            };
            cfg.fpk.points = 61;
            let path = dir.path().join(format!("{}-{run_idx}.json", cmd.name()));
            fs::write(&path, cfg.to_json()).unwrap();
            let loaded = RunConfig::load(&path).unwrap();
            run(cmd, &loaded).unwrap();
            texts.push(files.iter().map(|f| read(&loaded.out.join(f))).collect::<Vec<_>>());
        }
        assert_eq!(texts[0], texts[1], "{} artifacts differ between runs", cmd.name());
    }
}

#[test]
fn sample_csv_matches_propagate_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { out: dir.path().to_path_buf(), n: 50, ..RunConfig::default() };
    run(Subcommand::Sample, &cfg).unwrap();
    let header = fs::read_to_string(dir.path().join("moments.csv")).unwrap();
    assert!(header.starts_with("t,m_1,P_11,n_drift,n_diff,n_jac\n"));
    let rows = read_moments(&dir.path().join("moments.csv")).unwrap();
    assert_eq!(rows[0].2.drift, 0);
    assert!(rows[1..].iter().all(|r| r.2.drift == 50 && r.2.diffusion == 50 && r.2.jacobian == 0));
}

#[test]
fn manifest_echoes_config_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out: dir.path().to_path_buf(),
        benes: Some(sdemoments_cli::config::BenesParams { z0: vec![0.1, 0.2, 0.3] }),
        method: sdemoments::odeint::Method::Euler,
        ..RunConfig::default()
    };
    let m = run(Subcommand::Propagate, &cfg).unwrap();
    let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let back: Manifest = serde_json::from_str(&text).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.config, cfg);
    assert_eq!(back.library_version, sdemoments::VERSION);
    assert_eq!(back.eval_counts[0].per_step.len(), 100);
    assert!(back.eval_counts[0].per_step.iter().all(|c| (c.drift, c.diffusion, c.jacobian) == (6, 6, 0)));
    assert!(back.phases[0].wall_ms >= 0.0);
}

#[test]
fn gp_fit_dumps_query_grid() {
    let dir = tempfile::tempdir().unwrap();
    let obs = dir.path().join("obs.csv");
    fs::write(&obs, "z_1,z_2,dz_1,dz_2\n1,0,0,1\n0,1,-1,0\n-1,0,0,-1\n0,-1,1,0\n").unwrap();
    let text = format!(
        r#"{{
            "model": "gp",
            "gp": {{"observations": "obs.csv", "nugget": 1e-8}},
            "kernel": {{"kind": "divergence_free", "dim": 2, "lengthscale": 1.0, "variance": 1.0}},
            "gp_query": {{"bounds": [[-1, 1], [-1, 1]], "points": 3}},
            "out": "{}"
        }}"#,
        dir.path().join("gp").display()
    );
    let path = dir.path().join("gp.json");
    fs::write(&path, text).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.gp_query, Some(QueryConfig { bounds: vec![[-1.0, 1.0]; 2], points: 3 }));
    run(Subcommand::GpFit, &cfg).unwrap();
    let mut r = csv::Reader::from_path(dir.path().join("gp/field.csv")).unwrap();
    assert_eq!(r.headers().unwrap().len(), 2 + 2 + 4);
    let rows: Vec<Vec<f64>> =
        r.records().map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 9);
    // node (1, 0) is an observation: the field there is (0, 1)
    let at = rows.iter().find(|r| r[0] == 1.0 && r[1] == 0.0).unwrap();
    assert!((at[2] - 0.0).abs() < 1e-4 && (at[3] - 1.0).abs() < 1e-4, "{at:?}");
    assert!(at[4] < 1e-4 && at[7] < 1e-4);
}

#[test]
fn bench_rows_cover_all_methods() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig { out: dir.path().to_path_buf(), repeats: 2, ..RunConfig::default() };
    cfg.bench.dims = vec![2];
    cfg.bench.horizon = 1.0;
    cfg.bench.eval_count = 10;
    let m = run(Subcommand::BenchBenes, &cfg).unwrap();
    let rows = read_bench(&dir.path().join("bench.csv")).unwrap();
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["linearized", "matched", "em"]);
    assert_eq!(rows[0].drift_evals, 10);
    assert_eq!(rows[1].drift_evals, 40);
    let n = rows[2].n_matched.unwrap();
    assert!(n >= 4);
    assert_eq!(rows[2].drift_evals, 10 * n as u64);
    assert!(rows[..2].iter().all(|r| r.n_matched.is_none()));
    assert_eq!(m.eval_counts.len(), 3);
    let header = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert!(header.starts_with("d,method,wall_ms,total_kl,n_matched,drift_evals,diff_evals,jac_evals\n"));
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sdemoments"))
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let ok = binary().args(["propagate", "--out"]).arg(&out).args(["--dt", "0.1"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("manifest.json"));
    assert!(out.join("moments.csv").exists() && out.join("manifest.json").exists());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"model": "benes", "grid": {"t0": 0, "t1": true, "dt": 0.1}}"#).unwrap();
    let o = binary().args(["propagate", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid.t1"));

    let blowup = linear_config(&out, vec![vec![500.0]], vec![vec![1.0]], InitConfig { mean: vec![1.0], cov: None });
    let cfg = dir.path().join("blowup.json");
    let mut blowup = blowup;
    blowup.grid.t1 = 10.0;
    blowup.grid.dt = 0.1;
    fs::write(&cfg, blowup.to_json()).unwrap();
    let o = binary().args(["propagate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let o = binary().args(["propagate", "--config"]).arg(dir.path().join("missing.json")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn flags_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fpk");
    let o = binary()
        .args(["fpk-grid", "--bounds=-3:3", "--points", "31", "--t", "0.1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m: Manifest = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!((m.config.fpk.bounds.clone(), m.config.fpk.points, m.config.fpk.t), (vec![[-3.0, 3.0]], 31, 0.1));
    assert_eq!(fs::read_to_string(out.join("density.csv")).unwrap().lines().count(), 32);

    let o = binary()
        .args(["bench-benes", "--dims", "2", "--horizon", "1", "--repeats", "1", "--out"])
        .arg(dir.path().join("bench"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bench.dt"));
}
