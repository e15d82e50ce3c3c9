// SPDX-License-Identifier: Apache-2.0

//! Subcommands. Each writes its CSV artifacts and a `manifest.json` into the output directory.

use std::fs::{self, File};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use sdemoments::adf::{cubature_rule, propagate, EvalCounts, JacobianMode, MomentState, Scheme};
use sdemoments::emsim::{simulate_moments, simulate_with};
use sdemoments::fpkgrid::{assemble_operator, evolve, gaussian_init, grid_mass, grid_moments, point_mass, GridDensity};
use sdemoments::odeint::{Method, TimeGrid};
use sdemoments::oracle::{evaluation_times, match_trajectories, total_kl, BenesSpec, MatchConfig};
use sdemoments::par::{with_threads, worker_count, Execution};

use crate::config::{ModelKind, RunConfig};
use crate::error::{CliError, CliResult};
use crate::timing::{time_interleaved, time_phase, Phase};

/// Largest number of query nodes `gp-fit` will evaluate.
pub const MAX_QUERY_NODES: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    Propagate,
    Sample,
    FpkGrid,
    GpFit,
    BenchBenes,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Propagate => "propagate",
            Subcommand::Sample => "sample",
            Subcommand::FpkGrid => "fpk-grid",
            Subcommand::GpFit => "gp-fit",
            Subcommand::BenchBenes => "bench-benes",
        }
    }
}

/// Model evaluations spent by one computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTally {
    pub label: String,
    /// One entry per time step.
    pub per_step: Vec<EvalCounts>,
    pub total: EvalCounts,
}

impl EvalTally {
    fn new(label: impl Into<String>, per_step: Vec<EvalCounts>) -> Self {
        let total = per_step.iter().fold(EvalCounts::default(), |a, b| a + *b);
        Self { label: label.into(), per_step, total }
    }
}

/// Run metadata written next to the CSV artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub version: String,
    pub library_version: String,
    /// RFC 3339 UTC start time; the only run-dependent field besides timings.
    pub timestamp: String,
    pub threads: usize,
    pub config: RunConfig,
    pub phases: Vec<Phase>,
    pub eval_counts: Vec<EvalTally>,
    pub artifacts: Vec<String>,
    /// Subcommand-specific summary values.
    pub results: serde_json::Value,
}

struct Output {
    phases: Vec<Phase>,
    eval_counts: Vec<EvalTally>,
    artifacts: Vec<String>,
    results: serde_json::Value,
}

/// Runs a subcommand and writes its artifacts under `config.out`.
pub fn run(cmd: Subcommand, config: &RunConfig) -> CliResult<Manifest> {
    let timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    fs::create_dir_all(&config.out).map_err(|e| CliError::Io(format!("{}: {e}", config.out.display())))?;
    let (output, threads) = with_threads(config.threads, |exec| {
        let out = match cmd {
            Subcommand::Propagate => run_propagate(config),
            Subcommand::Sample => run_sample(config, exec),
            Subcommand::FpkGrid => run_fpk(config),
            Subcommand::GpFit => run_gp_fit(config),
            Subcommand::BenchBenes => run_bench(config, exec),
        };
        (out, worker_count(exec))
    })
    .map_err(|e| CliError::numerical("threads", e))?;
    let output = output?;
    let manifest = Manifest {
        subcommand: cmd.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        library_version: sdemoments::VERSION.to_string(),
        timestamp,
        threads,
        config: config.clone(),
        phases: output.phases,
        eval_counts: output.eval_counts,
        artifacts: output.artifacts,
        results: output.results,
    };
    let path = config.out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(manifest)
}

fn writer(dir: &Path, name: &str) -> CliResult<csv::Writer<File>> {
    let path = dir.join(name);
    csv::Writer::from_path(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn moments_header(d: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=d).map(|i| format!("m_{i}")));
    for i in 1..=d {
        h.extend((1..=d).map(|j| format!("P_{i}{j}")));
    }
    h.extend(["n_drift", "n_diff", "n_jac"].map(String::from));
    h
}

fn moments_row(t: f64, s: &MomentState, c: &EvalCounts) -> Vec<String> {
    let d = s.dim();
    let mut row = vec![fmt(t)];
    row.extend(s.mean.iter().map(|v| fmt(*v)));
    for i in 0..d {
        row.extend((0..d).map(|j| fmt(s.cov[(i, j)])));
    }
    row.extend([c.drift, c.diffusion, c.jacobian].map(|n| n.to_string()));
    row
}

/// Writes `t, m_1..m_d, P_11..P_dd, n_drift, n_diff, n_jac`, `P` row by row.
pub fn write_moments(
    dir: &Path,
    name: &str,
    times: &[f64],
    states: &[MomentState],
    counts: &[EvalCounts],
) -> CliResult<()> {
    let d = states.first().map_or(0, MomentState::dim);
    let mut w = writer(dir, name)?;
    w.write_record(moments_header(d))?;
    for ((t, s), c) in times.iter().zip(states).zip(counts) {
        w.write_record(moments_row(*t, s, c))?;
    }
    w.flush()?;
    Ok(())
}

fn run_propagate(cfg: &RunConfig) -> CliResult<Output> {
    let model = cfg.build_model()?;
    let m = model.as_dyn();
    let init = cfg.initial_state(m.dim())?;
    let grid = cfg.time_grid()?;
    let scheme = cfg.moment_scheme(m.dim())?;
    let (traj, phase) = time_phase("propagate", || propagate(m, &init, &grid, &scheme, cfg.method));
    let traj = traj.map_err(|e| CliError::numerical("propagate", e))?;
    write_moments(&cfg.out, "moments.csv", &traj.times, &traj.states, &traj.eval_counts)?;
    let last = traj.last();
    Ok(Output {
        phases: vec![phase],
        eval_counts: vec![EvalTally::new(scheme_label(&scheme), traj.eval_counts[1..].to_vec())],
        artifacts: vec!["moments.csv".into()],
        results: json!({ "steps": grid.n_steps(), "final_mean": last.mean.as_slice() }),
    })
}

fn scheme_label(s: &Scheme) -> &'static str {
    match s {
        Scheme::Linearized(_) => "linearized",
        Scheme::Matched(_) => "matched",
    }
}

fn run_sample(cfg: &RunConfig, exec: Execution) -> CliResult<Output> {
    let model = cfg.build_model()?;
    let m = model.as_dyn();
    let init = cfg.initial_condition(m.dim())?;
    let grid = cfg.time_grid()?;
    if cfg.n < 2 {
        return Err(CliError::Config("n: sample needs at least two paths".into()));
    }
    let (em, phase) = time_phase("simulate", || simulate_moments(m, &init, cfg.n, &grid, cfg.seed, exec));
    let em = em.map_err(|e| CliError::numerical("sample", e))?;
    let mut per_step = vec![EvalCounts::default()];
    per_step.extend(std::iter::repeat_n(em.step_counts, grid.n_steps()));
    write_moments(&cfg.out, "moments.csv", &em.times, &em.states, &per_step)?;
    let mut phases = vec![phase];
    let mut artifacts = vec!["moments.csv".to_string()];
    if cfg.dump_paths {
        let (ens, phase) = time_phase("simulate_paths", || simulate_with(m, &init, cfg.n, &grid, cfg.seed, exec));
        let ens = ens.map_err(|e| CliError::numerical("sample", e))?;
        let mut w = writer(&cfg.out, "paths.csv")?;
        let mut header = vec!["path".to_string(), "t".to_string()];
        header.extend((1..=ens.dim()).map(|i| format!("z_{i}")));
        w.write_record(&header)?;
        for p in 0..ens.n_paths() {
            for (k, t) in ens.times.iter().enumerate() {
                let mut row = vec![p.to_string(), fmt(*t)];
                row.extend(ens.state(p, k).iter().map(|v| fmt(*v)));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        phases.push(phase);
        artifacts.push("paths.csv".into());
    }
    Ok(Output {
        phases,
        eval_counts: vec![EvalTally::new("em", per_step[1..].to_vec())],
        artifacts,
        results: json!({ "n_paths": cfg.n, "seed": cfg.seed }),
    })
}

fn write_density(dir: &Path, p: &GridDensity) -> CliResult<()> {
    let dim = p.spec.dim();
    let mut w = writer(dir, "density.csv")?;
    let mut header: Vec<String> = (1..=dim).map(|i| format!("z_{i}")).collect();
    header.push("p".into());
    w.write_record(&header)?;
    for idx in 0..p.spec.len() {
        let mut row: Vec<String> = p.spec.node(idx).iter().map(|v| fmt(*v)).collect();
        row.push(fmt(p.values[idx]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn run_fpk(cfg: &RunConfig) -> CliResult<Output> {
    let model = cfg.build_model()?;
    let m = model.as_dyn();
    let spec = cfg.fpk_grid()?;
    if spec.dim() != m.dim() {
        return Err(CliError::Config(format!(
            "fpk.bounds: grid has {} axes but the model has dimension {}",
            spec.dim(),
            m.dim()
        )));
    }
    if !(cfg.fpk.t >= 0.0) {
        return Err(CliError::Config("fpk.t: must be non-negative".into()));
    }
    let init = cfg.initial_state(m.dim())?;
    let p0 = if init.cov.iter().all(|v| *v == 0.0) {
        point_mass(&init.mean, &spec)
    } else {
        gaussian_init(&init.mean, &init.cov, &spec)
    }
    .map_err(|e| CliError::numerical("fpk-grid initial density", e))?;
    let (a, assemble) = time_phase("assemble", || assemble_operator(m, &spec, 0.0));
    let a = a.map_err(|e| CliError::numerical("fpk-grid assemble", e))?;
    let (p, evolve_phase) = time_phase("evolve", || evolve(&a, &p0, cfg.fpk.t, cfg.fpk.evolution));
    let p = p.map_err(|e| CliError::numerical("fpk-grid evolve", e))?;
    write_density(&cfg.out, &p)?;
    let moments = grid_moments(&p).ok();
    Ok(Output {
        phases: vec![assemble, evolve_phase],
        eval_counts: Vec::new(),
        artifacts: vec!["density.csv".into()],
        results: json!({
            "nodes": spec.len(),
            "mass": grid_mass(&p),
            "mean": moments.as_ref().map(|s| s.mean.as_slice().to_vec()),
            "cov": moments.as_ref().map(|s| s.cov.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>()),
        }),
    })
}

fn query_nodes(bounds: &[[f64; 2]], points: usize) -> CliResult<Vec<DVector<f64>>> {
    if points < 2 {
        return Err(CliError::Config("gp_query.points: need at least 2".into()));
    }
    if let Some((i, b)) = bounds.iter().enumerate().find(|(_, b)| !(b[0] < b[1])) {
        return Err(CliError::Config(format!("gp_query.bounds[{i}]: lower {} must be below upper {}", b[0], b[1])));
    }
    let total = (0..bounds.len()).try_fold(1usize, |acc, _| acc.checked_mul(points)).unwrap_or(usize::MAX);
    if total > MAX_QUERY_NODES {
        return Err(CliError::Config(format!("gp_query: {total} nodes exceeds the limit {MAX_QUERY_NODES}")));
    }
    let d = bounds.len();
    Ok((0..total)
        .map(|mut idx| {
            DVector::from_fn(d, |a, _| {
                let i = idx % points;
                if a + 1 < d {
                    idx /= points;
                }
                let [lo, hi] = bounds[a];
                lo + (hi - lo) * i as f64 / (points - 1) as f64
            })
        })
        .collect())
}

fn run_gp_fit(cfg: &RunConfig) -> CliResult<Output> {
    if cfg.model != ModelKind::Gp {
        return Err(CliError::Config("model: gp-fit needs model \"gp\"".into()));
    }
    let params = cfg.gp.as_ref().ok_or_else(|| CliError::Config("gp: required for model \"gp\"".into()))?;
    let (field, fit) = time_phase("fit", || cfg.fit_field(params));
    let field = field?;
    let query = cfg.gp_query.as_ref().ok_or_else(|| CliError::Config("gp_query: required for gp-fit".into()))?;
    let d = field.dim();
    if query.bounds.len() != d {
        return Err(CliError::Config(format!("gp_query.bounds: need {d} axes, got {}", query.bounds.len())));
    }
    let nodes = query_nodes(&query.bounds, query.points)?;
    let (rows, eval) = time_phase("evaluate", || {
        nodes.iter().map(|z| (field.posterior_mean(z), field.posterior_cov(z))).collect::<Vec<_>>()
    });
    let mut w = writer(&cfg.out, "field.csv")?;
    let mut header: Vec<String> = (1..=d).map(|i| format!("z_{i}")).collect();
    header.extend((1..=d).map(|i| format!("f_{i}")));
    for i in 1..=d {
        header.extend((1..=d).map(|j| format!("P_{i}{j}")));
    }
    w.write_record(&header)?;
    for (z, (mean, cov)) in nodes.iter().zip(&rows) {
        let mut row: Vec<String> = z.iter().chain(mean.iter()).map(|v| fmt(*v)).collect();
        row.extend(cov.transpose().iter().map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(Output {
        phases: vec![fit, eval],
        eval_counts: Vec::new(),
        artifacts: vec!["field.csv".into()],
        results: json!({ "observations": field.inputs().len(), "query_nodes": nodes.len() }),
    })
}

/// One line of `bench.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub d: usize,
    pub method: String,
    pub wall_ms: f64,
    pub total_kl: f64,
    /// Ensemble size; set on the `em` row only.
    pub n_matched: Option<usize>,
    pub drift_evals: u64,
    pub diff_evals: u64,
    pub jac_evals: u64,
}

fn run_bench(cfg: &RunConfig, exec: Execution) -> CliResult<Output> {
    let b = &cfg.bench;
    if b.dims.is_empty() || b.dims.contains(&0) {
        return Err(CliError::Config("bench.dims: need one or more positive dimensions".into()));
    }
    if cfg.repeats == 0 {
        return Err(CliError::Config("repeats: must be positive".into()));
    }
    if b.eval_count == 0 {
        return Err(CliError::Config("bench.eval_count: must be positive".into()));
    }
    let grid = TimeGrid::new(0.0, b.horizon, b.dt).map_err(|e| CliError::Config(format!("bench: {e}")))?;
    let em_grid = TimeGrid::new(0.0, b.horizon, b.em_dt.unwrap_or(b.dt))
        .map_err(|e| CliError::Config(format!("bench.em_dt: {e}")))?;
    let times = evaluation_times(b.horizon, b.eval_count);
    for (key, g) in [("bench.dt", &grid), ("bench.em_dt", &em_grid)] {
        let nodes = g.times();
        if let Some(t) = times.iter().find(|&&t| !nodes.iter().any(|&s| (s - t).abs() <= 1e-9 * t.max(1.0))) {
            return Err(CliError::Config(format!(
                "{key}: evaluation time {t} (horizon / eval_count) is not a multiple of the step"
            )));
        }
    }
    let config = MatchConfig { seeds: (0..cfg.repeats as u64).map(|r| cfg.seed + r).collect(), cap: b.cap, exec };

    let mut rows = Vec::new();
    let mut phases = Vec::new();
    let mut tallies = Vec::new();
    let mut results = Vec::new();
    for &d in &b.dims {
        let ctx = format!("bench-benes d={d}");
        let num = |e| CliError::numerical(&ctx, e);
        let spec = BenesSpec::linspaced(d);
        let model = spec.model();
        let init = MomentState::point(spec.z0.clone());
        let matched = Scheme::Matched(cubature_rule(d));
        let linearized = Scheme::Linearized(JacobianMode::Analytic);
        let truth = |t: f64| spec.moments(t);

        let mat = propagate(&model, &init, &grid, &matched, b.method).map_err(num)?;
        let lin = propagate(&model, &init, &grid, &linearized, b.method).map_err(num)?;
        let kl_mat = total_kl(&mat, truth, &times).map_err(num)?;
        let kl_lin = total_kl(&lin, truth, &times).map_err(num)?;
        let (search, search_phase) = time_phase(&format!("d={d}/search"), || {
            match_trajectories(&model, &spec.initial(), truth, &em_grid, &times, kl_mat, &config)
        });
        let search = search.map_err(num)?;
        let n = search.n;

        // results are dropped inside the timed region, like a caller would
        let mut run_mat = || propagate(&model, &init, &grid, &matched, b.method).map(drop);
        let mut run_lin = || propagate(&model, &init, &grid, &linearized, b.method).map(drop);
        let mut run_em = || simulate_moments(&model, &spec.initial(), n, &em_grid, cfg.seed, exec).map(drop);
        let labels = [format!("d={d}/linearized"), format!("d={d}/matched"), format!("d={d}/em")];
        let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        let (_, timed) =
            time_interleaved(&label_refs, cfg.repeats, &mut [&mut run_lin, &mut run_mat, &mut run_em]).map_err(num)?;

        let em_steps = em_grid.n_steps() as u64;
        let em_counts = EvalCounts { drift: n as u64, diffusion: n as u64, jacobian: 0 };
        for (method, traj, kl, phase) in [("linearized", &lin, kl_lin, &timed[0]), ("matched", &mat, kl_mat, &timed[1])]
        {
            let c = traj.total_counts();
            rows.push(BenchRow {
                d,
                method: method.into(),
                wall_ms: phase.wall_ms,
                total_kl: kl,
                n_matched: None,
                drift_evals: c.drift,
                diff_evals: c.diffusion,
                jac_evals: c.jacobian,
            });
            tallies.push(EvalTally::new(format!("d={d}/{method}"), traj.eval_counts[1..].to_vec()));
        }
        rows.push(BenchRow {
            d,
            method: "em".into(),
            wall_ms: timed[2].wall_ms,
            total_kl: search.kl_mean,
            n_matched: Some(n),
            drift_evals: em_counts.drift * em_steps,
            diff_evals: em_counts.diffusion * em_steps,
            jac_evals: 0,
        });
        tallies.push(EvalTally::new(format!("d={d}/em"), vec![em_counts; em_grid.n_steps()]));
        phases.push(search_phase);
        phases.extend(timed);
        results.push(json!({
            "d": d,
            "n_matched": n,
            "kl_matched": kl_mat,
            "kl_linearized": kl_lin,
            "kl_em_mean": search.kl_mean,
            "kl_em_std": search.kl_std,
            "kl_em_repeats": search.kl_repeats,
            "search_trials": search.trials,
        }));
    }
    write_bench(&cfg.out, &rows)?;
    Ok(Output {
        phases,
        eval_counts: tallies,
        artifacts: vec!["bench.csv".into()],
        results: json!({ "method": method_name(b.method), "dims": results }),
    })
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Euler => "euler",
        Method::Rk4 => "rk4",
    }
}

fn write_bench(dir: &Path, rows: &[BenchRow]) -> CliResult<()> {
    let mut w = writer(dir, "bench.csv")?;
    w.write_record(["d", "method", "wall_ms", "total_kl", "n_matched", "drift_evals", "diff_evals", "jac_evals"])?;
    for r in rows {
        w.write_record([
            r.d.to_string(),
            r.method.clone(),
            format!("{:.3}", r.wall_ms),
            fmt(r.total_kl),
            r.n_matched.map(|n| n.to_string()).unwrap_or_default(),
            r.drift_evals.to_string(),
            r.diff_evals.to_string(),
            r.jac_evals.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `bench.csv` back into rows.
pub fn read_bench(path: &Path) -> CliResult<Vec<BenchRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Reads a moments CSV (the `propagate` / `sample` schema) back into states.
pub fn read_moments(path: &Path) -> CliResult<Vec<(f64, MomentState, EvalCounts)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let width = r.headers()?.len();
    // t + d + d² + 3 columns
    let d = (((4 * (width - 4) + 1) as f64).sqrt() as usize - 1) / 2;
    if 4 + d + d * d != width {
        return Err(CliError::Io(format!("{}: {width} columns is not a moments table", path.display())));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> CliResult<f64> {
            rec[i].parse().map_err(|e| CliError::Io(format!("{}: column {i}: {e}", path.display())))
        };
        let int = |i: usize| -> CliResult<u64> {
            rec[i].parse().map_err(|e| CliError::Io(format!("{}: column {i}: {e}", path.display())))
        };
        let mean = DVector::from_iterator(d, (1..=d).map(num).collect::<CliResult<Vec<_>>>()?);
        let vals = (1 + d..1 + d + d * d).map(num).collect::<CliResult<Vec<_>>>()?;
        let cov = DMatrix::from_row_slice(d, d, &vals);
        let c = EvalCounts { drift: int(width - 3)?, diffusion: int(width - 2)?, jacobian: int(width - 1)? };
        out.push((num(0)?, MomentState { mean, cov }, c));
    }
    Ok(out)
}
