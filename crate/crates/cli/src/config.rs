// SPDX-License-Identifier: Apache-2.0

//! Run configuration. A run is a pure function of its `RunConfig`.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use sdemoments::adf::{cubature_rule, gauss_hermite_rule, JacobianMode, MomentState, QuadratureRule, Scheme};
use sdemoments::emsim::InitialCondition;
use sdemoments::fpkgrid::{Evolution, GridSpec};
use sdemoments::gpfield::{PosteriorField, VectorFieldObservations};
use sdemoments::kernels::KernelSpec;
use sdemoments::odeint::{Method, TimeGrid};
use sdemoments::sdemodel::{make_benes, make_gp_sde, make_linear, BenesModel, GpSdeModel, LinearModel, SdeModel};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Benes,
    Linear,
    Gp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenesParams {
    pub z0: Vec<f64>,
}

/// `dz = A z dt + L dβ`; matrices as lists of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearParams {
    pub a: Vec<Vec<f64>>,
    pub l: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpParams {
    /// CSV with columns `z_1..z_d, dz_1..dz_d`, resolved against the config file's directory.
    pub observations: PathBuf,
    #[serde(default = "default_nugget")]
    pub nugget: f64,
    /// Constant prior mean, zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_mean: Option<Vec<f64>>,
}

fn default_nugget() -> f64 {
    1e-6
}

/// Initial Gaussian; a missing covariance means a point mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Linearized,
    #[default]
    Matched,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RuleConfig {
    #[default]
    Cubature,
    GaussHermite {
        order: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianConfig {
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpkConfig {
    /// One `[lower, upper]` pair per axis (one or two axes).
    pub bounds: Vec<[f64; 2]>,
    pub points: usize,
    pub t: f64,
    #[serde(default = "default_evolution")]
    pub evolution: Evolution,
}

fn default_evolution() -> Evolution {
    Evolution::MatrixExp
}

impl Default for FpkConfig {
    fn default() -> Self {
        Self { bounds: vec![[-6.0, 6.0]], points: 201, t: 1.0, evolution: Evolution::MatrixExp }
    }
}

/// Tensor grid on which `gp-fit` dumps the posterior field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryConfig {
    pub bounds: Vec<[f64; 2]>,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_bench_dt")]
    pub dt: f64,
    /// Euler–Maruyama step; the moment step when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub em_dt: Option<f64>,
    /// Number of evaluation times, evenly spaced up to the horizon.
    #[serde(default = "default_eval_count")]
    pub eval_count: usize,
    /// Largest ensemble the trajectory-count search may try.
    #[serde(default = "default_cap")]
    pub cap: usize,
    /// Moment-ODE integrator; Euler matches the Euler–Maruyama baseline step for step.
    #[serde(default = "default_bench_method")]
    pub method: Method,
}

fn default_bench_method() -> Method {
    Method::Euler
}

fn default_dims() -> Vec<usize> {
    vec![10, 50, 200]
}
fn default_horizon() -> f64 {
    10.0
}
fn default_bench_dt() -> f64 {
    0.1
}
fn default_eval_count() -> usize {
    100
}
fn default_cap() -> usize {
    1_000_000
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dims: default_dims(),
            horizon: default_horizon(),
            dt: default_bench_dt(),
            em_dt: None,
            eval_count: default_eval_count(),
            cap: default_cap(),
            method: default_bench_method(),
        }
    }
}

fn default_grid() -> TimeGrid {
    TimeGrid { t0: 0.0, t1: 1.0, dt: 0.01 }
}
fn default_n() -> usize {
    1000
}
fn default_repeats() -> usize {
    10
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benes: Option<BenesParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<LinearParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gp: Option<GpParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitConfig>,
    #[serde(default = "default_grid")]
    pub grid: TimeGrid,
    #[serde(default)]
    pub scheme: SchemeKind,
    #[serde(default)]
    pub rule: RuleConfig,
    #[serde(default)]
    pub jacobian: JacobianConfig,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    /// Ensemble size for `sample`.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub dump_paths: bool,
    #[serde(default)]
    pub fpk: FpkConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gp_query: Option<QueryConfig>,
    #[serde(default)]
    pub bench: BenchConfig,
    /// Timed runs per measurement, after one discarded warm-up run.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Worker cap; the global pool when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Benes,
            benes: Some(BenesParams { z0: vec![0.5] }),
            linear: None,
            gp: None,
            kernel: None,
            init: None,
            grid: default_grid(),
            scheme: SchemeKind::default(),
            rule: RuleConfig::default(),
            jacobian: JacobianConfig::default(),
            method: Method::default(),
            seed: 0,
            n: default_n(),
            dump_paths: false,
            fpk: FpkConfig::default(),
            gp_query: None,
            bench: BenchConfig::default(),
            repeats: default_repeats(),
            threads: None,
            out: default_out(),
        }
    }
}

/// A constructed model of any supported kind.
pub enum Model {
    Benes(BenesModel),
    Linear(LinearModel),
    Gp(GpSdeModel),
}

impl Model {
    pub fn as_dyn(&self) -> &dyn SdeModel {
        match self {
            Model::Benes(m) => m,
            Model::Linear(m) => m,
            Model::Gp(m) => m,
        }
    }
}

fn cfg_err(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {msg}"))
}

fn matrix(path: &str, rows: &[Vec<f64>], cols: Option<usize>) -> CliResult<DMatrix<f64>> {
    let n = rows.len();
    let m = cols.unwrap_or_else(|| rows.first().map_or(0, Vec::len));
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
        return Err(cfg_err(&format!("{path}[{i}]"), format!("expected {m} columns, got {}", r.len())));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl RunConfig {
    /// Parses a JSON config; errors name the offending field path.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner()))
        })
    }

    /// Loads a config file. Relative observation paths are resolved against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(gp), Some(dir)) = (cfg.gp.as_mut(), path.parent()) {
            if gp.observations.is_relative() {
                gp.observations = dir.join(&gp.observations);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn time_grid(&self) -> CliResult<TimeGrid> {
        self.grid.validate().map_err(|e| cfg_err("grid", e))?;
        Ok(self.grid)
    }

    pub fn build_model(&self) -> CliResult<Model> {
        match self.model {
            ModelKind::Benes => {
                let p = self.benes.as_ref().ok_or_else(|| cfg_err("benes", "required for model \"benes\""))?;
                if p.z0.is_empty() {
                    return Err(cfg_err("benes.z0", "must be non-empty"));
                }
                Ok(Model::Benes(make_benes(p.z0.len(), DVector::from_vec(p.z0.clone()))))
            }
            ModelKind::Linear => {
                let p = self.linear.as_ref().ok_or_else(|| cfg_err("linear", "required for model \"linear\""))?;
                let a = matrix("linear.a", &p.a, None)?;
                if a.nrows() == 0 || a.nrows() != a.ncols() {
                    return Err(cfg_err(
                        "linear.a",
                        format!("must be square and non-empty, got {}x{}", a.nrows(), a.ncols()),
                    ));
                }
                let l = matrix("linear.l", &p.l, None)?;
                if l.nrows() != a.nrows() {
                    return Err(cfg_err("linear.l", format!("needs {} rows, got {}", a.nrows(), l.nrows())));
                }
                Ok(Model::Linear(make_linear(a, l)))
            }
            ModelKind::Gp => {
                let p = self.gp.as_ref().ok_or_else(|| cfg_err("gp", "required for model \"gp\""))?;
                let field = self.fit_field(p)?;
                Ok(Model::Gp(make_gp_sde(field)))
            }
        }
    }

    /// Fits the GP posterior named by the `gp` and `kernel` sections.
    pub fn fit_field(&self, p: &GpParams) -> CliResult<PosteriorField> {
        let spec = self.kernel.ok_or_else(|| cfg_err("kernel", "required for model \"gp\""))?;
        let obs = VectorFieldObservations::from_csv_path(&p.observations).map_err(|e| match e {
            sdemoments::Error::Io(io) => CliError::Io(format!("{}: {io}", p.observations.display())),
            other => cfg_err("gp.observations", other),
        })?;
        if obs.dim() != spec.dim {
            return Err(cfg_err(
                "kernel.dim",
                format!("{} does not match observation dimension {}", spec.dim, obs.dim()),
            ));
        }
        let mean = match &p.prior_mean {
            Some(m) if m.len() != spec.dim => {
                return Err(cfg_err("gp.prior_mean", format!("needs {} entries, got {}", spec.dim, m.len())))
            }
            Some(m) => DVector::from_vec(m.clone()),
            None => DVector::zeros(spec.dim),
        };
        if !(p.nugget >= 0.0) {
            return Err(cfg_err("gp.nugget", "must be non-negative"));
        }
        PosteriorField::fit(&obs, spec, p.nugget, mean).map_err(|e| CliError::numerical("gp-fit", e))
    }

    /// Initial moments: `init` when given, else a point mass at the Beneš `z0`.
    pub fn initial_state(&self, dim: usize) -> CliResult<MomentState> {
        let (mean, cov) = match (&self.init, &self.benes) {
            (Some(init), _) => {
                let cov = match &init.cov {
                    Some(rows) => matrix("init.cov", rows, None)?,
                    None => DMatrix::zeros(init.mean.len(), init.mean.len()),
                };
                (DVector::from_vec(init.mean.clone()), cov)
            }
            (None, Some(b)) if self.model == ModelKind::Benes => {
                (DVector::from_vec(b.z0.clone()), DMatrix::zeros(b.z0.len(), b.z0.len()))
            }
            _ => return Err(cfg_err("init", "required for this model")),
        };
        if mean.len() != dim {
            return Err(cfg_err("init.mean", format!("needs {dim} entries, got {}", mean.len())));
        }
        if cov.shape() != (dim, dim) {
            return Err(cfg_err("init.cov", format!("must be {dim}x{dim}")));
        }
        MomentState::new(mean, cov).map_err(|e| cfg_err("init", e))
    }

    pub fn initial_condition(&self, dim: usize) -> CliResult<InitialCondition> {
        let state = self.initial_state(dim)?;
        Ok(if state.cov.iter().all(|v| *v == 0.0) {
            InitialCondition::Point(state.mean)
        } else {
            InitialCondition::Gaussian(state)
        })
    }

    pub fn quadrature(&self, dim: usize) -> CliResult<QuadratureRule> {
        match self.rule {
            RuleConfig::Cubature => Ok(cubature_rule(dim)),
            RuleConfig::GaussHermite { order } => gauss_hermite_rule(dim, order).map_err(|e| cfg_err("rule", e)),
        }
    }

    pub fn moment_scheme(&self, dim: usize) -> CliResult<Scheme> {
        Ok(match self.scheme {
            SchemeKind::Linearized => Scheme::Linearized(match self.jacobian {
                JacobianConfig::Analytic => JacobianMode::Analytic,
                JacobianConfig::FiniteDifference => JacobianMode::FiniteDifferenceFallback,
            }),
            SchemeKind::Matched => Scheme::Matched(self.quadrature(dim)?),
        })
    }

    pub fn fpk_grid(&self) -> CliResult<GridSpec> {
        let b = &self.fpk.bounds;
        GridSpec::new(b.iter().map(|x| x[0]).collect(), b.iter().map(|x| x[1]).collect(), self.fpk.points)
            .map_err(|e| cfg_err("fpk", e))
    }
}
