// SPDX-License-Identifier: Apache-2.0

//! Command-line front end: JSON run configs, subcommands writing CSV artifacts
//! plus a JSON manifest, and warm-up-discarding wall-clock timing.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod timing;

use std::path::PathBuf;

pub use commands::{read_bench, read_moments, run, BenchRow, EvalTally, Manifest, Subcommand};
pub use config::RunConfig;
pub use error::{CliError, CliResult};

use sdemoments::odeint::Method;

use crate::config::{QueryConfig, SchemeKind};

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub repeats: Option<usize>,
    pub t0: Option<f64>,
    pub t1: Option<f64>,
    pub dt: Option<f64>,
    pub method: Option<Method>,
    pub scheme: Option<SchemeKind>,
    pub n: Option<usize>,
    pub dump_paths: bool,
    pub bounds: Option<Vec<[f64; 2]>>,
    pub points: Option<usize>,
    pub t: Option<f64>,
    pub dims: Option<Vec<usize>>,
    pub horizon: Option<f64>,
    pub em_dt: Option<f64>,
}

impl Overrides {
    /// Applies the overrides. `--dt` and `--method` set the benchmark fields for
    /// `bench-benes` and the top-level ones otherwise; `--bounds`/`--points` go to the query grid
    /// for `gp-fit` and to the FPK grid otherwise.
    pub fn apply(&self, cmd: Subcommand, cfg: &mut RunConfig) {
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.threads {
            cfg.threads = Some(v);
        }
        if let Some(v) = self.repeats {
            cfg.repeats = v;
        }
        if let Some(v) = self.t0 {
            cfg.grid.t0 = v;
        }
        if let Some(v) = self.t1 {
            cfg.grid.t1 = v;
        }
        if let Some(v) = self.dt {
            if cmd == Subcommand::BenchBenes {
                cfg.bench.dt = v;
            } else {
                cfg.grid.dt = v;
            }
        }
        if let Some(v) = self.method {
            if cmd == Subcommand::BenchBenes {
                cfg.bench.method = v;
            } else {
                cfg.method = v;
            }
        }
        if let Some(v) = self.scheme {
            cfg.scheme = v;
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if self.dump_paths {
            cfg.dump_paths = true;
        }
        if cmd == Subcommand::GpFit {
            if self.bounds.is_some() || self.points.is_some() {
                let q = cfg.gp_query.get_or_insert_with(|| QueryConfig { bounds: Vec::new(), points: 20 });
                if let Some(v) = &self.bounds {
                    q.bounds = v.clone();
                }
                if let Some(v) = self.points {
                    q.points = v;
                }
            }
        } else {
            if let Some(v) = &self.bounds {
                cfg.fpk.bounds = v.clone();
            }
            if let Some(v) = self.points {
                cfg.fpk.points = v;
            }
        }
        if let Some(v) = self.t {
            cfg.fpk.t = v;
        }
        if let Some(v) = &self.dims {
            cfg.bench.dims = v.clone();
        }
        if let Some(v) = self.horizon {
            cfg.bench.horizon = v;
        }
        if let Some(v) = self.em_dt {
            cfg.bench.em_dt = Some(v);
        }
    }
}

/// Parses `lo:hi[,lo:hi]` into axis bounds.
pub fn parse_bounds(s: &str) -> Result<Vec<[f64; 2]>, String> {
    s.split(',')
        .map(|axis| {
            let (lo, hi) = axis.split_once(':').ok_or_else(|| format!("expected lo:hi, got {axis:?}"))?;
            let lo: f64 = lo.trim().parse().map_err(|e| format!("{lo:?}: {e}"))?;
            let hi: f64 = hi.trim().parse().map_err(|e| format!("{hi:?}: {e}"))?;
            Ok([lo, hi])
        })
        .collect()
}
