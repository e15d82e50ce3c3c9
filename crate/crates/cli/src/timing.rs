// SPDX-License-Identifier: Apache-2.0

//! Wall-clock timing on the monotonic clock.

use std::time::Instant;

use serde::{Deserialize, Serialize};

/// One timed phase as recorded in the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub label: String,
    /// Mean over the timed runs.
    pub wall_ms: f64,
    /// Every timed run, warm-up excluded.
    pub runs_ms: Vec<f64>,
}

/// Runs `work` once and reports its elapsed wall-clock milliseconds.
pub fn time_phase<T>(label: &str, work: impl FnOnce() -> T) -> (T, Phase) {
    let start = Instant::now();
    let out = work();
    let ms = start.elapsed().as_secs_f64() * 1e3;
    (out, Phase { label: label.to_string(), wall_ms: ms, runs_ms: vec![ms] })
}

/// Times `repeats` runs of `work` after one discarded warm-up run.
///
/// Returns the warm-up run's result; the timed runs execute the same work.
pub fn time_repeated<T, E>(
    label: &str,
    repeats: usize,
    mut work: impl FnMut() -> Result<T, E>,
) -> Result<(T, Phase), E> {
    let out = work()?;
    let mut runs_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(work()?);
        runs_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((out, phase_from_runs(label, runs_ms)))
}

/// Times several work items round-robin.
///
/// Each gets one discarded warm-up run, then `repeats` rounds run every item
/// once in turn, so background load drifts hit all of them alike.
pub fn time_interleaved<T, E>(
    labels: &[&str],
    repeats: usize,
    work: &mut [&mut dyn FnMut() -> Result<T, E>],
) -> Result<(Vec<T>, Vec<Phase>), E> {
    assert_eq!(labels.len(), work.len(), "one label per work item");
    let mut outs = Vec::with_capacity(work.len());
    for w in work.iter_mut() {
        outs.push(w()?);
    }
    let mut runs: Vec<Vec<f64>> = vec![Vec::with_capacity(repeats); work.len()];
    for _ in 0..repeats {
        for (w, r) in work.iter_mut().zip(runs.iter_mut()) {
            let start = Instant::now();
            std::hint::black_box(w()?);
            r.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let phases = labels.iter().zip(runs).map(|(l, r)| phase_from_runs(l, r)).collect();
    Ok((outs, phases))
}

fn phase_from_runs(label: &str, runs_ms: Vec<f64>) -> Phase {
    let wall_ms = if runs_ms.is_empty() { 0.0 } else { runs_ms.iter().sum::<f64>() / runs_ms.len() as f64 };
    Phase { label: label.to_string(), wall_ms, runs_ms }
}
