//! Students of increasing width trained on the same data stream.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HmlError, Result};
use crate::orderparams::Trajectory;
use crate::student::{train, Setup, TestSet};

use super::output::Outputs;

#[derive(Debug, Clone)]
pub struct ComplexityRun {
    pub k_values: Vec<usize>,
    pub trajectories: Vec<Trajectory>,
}

/// Per-K summary row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub k: usize,
    pub final_eps: f64,
    /// Largest |ε_K/ε_1 − 1| over the plateau window.
    pub plateau_rel_dev: f64,
}

impl ComplexityRun {
    /// First snapshot time from which the narrowest curve stays within
    /// relative distance `rel` of its final value.
    pub fn settle_time(&self, rel: f64) -> Option<f64> {
        let base = self.trajectories.first()?;
        let last = base.final_eps()?;
        let mut settle = None;
        for (&t, &e) in base.times.iter().zip(&base.eps).rev() {
            if (e / last - 1.0).abs() > rel {
                break;
            }
            settle = Some(t);
        }
        settle
    }

    /// Compare every curve with the first (narrowest) one over snapshot
    /// times in `[lo, hi]`.
    pub fn summary(&self, lo: f64, hi: f64) -> Vec<ComplexityRow> {
        let base = &self.trajectories[0];
        self.k_values
            .iter()
            .zip(&self.trajectories)
            .map(|(&k, tr)| {
                let dev = tr
                    .times
                    .iter()
                    .zip(&tr.eps)
                    .filter(|(t, _)| **t >= lo && **t <= hi)
                    .filter_map(|(&t, &e)| base.eps_at(t).map(|b| (e / b - 1.0).abs()))
                    .fold(0.0, f64::max);
                ComplexityRow { k, final_eps: tr.final_eps().unwrap_or(f64::NAN), plateau_rel_dev: dev }
            })
            .collect()
    }
}

/// Train one student per entry of `cfg.k_list`. Features, teacher, test set
/// and the training stream depend only on the seed, so every width sees the
/// same samples in the same order.
pub fn complexity(cfg: &ExperimentConfig) -> Result<ComplexityRun> {
    if cfg.k_list.is_empty() {
        return Err(HmlError::Config("k_list is empty".into()));
    }
    let mut k_values = cfg.k_list.clone();
    k_values.sort_unstable();
    k_values.dedup();
    let base = Setup::from_config(&ExperimentConfig { k: k_values[0], ..cfg.clone() })?;
    let test = TestSet::sample(&base.features, &base.folding, &base.teacher, cfg.p_test, cfg.seed)?;
    let trajectories = k_values
        .par_iter()
        .map(|&k| {
            let c = ExperimentConfig { k, ..cfg.clone() };
            let student = crate::datagen::NetworkParams::random_student(
                k,
                cfg.n,
                cfg.init_std,
                cfg.student_activation,
                cfg.seed,
            );
            train(&base, student, &test, &c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComplexityRun { k_values, trajectories })
}

/// [`complexity`] writing `k<K>.csv` per width and the manifest.
pub fn run_complexity(cfg: &ExperimentConfig, dir: &Path) -> Result<ComplexityRun> {
    let run = complexity(cfg)?;
    let mut out = Outputs::create(dir, "complexity", cfg)?;
    for (k, tr) in run.k_values.iter().zip(&run.trajectories) {
        out.trajectory(&format!("k{k}.csv"), tr)?;
    }
    out.finish()?;
    Ok(run)
}
