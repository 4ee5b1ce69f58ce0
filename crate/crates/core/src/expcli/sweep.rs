//! Parameter sweeps: simulated asymptotic error next to the reduced theory.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::datagen::SecondLayer;
use crate::error::{HmlError, Result};
use crate::orderparams::Trajectory;
use crate::reduced::{find_fixed_points, FixedPointClass, ReducedState, SweepKind, TeacherConstants};
use crate::student::train_online;

use super::output::Outputs;

/// Fraction of the final snapshots averaged for the asymptotic error.
const TAIL: f64 = 0.1;

/// One grid value of a sweep. Theory fields are `None` when no fixed point
/// was found; `failures` lists simulation seeds that diverged or errored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: SweepKind,
    pub value: f64,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub m: usize,
    pub eta: f64,
    pub sim_mean: f64,
    pub sim_std: f64,
    pub sim_seeds: usize,
    pub failures: usize,
    /// Mean over seeds of the first time ε_sim ≤ 2 ε_unspecialised.
    pub time_to_plateau: Option<f64>,
    pub theory_eps: Option<f64>,
    pub theory_unspecialised_eps: Option<f64>,
    pub theory_residual: Option<f64>,
    pub flagged: bool,
}

/// Configuration for one grid value.
pub fn point_config(kind: SweepKind, value: f64, base: &ExperimentConfig) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    match kind {
        SweepKind::Delta => {
            if !(value > 0.0 && value <= 1.0) {
                return Err(HmlError::InvalidArgument(format!("delta must lie in (0, 1], got {value}")));
            }
            c.n = (base.d as f64 / value).round() as usize;
        }
        SweepKind::Eta => c.eta = value,
        SweepKind::Width => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(HmlError::InvalidArgument(format!("width ratio must be a positive integer, got {value}")));
            }
            c.k = value as usize * base.m;
        }
    }
    Ok(c)
}

/// Mean ε over the last [`TAIL`] of the snapshot times.
pub fn asymptotic_eps(tr: &Trajectory) -> Option<f64> {
    let t_end = *tr.times.last()?;
    let tail: Vec<f64> =
        tr.times.iter().zip(&tr.eps).filter(|(t, _)| **t >= (1.0 - TAIL) * t_end).map(|(_, e)| *e).collect();
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

/// First snapshot time with ε ≤ `level`.
pub fn time_to_level(tr: &Trajectory, level: f64) -> Option<f64> {
    tr.times.iter().zip(&tr.eps).find(|(_, e)| **e <= level).map(|(t, _)| *t)
}

/// Reduced-theory fixed points for a configuration (T = 1, T̃ = 1 − x, t̃ = x).
pub fn theory_point(cfg: &ExperimentConfig) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let base = ReducedState::new(cfg.k, cfg.m, cfg.eta, cfg.delta(), TeacherConstants::perturbed(cfg.x));
    match find_fixed_points(&base, cfg.n_starts, cfg.seed) {
        Ok(search) => {
            let best = search.best_specialised();
            let unspec = search
                .points
                .iter()
                .filter(|p| p.class == FixedPointClass::Unspecialised)
                .map(|p| p.eps)
                .min_by(f64::total_cmp);
            Ok((best.map(|p| p.eps), unspec, best.map(|p| p.residual)))
        }
        Err(e) if e.is_numerical() => Ok((None, None, None)),
        Err(e) => Err(e),
    }
}

/// Run the sweep. Simulations use a teacher with ṽ = 1 and orthonormal rows
/// so that they match the reduced theory's T = 1; each point averages
/// `cfg.sweep_seeds` seeds.
pub fn sweep(kind: SweepKind, values: &[f64], cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(HmlError::InvalidArgument("empty sweep grid".into()));
    }
    if cfg.sweep_seeds == 0 {
        return Err(HmlError::Config("sweep_seeds must be positive".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut pc = point_config(kind, value, cfg)?;
        pc.teacher_second = SecondLayer::Constant(1.0);
        pc.teacher_orthonormal = true;
        let (theory_eps, theory_unspecialised_eps, theory_residual) = theory_point(&pc)?;
        let runs: Vec<Option<Trajectory>> = (0..cfg.sweep_seeds)
            .into_par_iter()
            .map(|s| {
                let c = ExperimentConfig { seed: cfg.seed + s as u64, ..pc.clone() };
                match train_online(&c) {
                    Ok(tr) if tr.diverged_at.is_none() => Ok(Some(tr)),
                    Ok(_) => Ok(None),
                    Err(e) if e.is_numerical() => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        let ok: Vec<&Trajectory> = runs.iter().flatten().collect();
        let finals: Vec<f64> = ok.iter().filter_map(|t| asymptotic_eps(t)).collect();
        let (sim_mean, sim_std) = mean_std(&finals);
        let time_to_plateau = theory_unspecialised_eps.and_then(|u| {
            let times: Vec<f64> = ok.iter().filter_map(|t| time_to_level(t, 2.0 * u)).collect();
            (times.len() == ok.len() && !times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64)
        });
        let failures = cfg.sweep_seeds - ok.len();
        rows.push(SweepRow {
            kind,
            value,
            n: pc.n,
            d: pc.d,
            k: pc.k,
            m: pc.m,
            eta: pc.eta,
            sim_mean,
            sim_std,
            sim_seeds: ok.len(),
            failures,
            time_to_plateau,
            theory_eps,
            theory_unspecialised_eps,
            theory_residual,
            flagged: failures > 0 || theory_eps.is_none(),
        });
    }
    Ok(rows)
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 { x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// [`sweep`] writing `sweep.csv` and the manifest.
pub fn run_sweep(kind: SweepKind, values: &[f64], cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<SweepRow>> {
    let rows = sweep(kind, values, cfg)?;
    let mut out = Outputs::create(dir, &format!("sweep-{}", kind.name()), cfg)?;
    out.rows("sweep.csv", &rows)?;
    out.finish()?;
    Ok(rows)
}
