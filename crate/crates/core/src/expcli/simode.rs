//! Simulation against the integrated order-parameter flow.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GridChoice};
use crate::datagen::FeatureKind;
use crate::error::Result;
use crate::odeflow::{default_dt, integrate, make_grid, FlowState, GridMode, SpectralGrid};
use crate::orderparams::Trajectory;
use crate::student::{train, Setup, TestSet};

use super::output::Outputs;

/// Absolute floor and relative part of the sim-vs-ODE tolerance.
pub const ABS_TOL: f64 = 0.01;
pub const REL_TOL: f64 = 0.10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimOdeReport {
    pub window: (f64, f64),
    pub max_abs_dev: f64,
    pub mean_abs_dev: f64,
    /// Largest |ε_sim − ε_ode| / max(ABS_TOL, REL_TOL·ε_ode) in the window;
    /// the runs agree when this is at most 1.
    pub worst_tolerance_ratio: f64,
    pub sim_diverged_at: Option<f64>,
    pub grid_nodes: usize,
    pub dt: f64,
}

#[derive(Debug, Clone)]
pub struct SimOde {
    pub sim: Trajectory,
    pub ode: Trajectory,
    pub initial: FlowState,
    pub report: SimOdeReport,
}

/// The spectral grid a configuration asks for. Hadamard features always use
/// their exact spectrum, which is the single node ρ = 1.
pub fn flow_grid(cfg: &ExperimentConfig, setup: &Setup) -> Result<SpectralGrid> {
    let empirical = GridMode::Empirical { eigenvalues: setup.spectrum.eigenvalues.clone() };
    match (setup.features.kind, cfg.grid) {
        (FeatureKind::Hadamard, _) | (_, GridChoice::Empirical) => make_grid(empirical, cfg.grid_nodes),
        (_, GridChoice::Mp) => make_grid(GridMode::MarchenkoPastur { delta: setup.features.delta() }, cfg.grid_nodes),
    }
}

/// Flow state measured from the setup's initial weights.
pub fn initial_flow(cfg: &ExperimentConfig, setup: &Setup) -> Result<FlowState> {
    let grid = flow_grid(cfg, setup)?;
    FlowState::from_weights(
        &setup.student,
        &setup.teacher,
        &setup.features,
        &setup.spectrum,
        grid,
        &setup.coefficients,
        cfg.eta,
    )
}

pub fn step_size(cfg: &ExperimentConfig) -> f64 {
    cfg.dt.unwrap_or_else(|| if cfg.eta > 0.0 { default_dt(cfg.eta, cfg.delta()) } else { 0.1 })
}

/// Max and mean |a − b| over common snapshot times in [lo, hi], and the
/// worst ratio to the tolerance max(ABS_TOL, REL_TOL·ε_ode).
pub fn deviation(sim: &Trajectory, ode: &Trajectory, lo: f64, hi: f64) -> (f64, f64, f64) {
    let (mut max, mut sum, mut count, mut worst) = (0.0f64, 0.0, 0usize, 0.0f64);
    for (i, &t) in sim.times.iter().enumerate() {
        if t < lo - 1e-9 || t > hi + 1e-9 {
            continue;
        }
        let Some(j) = ode.times.iter().position(|&u| (u - t).abs() <= 1e-9 * t.max(1.0)) else { continue };
        let dev = (sim.eps[i] - ode.eps[j]).abs();
        max = max.max(dev);
        sum += dev;
        count += 1;
        worst = worst.max(dev / ABS_TOL.max(REL_TOL * ode.eps[j]));
    }
    if count == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    (max, sum / count as f64, worst)
}

/// Train once and integrate the flow from the same initial weights, on the
/// same snapshot times. Deviations are measured for t ≥ 1.
pub fn sim_vs_ode(cfg: &ExperimentConfig) -> Result<SimOde> {
    let setup = Setup::from_config(cfg)?;
    let test = TestSet::sample(&setup.features, &setup.folding, &setup.teacher, cfg.p_test, cfg.seed)?;
    let initial = initial_flow(cfg, &setup)?;
    let sim = train(&setup, setup.student.clone(), &test, cfg)?;
    let dt = step_size(cfg);
    let ode = integrate(&initial, dt, cfg.t_max, &sim.times)?;
    let window = (1.0f64.min(cfg.t_max), cfg.t_max);
    let (max_abs_dev, mean_abs_dev, worst) = deviation(&sim, &ode, window.0, window.1);
    let report = SimOdeReport {
        window,
        max_abs_dev,
        mean_abs_dev,
        worst_tolerance_ratio: worst,
        sim_diverged_at: sim.diverged_at,
        grid_nodes: initial.grid.len(),
        dt,
    };
    Ok(SimOde { sim, ode, initial, report })
}

/// [`sim_vs_ode`] writing `sim.csv`, `ode.csv`, `report.json` and the manifest.
pub fn run_sim_vs_ode(cfg: &ExperimentConfig, dir: &Path) -> Result<SimOde> {
    let run = sim_vs_ode(cfg)?;
    let mut out = Outputs::create(dir, "compare", cfg)?;
    out.trajectory("sim.csv", &run.sim)?;
    out.trajectory("ode.csv", &run.ode)?;
    out.json("report.json", &run.report)?;
    out.finish()?;
    Ok(run)
}

/// Train only, writing `sim.csv`.
pub fn run_train(cfg: &ExperimentConfig, dir: &Path) -> Result<Trajectory> {
    let traj = crate::student::train_online(cfg)?;
    let mut out = Outputs::create(dir, "train", cfg)?;
    out.trajectory("sim.csv", &traj)?;
    out.finish()?;
    Ok(traj)
}

/// Integrate only, from the configured initial weights, writing `ode.csv`.
pub fn run_ode(cfg: &ExperimentConfig, dir: &Path) -> Result<Trajectory> {
    let setup = Setup::from_config(cfg)?;
    let initial = initial_flow(cfg, &setup)?;
    let times = cfg.snapshots.times(cfg.t_max, cfg.n);
    let traj = integrate(&initial, step_size(cfg), cfg.t_max, &times)?;
    let mut out = Outputs::create(dir, "ode", cfg)?;
    out.trajectory("ode.csv", &traj)?;
    out.finish()?;
    Ok(traj)
}
