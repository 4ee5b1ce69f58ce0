//! Convergence checks of the numerics.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::datagen::{Activation, NetworkParams, Role};
use crate::error::Result;
use crate::odeflow::{dt_audit, integrate_to, make_grid, FlowState, GridMode, StepAudit};
use crate::rng::{self, Purpose};
use crate::student::{finite_difference_error, Setup};

use super::output::Outputs;
use super::simode::{initial_flow, step_size};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeAudit {
    pub nodes: usize,
    /// max |R(n nodes) − R(2n nodes)| at t_max.
    pub max_r_change: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub step: StepAudit,
    pub nodes: NodeAudit,
    /// Worst relative SGD-vs-finite-difference error over the small instances.
    pub gradient_max_rel: f64,
    pub gradient_instances: usize,
}

/// Final ε_g at dt and dt/2 for the configured run.
pub fn step_audit(cfg: &ExperimentConfig) -> Result<StepAudit> {
    let setup = Setup::from_config(cfg)?;
    let initial = initial_flow(cfg, &setup)?;
    dt_audit(&initial, step_size(cfg), cfg.t_max)
}

/// Integrate on the Marchenko–Pastur grid with `cfg.grid_nodes` and twice as
/// many nodes, both from ρ-independent densities built from the measured
/// initial order parameters, and compare the assembled R at t_max.
pub fn node_audit(cfg: &ExperimentConfig) -> Result<NodeAudit> {
    let setup = Setup::from_config(cfg)?;
    let op = setup.measure(&setup.student)?;
    let delta = cfg.delta();
    let run = |nodes: usize| -> Result<FlowState> {
        let grid = make_grid(GridMode::MarchenkoPastur { delta }, nodes)?;
        let st = FlowState::from_order_params(
            &op,
            grid,
            delta,
            cfg.eta,
            setup.student.activation,
            setup.teacher.activation,
        )?;
        integrate_to(&st, step_size(cfg), cfg.t_max)
    };
    let a = run(cfg.grid_nodes)?.order_params().r;
    let b = run(2 * cfg.grid_nodes)?.order_params().r;
    Ok(NodeAudit { nodes: cfg.grid_nodes, max_r_change: (a - b).amax() })
}

/// SGD against finite differences on `count` random networks with N ≤ 8.
pub fn gradient_audit(count: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..count {
        let k = 1 + i % 3;
        let n = 1 + i % 8;
        let act = if i % 2 == 0 { Activation::Erf } else { Activation::Relu };
        let row = |j: u64, len: usize| rng::normal_row(seed, Purpose::Covariances, 3 * i as u64 + j, len);
        let w = nalgebra::DMatrix::from_vec(k, n, row(0, k * n));
        let net = NetworkParams::new(w, DVector::from_vec(row(1, k)), act, Role::Student)?;
        let x = row(2, n);
        worst = worst.max(finite_difference_error(&net, &x, 0.37, 0.3)?);
    }
    Ok(worst)
}

pub const GRADIENT_INSTANCES: usize = 200;

pub fn audit(cfg: &ExperimentConfig) -> Result<AuditReport> {
    Ok(AuditReport {
        step: step_audit(cfg)?,
        nodes: node_audit(cfg)?,
        gradient_max_rel: gradient_audit(GRADIENT_INSTANCES, cfg.seed)?,
        gradient_instances: GRADIENT_INSTANCES,
    })
}

/// [`audit`] writing `audit.json` and the manifest.
pub fn run_audit(cfg: &ExperimentConfig, dir: &Path) -> Result<AuditReport> {
    let rep = audit(cfg)?;
    let mut out = Outputs::create(dir, "audit", cfg)?;
    out.json("audit.json", &rep)?;
    out.finish()?;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_agree_on_small_instances() {
        assert!(gradient_audit(60, 1).unwrap() <= 1e-6);
    }

    #[test]
    fn small_audit_runs() {
        let cfg = ExperimentConfig {
            n: 200,
            d: 10,
            t_max: 2.0,
            grid_nodes: 20,
            teacher_second: crate::datagen::SecondLayer::Constant(1.0),
            ..ExperimentConfig::default()
        };
        let rep = audit(&cfg).unwrap();
        assert!(rep.step.relative_change < 1e-2);
        assert!(rep.nodes.max_r_change < 1e-6, "{:?}", rep.nodes);
    }
}
