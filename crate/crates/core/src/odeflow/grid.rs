//! Spectral grids for the ρ-integrals.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{HmlError, Result};
use crate::quadrature::gauss_legendre;

/// Edges (ρ_min, ρ_max) = ((1−√δ)², (1+√δ)²) of the Marchenko–Pastur law.
pub fn mp_edges(delta: f64) -> (f64, f64) {
    let s = delta.sqrt();
    ((1.0 - s).powi(2), (1.0 + s).powi(2))
}

/// Marchenko–Pastur density for 0 < δ ≤ 1; zero outside the support.
pub fn mp_density(delta: f64, rho: f64) -> Result<f64> {
    check_delta(delta)?;
    let (lo, hi) = mp_edges(delta);
    if rho <= lo || rho >= hi {
        return Ok(0.0);
    }
    Ok(((hi - rho) * (rho - lo)).sqrt() / (2.0 * PI * delta * rho))
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(HmlError::InvalidArgument(format!(
            "Marchenko-Pastur grid needs 0 < delta <= 1 (got {delta}); use the empirical spectrum instead"
        )));
    }
    Ok(())
}

/// How a grid was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GridMode {
    MarchenkoPastur { delta: f64 },
    Empirical { eigenvalues: Vec<f64> },
}

/// Quadrature nodes ρ_i and probability weights u_i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub mode: GridMode,
}

impl SpectralGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Σ_i u_i f(ρ_i).
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&r, &u)| u * f(r)).sum()
    }

    /// Index of the node closest to `rho`.
    pub fn nearest(&self, rho: f64) -> usize {
        let i = self.nodes.partition_point(|&x| x < rho);
        if i == 0 {
            0
        } else if i == self.nodes.len() {
            i - 1
        } else if (self.nodes[i] - rho).abs() < (rho - self.nodes[i - 1]).abs() {
            i
        } else {
            i - 1
        }
    }

    /// A single node at ρ carrying all the mass.
    pub fn point(rho: f64) -> Self {
        Self { nodes: vec![rho], weights: vec![1.0], mode: GridMode::Empirical { eigenvalues: vec![rho] } }
    }
}

/// Build a grid.
///
/// Marchenko–Pastur mode places Gauss–Legendre nodes in the angle θ of
/// ρ = (1+δ) + 2√δ cos θ. In that variable the density times dρ is smooth,
/// so the rule converges spectrally despite the square-root edges.
/// Empirical mode merges eigenvalues closer than 1e-9 (relative) and weights
/// each cluster by its fraction of the spectrum; `node_count` is ignored.
pub fn make_grid(mode: GridMode, node_count: usize) -> Result<SpectralGrid> {
    match &mode {
        GridMode::MarchenkoPastur { delta } => {
            let delta = *delta;
            check_delta(delta)?;
            if node_count == 0 {
                return Err(HmlError::InvalidArgument("grid needs at least one node".into()));
            }
            let rule = gauss_legendre(node_count);
            let centre = 1.0 + delta;
            let half = 2.0 * delta.sqrt();
            let mut pairs: Vec<(f64, f64)> = rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(&x, &w)| {
                    let theta = 0.5 * PI * (x + 1.0);
                    let rho = centre + half * theta.cos();
                    let s = theta.sin();
                    let u = 0.5 * PI * w * half * half * s * s / (2.0 * PI * delta * rho);
                    (rho, u)
                })
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total: f64 = pairs.iter().map(|p| p.1).sum();
            Ok(SpectralGrid {
                nodes: pairs.iter().map(|p| p.0).collect(),
                weights: pairs.iter().map(|p| p.1 / total).collect(),
                mode,
            })
        }
        GridMode::Empirical { eigenvalues } => {
            if eigenvalues.is_empty() {
                return Err(HmlError::InvalidArgument("empirical grid needs at least one eigenvalue".into()));
            }
            let mut ev = eigenvalues.clone();
            ev.sort_by(f64::total_cmp);
            let scale = ev.iter().fold(1.0f64, |a, &x| a.max(x.abs()));
            let tol = 1e-9 * scale;
            let total = ev.len() as f64;
            let mut nodes = Vec::new();
            let mut weights = Vec::new();
            let mut start = 0;
            for i in 1..=ev.len() {
                if i == ev.len() || ev[i] - ev[i - 1] > tol {
                    let cluster = &ev[start..i];
                    nodes.push(cluster.iter().sum::<f64>() / cluster.len() as f64);
                    weights.push(cluster.len() as f64 / total);
                    start = i;
                }
            }
            Ok(SpectralGrid { nodes, weights, mode })
        }
    }
}
