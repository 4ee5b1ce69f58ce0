//! Drivers for data generation, Gaussian-equivalence checks and fixed points.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::datagen::{fold_inputs, teacher_labels, LatentBatch, NetworkParams};
use crate::error::Result;
use crate::gepcheck::{gep_check, sample_local_fields, GepReport};
use crate::reduced::{find_fixed_points, FixedPointClass, FixedPointSearch, ReducedState, TeacherConstants};
use crate::rng::Purpose;
use crate::student::Setup;

use super::output::Outputs;

/// Write `p_train` latents, folded inputs and teacher labels as CSV.
pub fn run_gen(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let setup = Setup::from_config(cfg)?;
    let latents = LatentBatch::sample(cfg.p_train, cfg.d, cfg.seed, Purpose::TrainLatents, 0);
    let inputs = fold_inputs(&latents, &setup.features, &setup.folding)?;
    let labels = teacher_labels(&latents, &setup.teacher)?;
    let mut out = Outputs::create(dir, "gen", cfg)?;
    let rows = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    };
    out.rows("latents.csv", &rows(&latents.entries))?;
    out.rows("inputs.csv", &rows(&inputs.entries))?;
    out.rows("labels.csv", &labels.iter().map(|y| (y,)).collect::<Vec<_>>())?;
    out.finish()?;
    Ok(())
}

/// The student used by the equivalence check: the configured random
/// student plus, for unit k, the lift Fᵀw̃_{k mod M}/√N of a teacher row.
/// The lift gives S ≈ W̃ and R ≈ bT, the overlaps of a specialised student.
pub fn gep_student(setup: &Setup) -> NetworkParams {
    let mut student = setup.student.clone();
    let scale = (setup.features.delta()).sqrt();
    let lifted = setup.features.project_columns(&setup.teacher.w.transpose()) * scale;
    for k in 0..student.hidden() {
        let m = k % setup.teacher.hidden();
        for i in 0..student.input_dim() {
            student.w[(k, i)] += lifted[(i, m)];
        }
    }
    student
}

/// Sample local fields and compare them with the measured order parameters.
pub fn gep(cfg: &ExperimentConfig, samples: usize, fourth_moments: bool) -> Result<GepReport> {
    let setup = Setup::from_config(cfg)?;
    let student = gep_student(&setup);
    let op = setup.measure(&student)?;
    let fields = sample_local_fields(&student, &setup.teacher, &setup.features, &setup.folding, samples, cfg.seed)?;
    gep_check(&fields, &op, fourth_moments)
}

pub fn run_gep(cfg: &ExperimentConfig, samples: usize, dir: &Path) -> Result<GepReport> {
    let rep = gep(cfg, samples, true)?;
    let mut out = Outputs::create(dir, "gep", cfg)?;
    out.json("gep.json", &rep)?;
    out.finish()?;
    Ok(rep)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedPointRow {
    pub class: FixedPointClass,
    pub eps: f64,
    pub residual: f64,
    pub big_r: f64,
    pub r: f64,
    pub big_s: f64,
    pub s: f64,
    pub big_w: f64,
    pub w: f64,
    pub v: f64,
}

/// Fixed points of the reduced flow at the configured K, M, η and δ.
pub fn fixed_points(cfg: &ExperimentConfig) -> Result<FixedPointSearch> {
    let base = ReducedState::new(cfg.k, cfg.m, cfg.eta, cfg.delta(), TeacherConstants::perturbed(cfg.x));
    find_fixed_points(&base, cfg.n_starts, cfg.seed)
}

pub fn run_fixed_points(cfg: &ExperimentConfig, dir: &Path) -> Result<FixedPointSearch> {
    let search = fixed_points(cfg)?;
    let rows: Vec<FixedPointRow> = search
        .points
        .iter()
        .map(|p| FixedPointRow {
            class: p.class,
            eps: p.eps,
            residual: p.residual,
            big_r: p.state.big_r,
            r: p.state.r,
            big_s: p.state.big_s,
            s: p.state.s,
            big_w: p.state.big_w,
            w: p.state.w,
            v: p.state.v,
        })
        .collect();
    let mut out = Outputs::create(dir, "fp", cfg)?;
    out.rows("fixed_points.csv", &rows)?;
    out.finish()?;
    Ok(search)
}
