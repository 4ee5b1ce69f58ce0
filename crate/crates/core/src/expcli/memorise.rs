//! Memorability of individual training samples after one epoch.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::datagen::{latent_columns, make_gaussian_features, Activation, Folding, NetworkParams, SecondLayer};
use crate::error::{HmlError, Result};
use crate::rng::{self, Purpose};
use crate::student::{step_with, SgdWorkspace};

use super::output::Outputs;

/// Memorability at or above this marks an easy sample.
pub const EASY: f64 = 0.9;
/// Memorability at or below this marks a hard sample.
pub const HARD: f64 = 0.1;

/// How inputs and labels of a synthetic data set are made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    /// i.i.d. standard normal inputs, teacher acting on the inputs.
    Gaussian,
    /// Manifold inputs, teacher acting on the inputs.
    #[serde(rename = "teachers")]
    TeacherS,
    /// Manifold inputs, teacher acting on the latent coordinates.
    Hmm,
}

impl DataKind {
    pub const ALL: [DataKind; 3] = [DataKind::Gaussian, DataKind::TeacherS, DataKind::Hmm];

    pub fn name(self) -> &'static str {
        match self {
            DataKind::Gaussian => "gaussian",
            DataKind::TeacherS => "teachers",
            DataKind::Hmm => "hmm",
        }
    }
}

/// A labelled training set, inputs stored one column per sample.
#[derive(Debug, Clone)]
pub struct DataSet {
    pub kind: DataKind,
    pub inputs: DMatrix<f64>,
    pub labels: Vec<f64>,
}

/// Build a data set of `cfg.p_train` samples. Teacher and student are ReLU
/// networks with `cfg.m` and `cfg.k` hidden units; labels are ±1 by the sign
/// of the teacher output relative to its median over the data set, so the
/// two classes are balanced.
pub fn make_dataset(kind: DataKind, cfg: &ExperimentConfig) -> Result<DataSet> {
    let (n, d, p) = (cfg.n, cfg.d, cfg.p_train);
    if p == 0 {
        return Err(HmlError::Config("p_train must be positive".into()));
    }
    let (inputs, latents) = match kind {
        DataKind::Gaussian => (latent_columns(n, p, cfg.seed, Purpose::GaussianInputs, 0), None),
        DataKind::TeacherS | DataKind::Hmm => {
            let f = make_gaussian_features(n, d, cfg.seed)?;
            let folding = Folding::from_name(&cfg.folding)?;
            let c = latent_columns(d, p, cfg.seed, Purpose::TrainLatents, 0);
            let mut x = f.project_columns(&c);
            x.apply(|u| *u = folding.apply(*u));
            (x, Some(c))
        }
    };
    let teacher_in = if kind == DataKind::Hmm { d } else { n };
    let teacher =
        NetworkParams::random_teacher(cfg.m, teacher_in, cfg.teacher_activation, SecondLayer::Normal, false, cfg.seed)?;
    let source = if kind == DataKind::Hmm { latents.as_ref().expect("latents") } else { &inputs };
    let raw: Vec<f64> = source.column_iter().map(|col| teacher.forward(col.as_slice())).collect::<Result<_>>()?;
    let mut sorted = raw.clone();
    sorted.sort_by(f64::total_cmp);
    let median = 0.5 * (sorted[(p - 1) / 2] + sorted[p / 2]);
    let labels = raw.iter().map(|&y| if y > median { 1.0 } else { -1.0 }).collect();
    Ok(DataSet { kind, inputs, labels })
}

/// Per-sample memorability of one data set, labels as given or permuted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemorabilityCurve {
    pub kind: DataKind,
    pub randomized: bool,
    /// Fraction of runs that classify sample μ correctly, in sample order.
    pub memorability: Vec<f64>,
    /// Mean training accuracy after one epoch.
    pub train_accuracy: f64,
}

impl MemorabilityCurve {
    pub fn sorted(&self) -> Vec<f64> {
        let mut s = self.memorability.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    pub fn frac_easy(&self) -> f64 {
        self.fraction(|m| m >= EASY)
    }

    pub fn frac_hard(&self) -> f64 {
        self.fraction(|m| m <= HARD)
    }

    /// max − min over samples.
    pub fn spread(&self) -> f64 {
        let max = self.memorability.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.memorability.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }

    fn fraction(&self, pred: impl Fn(f64) -> bool) -> f64 {
        self.memorability.iter().filter(|&&m| pred(m)).count() as f64 / self.memorability.len() as f64
    }
}

/// Train `cfg.runs` students for one epoch each (fresh initial weights and
/// sample order per run) and count correct signs per sample.
pub fn memorability(data: &DataSet, cfg: &ExperimentConfig, randomized: bool) -> Result<MemorabilityCurve> {
    if cfg.runs == 0 {
        return Err(HmlError::Config("runs must be positive".into()));
    }
    let p = data.labels.len();
    let n = data.inputs.nrows();
    let mut labels = data.labels.clone();
    if randomized {
        let mut r = rng::stream(cfg.seed, Purpose::Shuffle, u64::MAX);
        labels.shuffle(&mut r);
    }
    let tag = data.kind as u64;
    let hits: Vec<Vec<bool>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let run_seed = cfg.seed ^ ((tag + 1) << 48) ^ ((run as u64 + 1) << 32);
            let mut net = NetworkParams::random_student(cfg.k, n, cfg.init_std, cfg.student_activation, run_seed);
            let mut order: Vec<usize> = (0..p).collect();
            order.shuffle(&mut rng::stream(cfg.seed, Purpose::Shuffle, (tag << 32) | run as u64));
            let mut ws = SgdWorkspace::default();
            for &mu in &order {
                step_with(&mut net, data.inputs.column(mu).as_slice(), labels[mu], cfg.eta, &mut ws);
            }
            (0..p)
                .map(|mu| net.forward(data.inputs.column(mu).as_slice()).map(|y| y.signum() == labels[mu]))
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<_>>()?;
    let runs = cfg.runs as f64;
    let memorability: Vec<f64> =
        (0..p).map(|mu| hits.iter().filter(|h| h[mu]).count() as f64 / runs).collect();
    let train_accuracy = memorability.iter().sum::<f64>() / p as f64;
    Ok(MemorabilityCurve { kind: data.kind, randomized, memorability, train_accuracy })
}

/// Summary row of one curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemorabilityRow {
    pub kind: DataKind,
    pub randomized: bool,
    pub train_accuracy: f64,
    pub frac_easy: f64,
    pub frac_hard: f64,
    pub spread: f64,
}

impl From<&MemorabilityCurve> for MemorabilityRow {
    fn from(c: &MemorabilityCurve) -> Self {
        Self {
            kind: c.kind,
            randomized: c.randomized,
            train_accuracy: c.train_accuracy,
            frac_easy: c.frac_easy(),
            frac_hard: c.frac_hard(),
            spread: c.spread(),
        }
    }
}

/// All three kinds, with structured and randomized labels.
pub fn memorisation(cfg: &ExperimentConfig) -> Result<Vec<MemorabilityCurve>> {
    if cfg.student_activation != Activation::Relu || cfg.teacher_activation != Activation::Relu {
        return Err(HmlError::Config("the memorisation experiment uses relu students and teachers".into()));
    }
    let mut out = Vec::new();
    for kind in DataKind::ALL {
        let data = make_dataset(kind, cfg)?;
        for randomized in [false, true] {
            out.push(memorability(&data, cfg, randomized)?);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct CurvePoint {
    kind: DataKind,
    randomized: bool,
    rank: usize,
    memorability: f64,
}

/// [`memorisation`] writing the sorted curves, the summary and the manifest.
pub fn run_memorisation(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<MemorabilityCurve>> {
    let curves = memorisation(cfg)?;
    let mut out = Outputs::create(dir, "memorise", cfg)?;
    let points: Vec<CurvePoint> = curves
        .iter()
        .flat_map(|c| {
            c.sorted()
                .into_iter()
                .enumerate()
                .map(|(rank, memorability)| CurvePoint { kind: c.kind, randomized: c.randomized, rank, memorability })
                .collect::<Vec<_>>()
        })
        .collect();
    out.rows("curves.csv", &points)?;
    let rows: Vec<MemorabilityRow> = curves.iter().map(MemorabilityRow::from).collect();
    out.rows("summary.csv", &rows)?;
    out.finish()?;
    Ok(curves)
}
