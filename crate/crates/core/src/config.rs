//! Experiment configuration: a flat `key = value` file plus overrides.
//!
//! Unknown keys are rejected. Every field is written to the run manifest.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Activation, FeatureKind, SecondLayer};
use crate::error::{HmlError, Result};

/// Snapshot times: `t = 0`, then `per_decade` log-spaced points per decade
/// from `t_min` to `t_max`, then `t_max`. Times are rounded to whole steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub t_min: f64,
    pub per_decade: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { t_min: 0.01, per_decade: 10 }
    }
}

impl Schedule {
    /// Snapshot times in units of samples/N, snapped to multiples of 1/n.
    pub fn times(&self, t_max: f64, n: usize) -> Vec<f64> {
        let nf = n as f64;
        let mut steps: Vec<u64> = vec![0];
        if t_max > 0.0 && self.t_min > 0.0 && self.per_decade > 0 && self.t_min < t_max {
            let decades = (t_max / self.t_min).log10();
            let count = (decades * self.per_decade as f64).ceil() as usize;
            for j in 0..=count {
                let t = self.t_min * 10f64.powf(j as f64 / self.per_decade as f64);
                if t > t_max {
                    break;
                }
                steps.push((t * nf).round() as u64);
            }
        }
        steps.push((t_max * nf).round() as u64);
        steps.sort_unstable();
        steps.dedup();
        steps.into_iter().map(|s| s as f64 / nf).collect()
    }

    fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 || parts[0] != "log" {
            return Err(HmlError::Config(format!("snapshots must look like log:<t_min>:<per_decade>, got '{s}'")));
        }
        Ok(Self { t_min: parse_num(parts[1], "snapshots")?, per_decade: parse_num(parts[2], "snapshots")? })
    }
}

/// Which spectral grid the ODE uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridChoice {
    /// Marchenko–Pastur law at δ = d/n.
    Mp,
    /// Eigenvalues of the actual Ω.
    Empirical,
}

/// All knobs of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub m: usize,
    pub eta: f64,
    pub folding: String,
    pub student_activation: Activation,
    pub teacher_activation: Activation,
    pub features: FeatureKind,
    /// Rescale Gaussian features so Σ_r F_ri² = D exactly.
    pub normalize_features: bool,
    pub seed: u64,
    pub t_max: f64,
    pub snapshots: Schedule,
    pub p_test: usize,
    pub init_std: f64,
    pub teacher_second: SecondLayer,
    pub teacher_orthonormal: bool,
    pub divergence_ceiling: f64,
    pub batch: usize,
    /// ODE step; `None` means the default 1e-2/η, shortened at small δ.
    pub dt: Option<f64>,
    pub grid: GridChoice,
    pub grid_nodes: usize,
    /// Hidden-layer sizes of the complexity experiment.
    pub k_list: Vec<usize>,
    /// Independent trainings per data set in the memorisation experiment.
    pub runs: usize,
    /// Training-set size of the memorisation experiment.
    pub p_train: usize,
    /// Seeds averaged per point of a sweep.
    pub sweep_seeds: usize,
    /// Teacher perturbation T̃ = 1 − x, t̃ = x in reduced-theory curves.
    pub x: f64,
    pub n_starts: usize,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            n: 1000,
            d: 10,
            k: 2,
            m: 2,
            eta: 0.2,
            folding: "sign".into(),
            student_activation: Activation::Erf,
            teacher_activation: Activation::Erf,
            features: FeatureKind::Gaussian,
            normalize_features: false,
            seed: 0,
            t_max: 100.0,
            snapshots: Schedule::default(),
            p_test: 10_000,
            init_std: 1e-3,
            teacher_second: SecondLayer::Normal,
            teacher_orthonormal: false,
            divergence_ceiling: 1e3,
            batch: 1,
            dt: None,
            grid: GridChoice::Mp,
            grid_nodes: 200,
            k_list: vec![1, 2, 4],
            runs: 20,
            p_train: 2048,
            sweep_seeds: 5,
            x: 0.0,
            n_starts: 100,
            out_dir: "out".into(),
        }
    }
}

/// Keys accepted in config files and as `--key value` flags.
pub const KEYS: &[&str] = &[
    "name", "n", "d", "k", "m", "eta", "folding", "student_activation", "teacher_activation", "features",
    "normalize_features", "seed", "t_max", "snapshots", "p_test", "init_std", "teacher_second", "teacher_orthonormal",
    "divergence_ceiling", "batch", "dt", "grid", "grid_nodes", "k_list", "runs", "p_train", "sweep_seeds", "x",
    "n_starts", "out_dir",
];

fn parse_num<T: std::str::FromStr>(s: &str, key: &str) -> Result<T> {
    s.trim().parse().map_err(|_| HmlError::Config(format!("invalid value '{s}' for key '{key}'")))
}

fn parse_bool(s: &str, key: &str) -> Result<bool> {
    match s.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HmlError::Config(format!("invalid boolean '{s}' for key '{key}'"))),
    }
}

impl ExperimentConfig {
    pub fn delta(&self) -> f64 {
        self.d as f64 / self.n as f64
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "name" => self.name = v.to_string(),
            "n" => self.n = parse_num(v, key)?,
            "d" => self.d = parse_num(v, key)?,
            "k" => self.k = parse_num(v, key)?,
            "m" => self.m = parse_num(v, key)?,
            "eta" => self.eta = parse_num(v, key)?,
            "folding" => {
                crate::datagen::Folding::from_name(v)?;
                self.folding = v.to_string()
            }
            "student_activation" => self.student_activation = Activation::from_name(v)?,
            "teacher_activation" => self.teacher_activation = Activation::from_name(v)?,
            "features" => {
                self.features = match v {
                    "gaussian" => FeatureKind::Gaussian,
                    "hadamard" => FeatureKind::Hadamard,
                    _ => return Err(HmlError::Config(format!("unknown feature kind '{v}'"))),
                }
            }
            "normalize_features" => self.normalize_features = parse_bool(v, key)?,
            "seed" => self.seed = parse_num(v, key)?,
            "t_max" => self.t_max = parse_num(v, key)?,
            "snapshots" => self.snapshots = Schedule::parse(v)?,
            "p_test" => self.p_test = parse_num(v, key)?,
            "init_std" => self.init_std = parse_num(v, key)?,
            "teacher_second" => {
                self.teacher_second = match v {
                    "normal" => SecondLayer::Normal,
                    "ones" => SecondLayer::Constant(1.0),
                    _ => SecondLayer::Constant(parse_num(v, key)?),
                }
            }
            "teacher_orthonormal" => self.teacher_orthonormal = parse_bool(v, key)?,
            "divergence_ceiling" => self.divergence_ceiling = parse_num(v, key)?,
            "batch" => self.batch = parse_num(v, key)?,
            "dt" => self.dt = if v == "auto" { None } else { Some(parse_num(v, key)?) },
            "grid" => {
                self.grid = match v {
                    "mp" => GridChoice::Mp,
                    "empirical" => GridChoice::Empirical,
                    _ => return Err(HmlError::Config(format!("unknown grid '{v}' (mp or empirical)"))),
                }
            }
            "grid_nodes" => self.grid_nodes = parse_num(v, key)?,
            "k_list" => {
                self.k_list = v.split(',').map(|s| parse_num(s, key)).collect::<Result<Vec<usize>>>()?;
            }
            "runs" => self.runs = parse_num(v, key)?,
            "p_train" => self.p_train = parse_num(v, key)?,
            "sweep_seeds" => self.sweep_seeds = parse_num(v, key)?,
            "x" => self.x = parse_num(v, key)?,
            "n_starts" => self.n_starts = parse_num(v, key)?,
            "out_dir" => self.out_dir = v.to_string(),
            _ => return Err(HmlError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HmlError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Render back to the `key = value` format.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let second = match self.teacher_second {
            SecondLayer::Normal => "normal".to_string(),
            SecondLayer::Constant(c) => format!("{c}"),
        };
        let features = match self.features {
            FeatureKind::Gaussian => "gaussian",
            FeatureKind::Hadamard => "hadamard",
        };
        let grid = match self.grid {
            GridChoice::Mp => "mp",
            GridChoice::Empirical => "empirical",
        };
        let k_list: Vec<String> = self.k_list.iter().map(|k| k.to_string()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("name", self.name.clone()),
            ("n", self.n.to_string()),
            ("d", self.d.to_string()),
            ("k", self.k.to_string()),
            ("m", self.m.to_string()),
            ("eta", self.eta.to_string()),
            ("folding", self.folding.clone()),
            ("student_activation", self.student_activation.name().into()),
            ("teacher_activation", self.teacher_activation.name().into()),
            ("features", features.into()),
            ("normalize_features", self.normalize_features.to_string()),
            ("seed", self.seed.to_string()),
            ("t_max", self.t_max.to_string()),
            ("snapshots", format!("log:{}:{}", self.snapshots.t_min, self.snapshots.per_decade)),
            ("p_test", self.p_test.to_string()),
            ("init_std", self.init_std.to_string()),
            ("teacher_second", second),
            ("teacher_orthonormal", self.teacher_orthonormal.to_string()),
            ("divergence_ceiling", self.divergence_ceiling.to_string()),
            ("batch", self.batch.to_string()),
            ("dt", self.dt.map_or("auto".into(), |d| d.to_string())),
            ("grid", grid.into()),
            ("grid_nodes", self.grid_nodes.to_string()),
            ("k_list", k_list.join(",")),
            ("runs", self.runs.to_string()),
            ("p_train", self.p_train.to_string()),
            ("sweep_seeds", self.sweep_seeds.to_string()),
            ("x", self.x.to_string()),
            ("n_starts", self.n_starts.to_string()),
            ("out_dir", self.out_dir.clone()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.k == 0 || self.m == 0 {
            return Err(HmlError::Config("n, d, k and m must be positive".into()));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(HmlError::Config(format!("eta must be a non-negative number, got {}", self.eta)));
        }
        if self.batch == 0 {
            return Err(HmlError::Config("batch must be at least 1".into()));
        }
        if self.features == FeatureKind::Hadamard && (self.n != self.d || !self.n.is_power_of_two()) {
            return Err(HmlError::Config("hadamard features need n = d = a power of two".into()));
        }
        Ok(())
    }
}
