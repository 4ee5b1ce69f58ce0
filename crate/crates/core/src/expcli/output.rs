//! CSV and JSON writers with a manifest of SHA-256 digests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{HmlError, Result};
use crate::orderparams::{OrderParameterSet, Trajectory};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to rerun an experiment and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub artifact_version: String,
    pub experiment: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Output file name to hex SHA-256 digest.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(experiment: &str, config: &ExperimentConfig) -> Self {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            manifest_version: MANIFEST_VERSION,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            experiment: experiment.to_string(),
            timestamp,
            seed: config.seed,
            config: config.clone(),
            files: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: Self = serde_json::from_str(&text)?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(HmlError::Config(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                m.manifest_version
            )));
        }
        Ok(m)
    }

    /// Names of recorded files in `dir` whose digest no longer matches.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (name, digest) in &self.files {
            let path = dir.join(name);
            if !path.exists() || sha256_file(&path)? != *digest {
                bad.push(name.clone());
            }
        }
        Ok(bad)
    }
}

/// Hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// An output directory that records a digest for every file written to it.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Outputs {
    pub fn create(dir: &Path, experiment: &str, config: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), manifest: RunManifest::new(experiment, config) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        self.manifest.files.insert(name.to_string(), sha256_file(&path)?);
        Ok(path)
    }

    pub fn trajectory(&mut self, name: &str, traj: &Trajectory) -> Result<PathBuf> {
        let file = fs::File::create(self.dir.join(name))?;
        write_trajectory(file, traj)?;
        self.record(name)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut file = fs::File::create(self.dir.join(name))?;
        serde_json::to_writer_pretty(&mut file, value)?;
        file.write_all(b"\n")?;
        self.record(name)
    }

    pub fn rows<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.record(name)
    }

    /// Write the manifest last and return it.
    pub fn finish(self) -> Result<RunManifest> {
        let mut file = fs::File::create(self.dir.join(MANIFEST_FILE))?;
        serde_json::to_writer_pretty(&mut file, &self.manifest)?;
        file.write_all(b"\n")?;
        Ok(self.manifest)
    }
}

/// Trajectory CSV: `t, eps_g, eps_theory`, then the flattened order
/// parameters. Simulated and integrated runs share this schema.
pub fn write_trajectory<W: Write>(out: W, traj: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let (k, m) = traj.snapshots.first().map(|s| (s.q.nrows(), s.t.nrows())).unwrap_or((0, 0));
    let mut header = vec!["t".to_string(), "eps_g".to_string(), "eps_theory".to_string()];
    header.extend(OrderParameterSet::column_names(k, m));
    w.write_record(&header)?;
    for i in 0..traj.len() {
        let mut rec = vec![fmt(traj.times[i]), fmt(traj.eps[i]), traj.eps_theory[i].map(fmt).unwrap_or_default()];
        rec.extend(traj.snapshots[i].flatten().into_iter().map(fmt));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn fmt(x: f64) -> String {
    format!("{x:.12e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::FoldingCoefficients;
    use nalgebra::{DMatrix, DVector};

    fn snap(x: f64) -> OrderParameterSet {
        OrderParameterSet {
            q: DMatrix::from_element(1, 1, x),
            r: DMatrix::from_element(1, 2, 2.0 * x),
            t: DMatrix::identity(2, 2),
            w: DMatrix::from_element(1, 1, x),
            sigma: DMatrix::from_element(1, 1, 0.0),
            t_tilde: DMatrix::identity(2, 2),
            v: DVector::from_element(1, 1.0),
            v_tilde: DVector::from_element(2, 1.0),
            mean: DVector::zeros(1),
            coefficients: FoldingCoefficients::sign(),
        }
    }

    #[test]
    fn trajectory_csv_schema() {
        let mut tr = Trajectory::default();
        tr.push(0.0, 0.5, Some(0.49), snap(0.1));
        tr.push(1.0, 0.25, None, snap(0.2));
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &tr).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("t,eps_g,eps_theory,Q_00,R_00,R_01,T_00"));
        let cols = lines[0].split(',').count();
        assert!(lines[1..].iter().all(|l| l.split(',').count() == cols));
        assert!(lines[2].split(',').nth(2).unwrap().is_empty());
    }

    #[test]
    fn manifest_records_and_verifies_digests() {
        let dir = std::env::temp_dir().join(format!("hmlab-manifest-{}", std::process::id()));
        let cfg = ExperimentConfig::default();
        let mut out = Outputs::create(&dir, "test", &cfg).unwrap();
        out.json("a.json", &vec![1, 2, 3]).unwrap();
        let m = out.finish().unwrap();
        let back = RunManifest::load(&dir.join(MANIFEST_FILE)).unwrap();
        assert_eq!(m, back);
        assert!(back.verify(&dir).unwrap().is_empty());
        assert_eq!(back.files["a.json"], hex::encode(Sha256::digest(b"[\n  1,\n  2,\n  3\n]\n")));
        fs::write(dir.join("a.json"), "tampered").unwrap();
        assert_eq!(back.verify(&dir).unwrap(), vec!["a.json".to_string()]);
        fs::remove_dir_all(&dir).unwrap();
    }
}
