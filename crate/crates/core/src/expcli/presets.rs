//! Named desk-scale configurations.

use crate::config::{ExperimentConfig, Schedule};
use crate::datagen::{Activation, FeatureKind, SecondLayer};
use crate::error::{HmlError, Result};

pub const PRESETS: &[&str] = &[
    "fig2",
    "fig2-full",
    "fig3-hadamard",
    "complexity",
    "memorise",
    "gep",
    "gep-hadamard",
    "fp",
    "sweep-delta",
    "sweep-eta",
    "sweep-width",
];

/// K = M = 2 erf networks at δ = 0.01, teacher with ṽ = 1 and T = 1.
fn fig2() -> ExperimentConfig {
    ExperimentConfig {
        name: "fig2".into(),
        n: 4000,
        d: 40,
        k: 2,
        m: 2,
        eta: 0.2,
        t_max: 100.0,
        p_test: 10_000,
        init_std: 1e-3,
        teacher_second: SecondLayer::Constant(1.0),
        teacher_orthonormal: true,
        grid_nodes: 200,
        ..ExperimentConfig::default()
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let cfg = match name {
        "fig2" => fig2(),
        "fig2-full" => ExperimentConfig { name: name.into(), n: 10_000, d: 100, t_max: 1000.0, ..fig2() },
        "fig3-hadamard" => ExperimentConfig {
            name: name.into(),
            n: 1024,
            d: 1024,
            features: FeatureKind::Hadamard,
            ..fig2()
        },
        "complexity" => ExperimentConfig {
            name: name.into(),
            n: 500,
            d: 25,
            m: 10,
            k: 1,
            k_list: vec![1, 2, 4],
            teacher_second: SecondLayer::Constant(0.1),
            t_max: 10_000.0,
            ..fig2()
        },
        "memorise" => ExperimentConfig {
            name: name.into(),
            n: 256,
            d: 32,
            k: 64,
            m: 128,
            p_train: 2048,
            runs: 20,
            eta: 0.2,
            init_std: 1.0,
            student_activation: Activation::Relu,
            teacher_activation: Activation::Relu,
            teacher_second: SecondLayer::Normal,
            teacher_orthonormal: false,
            ..ExperimentConfig::default()
        },
        "gep" => ExperimentConfig {
            name: name.into(),
            n: 4000,
            d: 400,
            init_std: 1.0,
            normalize_features: true,
            ..fig2()
        },
        "gep-hadamard" => ExperimentConfig {
            name: name.into(),
            n: 1024,
            d: 1024,
            init_std: 1.0,
            features: FeatureKind::Hadamard,
            ..fig2()
        },
        "fp" => ExperimentConfig { name: name.into(), n_starts: 100, ..fig2() },
        "sweep-delta" => ExperimentConfig {
            name: name.into(),
            d: 25,
            t_max: 300.0,
            sweep_seeds: 5,
            snapshots: Schedule { t_min: 1.0, per_decade: 10 },
            ..fig2()
        },
        "sweep-eta" => ExperimentConfig {
            name: name.into(),
            t_max: 300.0,
            sweep_seeds: 5,
            snapshots: Schedule { t_min: 0.1, per_decade: 20 },
            ..fig2()
        },
        "sweep-width" => ExperimentConfig {
            name: name.into(),
            n: 5000,
            d: 50,
            t_max: 300.0,
            sweep_seeds: 5,
            snapshots: Schedule { t_min: 1.0, per_decade: 10 },
            ..fig2()
        },
        _ => {
            return Err(HmlError::Config(format!("unknown preset '{name}' (known: {})", PRESETS.join(", "))));
        }
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates_and_roundtrips() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(ExperimentConfig::parse_str(&cfg.to_kv()).unwrap(), cfg, "{name}");
        }
        assert!(preset("nope").is_err());
    }
}
