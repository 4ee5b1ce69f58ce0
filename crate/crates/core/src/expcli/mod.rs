//! Experiment drivers. Each takes an [`ExperimentConfig`](crate::config::ExperimentConfig)
//! and returns its results; the `run_*` variants also write CSV/JSON files
//! and a manifest with their SHA-256 digests.

pub mod audit;
pub mod checks;
pub mod complexity;
pub mod memorise;
pub mod output;
pub mod presets;
pub mod simode;
pub mod sweep;

pub use audit::{audit, run_audit, AuditReport, NodeAudit};
pub use checks::{fixed_points, gep, gep_student, run_fixed_points, run_gen, run_gep, FixedPointRow};
pub use complexity::{complexity, run_complexity, ComplexityRow, ComplexityRun};
pub use memorise::{make_dataset, memorability, memorisation, run_memorisation, DataKind, MemorabilityCurve, MemorabilityRow};
pub use output::{sha256_file, write_trajectory, Outputs, RunManifest, MANIFEST_FILE};
pub use presets::{preset, PRESETS};
pub use simode::{deviation, flow_grid, initial_flow, run_ode, run_sim_vs_ode, run_train, sim_vs_ode, step_size, SimOde, SimOdeReport};
pub use sweep::{asymptotic_eps, run_sweep, sweep, time_to_level, SweepRow};
