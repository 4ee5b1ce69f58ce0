//! The order-parameter flow: spectral grids, equations of motion, Euler
//! integration and the generalisation error.

pub mod eom;
pub mod generr;
pub mod grid;
pub mod integrate;

pub use eom::{assemble, eom_rhs, FlowDerivative, FlowState};
pub use generr::{generalisation_error, mc_error, McFallback};
pub use grid::{make_grid, mp_density, mp_edges, GridMode, SpectralGrid};
pub use integrate::{default_dt, dt_audit, integrate, integrate_to, state_error, StepAudit};
