//! Numerical laboratory for the hidden manifold model.
//!
//! Inputs live on a D-dimensional manifold inside N-dimensional space,
//! `x = f(Fᵀc/√D)`, and labels are produced by a two-layer teacher acting on
//! the latent coordinates `c`. The crate covers data generation, online SGD
//! of two-layer students, statistical checks of the Gaussian equivalence of
//! local fields, the order-parameter equations of motion that predict the
//! learning curve, and the reduced fixed-point analysis valid at small D/N.

pub mod config;
pub mod datagen;
pub mod error;
pub mod expcli;
pub mod gepcheck;
pub mod gint;
pub mod odeflow;
pub mod orderparams;
pub mod quadrature;
pub mod reduced;
pub mod rng;
pub mod student;

pub use datagen::{
    Activation, FeatureKind, FeatureMatrix, Folding, FoldingCoefficients, InputBatch, LatentBatch, NetworkParams,
    Role, SecondLayer,
};
pub use error::{HmlError, Result};



pub use config::{ExperimentConfig, GridChoice, Schedule};
pub use gepcheck::{GepReport, LocalFields};
pub use odeflow::{FlowState, GridMode, SpectralGrid};
pub use orderparams::{DensityState, OrderParameterSet, Spectrum, Trajectory};
pub use reduced::{FixedPoint, FixedPointClass, FixedPointSearch, ReducedState, SweepKind, TeacherConstants};
pub use student::{Setup, TestSet};
