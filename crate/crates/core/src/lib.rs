//! Simulation and tomography of multiplexed photon-number-resolving
//! detectors.
//!
//! The pipeline runs in four steps. First, simulate click statistics of
//! coherent probes on a detector model ([`detector`]). Then build the probe
//! matrix ([`probe`]), recover the detector POVM by constrained least squares
//! ([`tomography`]), and reconstruct photon-number distributions of unknown
//! inputs ([`reconstruction`]). [`metrics`] compares distributions and
//! [`bench`] measures how the tomography solve scales with pixel count.
//!
//! Numerical types are generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the usual double-precision choice.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod detector;
pub mod error;
pub mod linalg;
pub mod memory;
pub mod metrics;
pub mod pmf;
pub mod probe;
pub mod qp;
pub mod reconstruction;
pub mod scalar;
pub mod tomography;

pub use detector::{ClickStatistics, DetectorConfig, NoiseModel, PulseStream};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use probe::{ProbeMatrix, ProbePlan};
pub use qp::SolverOptions;
pub use reconstruction::{EmeOptions, Pnd};
pub use scalar::Real;
pub use tomography::{MeasurementMatrix, Method, PovmMatrix, QpSolution};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type PovmMatrix64 = PovmMatrix<f64>;
pub type PovmMatrix32 = PovmMatrix<f32>;
pub type ProbeMatrix64 = ProbeMatrix<f64>;
pub type ProbeMatrix32 = ProbeMatrix<f32>;
pub type MeasurementMatrix64 = MeasurementMatrix<f64>;
pub type MeasurementMatrix32 = MeasurementMatrix<f32>;
pub type ClickStatistics64 = ClickStatistics<f64>;
pub type ClickStatistics32 = ClickStatistics<f32>;
pub type Pnd64 = Pnd<f64>;
pub type Pnd32 = Pnd<f32>;
pub type QpSolution64 = QpSolution<f64>;
pub type QpSolution32 = QpSolution<f32>;
