//! Measure-valued softmax attention for associative recall.
//!
//! The crate is organised bottom-up:
//!
//! * [`spectrum`]: Mercer eigen-spectrum `λ_j = exp(-c j^α)`, the sine
//!   eigenbasis, clamped density synthesis and generalized `H^a` norms.
//! * [`measures`]: finite discrete measures, pushforwards, tagged mixture
//!   contexts and the closed-form 1-D Wasserstein distance.
//! * [`attention`]: the integral-form attention operator, the explicit
//!   recall construction, composition of measure maps and a Lipschitz probe.
//! * [`model`] / [`optim`]: a small MLP → multi-head attention → MLP student
//!   with hand-written reverse-mode gradients, trained with Adam.
//! * [`experiment`]: the synthetic recall task, risk sweeps, the
//!   `log L = A - C (log n)^{α/(α+1)}` fit and attention diagnostics.
//! * [`verify`]: property suites shared by the CLI and the test targets.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod measures;
pub mod model;
pub mod optim;
pub mod rng;
pub mod spectrum;
pub mod verify;

pub use attention::{AttnParams, HeadParams, MeasureMap};
pub use error::{Error, Result};
pub use experiment::{Example, ExperimentConfig, FitResult, RiskCurve};
pub use matrix::Matrix;
pub use measures::{DiscreteMeasure, MixtureContext};
pub use model::{StudentConfig, StudentModel, WeightedTokens};
pub use optim::{AdamState, TrainConfig};
pub use spectrum::{DensityCoeffs, MercerSpectrum};
