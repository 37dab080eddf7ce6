//! Zero-shot diffusion editing over analytic denoisers.
//!
//! The crate covers edit-friendly DDPM inversion, condition-guided
//! regeneration, posterior principal-component editing through subspace
//! iteration, and the oracle and metric machinery used to check them. It is
//! `no_std` and needs only `alloc`; file formats and the command-line front
//! end live in the `zedit` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod denoiser;
pub mod error;
pub mod eval;
pub mod inversion;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod zeus;

mod linalg;

pub use denoiser::{Condition, Denoiser, EpsPrediction, GaussianMixturePrior, Guidance};
pub use error::{Error, Result};
pub use inversion::NoiseTrajectory;
pub use sampler::{EditPlan, Method, TPrime};
pub use schedule::Schedule;
pub use zeus::{LambdaProfile, PcBundle};

/// Signal vector.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix.
pub type Matrix = nalgebra::DMatrix<f64>;
