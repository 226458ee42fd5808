//! Speaker-verification backend: LDA + PLDA scoring with duration- and
//! side-information-dependent calibration, trained jointly by minimizing
//! prior-weighted binary cross-entropy.

pub mod data;
pub mod error;
pub mod asnorm;
pub mod backend;
pub mod calibration;
pub mod cli;
pub mod config;
pub mod linalg;
pub mod metrics;
pub mod modelfile;
pub mod plda;
pub mod preproc;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
