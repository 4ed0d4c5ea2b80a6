//! State-of-charge modelling and estimation for parallel-series Li-ion packs.
//!
//! The pack is a semi-explicit index-1 descriptor system `E x' = A x + Phi(x, I)`
//! with cell SOCs (and optional RC voltages) as differential states and branch
//! currents as algebraic states. Only the pack voltage and current are measured.

pub mod app_io;
pub mod dae_engine;
pub mod error;
pub mod jet;
pub mod linalg;
pub mod observability;
pub mod observer;
pub mod ocv_cell;
pub mod pack_model;

pub use dae_engine::*;
pub use error::{Error, Result};
pub use linalg::{numerical_rank, RankInfo, RankTolerance};
pub use observability::*;
pub use observer::*;
pub use ocv_cell::*;
pub use pack_model::*;
