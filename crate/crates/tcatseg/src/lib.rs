//! Superpoint-guided semantic segmentation of 3D dental point clouds.
//!
//! This crate implements the TCATSeg architecture end to end on the CPU:
//! a small f64 reverse-mode autodiff engine ([`diffcore`]), geometric
//! kernels ([`geomkit`]), channel-wise attention ([`attention`]), the
//! dental-perception and superpoint-guided dual attention blocks
//! ([`dpda`], [`sgda`]), the full encoder/decoder network ([`network`]),
//! training losses with Hungarian matching ([`losses`]), evaluation
//! metrics ([`metrics`]), and a synthetic dental-arch generator plus
//! cloud file I/O ([`data`]).
//!
//! Start with the runnable examples (`cargo run --release --example ...`)
//! or the `tcatseg` binary, a thin CLI over [`commands`].

pub mod attention;
pub mod commands;
pub mod data;
pub mod diffcore;
pub mod dpda;
pub mod error;
pub mod geomkit;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod sgda;

pub use error::{Error, Result};
