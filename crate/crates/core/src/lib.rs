//! Core algorithms for a multiscale graph-network surrogate of mesh-based
//! crack simulations.
//!
//! The crate is organized around the data flow of the surrogate:
//!
//! - [`mesh`] — block-structured quadtree meshes over a square domain with
//!   crack-driven refinement and level-filtered views.
//! - [`graph`] — node/edge feature graphs extracted from a mesh at a chosen
//!   refinement level, plus the cross-level transfer maps used by the
//!   downscale/upscale operators.
//! - [`autodiff`] — a dense-tensor reverse-mode tape and the learned kernels
//!   (MLP, multi-head graph-transformer message passing, skip aggregation,
//!   Adam).
//! - [`model`] — the multiscale encoder/process/decoder pipeline in its
//!   four-stage, two-stage, and single-stage refinement variants, with
//!   autoregressive rollout.
//! - [`pf`] — a desk-scale quasi-static phase-field fracture solver used to
//!   generate ground-truth records.
//! - [`training`] — next-step loss, the training loop, rollout evaluation
//!   metrics, transfer-learning weight copies, and dataset mirroring.
//!
//! The crate is `no_std`-compatible (allocation required); disable the
//! default `std` feature and enable `libm` to build without the standard
//! library. File formats, CSV/PNG emission, and the command-line tool live
//! in the companion `amr-gnn` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("no_std builds require the `libm` feature");

pub mod autodiff;
pub mod fmath;
pub mod graph;
pub mod mesh;
pub mod model;
pub mod pf;
pub mod training;
