//! Depth-relative windowed transformer for monocular depth estimation.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. It holds the whole numeric pipeline: the tensor engine with
//! reverse-mode gradients, windowed attention, the depth-relative bias, the
//! network, losses and metrics, and the procedural scene generator. File
//! formats, dataset IO and the command line live in the `redt` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod data;
pub mod error;
pub mod losses_metrics;
pub mod model;
pub mod relbias;
pub mod train;
pub mod numerics;

pub use error::{Error, Result};
