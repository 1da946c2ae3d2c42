//! Allocation-only core of a missing-modality volumetric segmentation
//! pipeline.
//!
//! One network and one parameter set serve every combination of available
//! input modalities. Training runs in three stages:
//!
//! 1. reconstruction pretraining under modality dropout, channel shuffle and
//!    patch masking ([`perturb`], [`net::Network::decode_recon`]),
//! 2. contrastive alignment of complete and incomplete feature descriptors
//!    with a segmentation constraint ([`losses::nt_xent`]),
//! 3. frozen-encoder fine-tuning of the decoder and the reverse-attention
//!    adapters under feature and prediction consistency
//!    ([`net::Network::encode_with_adapters`]).
//!
//! The crate is `#![no_std]` and needs only `alloc`. Everything that touches
//! the filesystem (containers, checkpoints, reports, the CLI) lives in the
//! `relaxseg` companion crate.

#![no_std]
#![deny(unsafe_op_in_unsafe_fn)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
mod kernels;
mod linalg;
pub mod losses;
pub mod net;
pub mod optim;
pub mod param;
pub mod perturb;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
