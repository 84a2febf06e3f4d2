//! Frequency-aware dual-path network for face super-resolution.
//!
//! The crate is `no_std` + `alloc`: it holds the dense tensor type, a small
//! reverse-mode autodiff tape, every network block, the image resampling and
//! degradation math, fidelity metrics, complexity arithmetic and the Adam
//! optimizer. File formats, image codecs, timing and the command line live in
//! the `fadpnet` companion crate.
//!
//! Layout conventions: feature maps are rank-4 `batch × channel × height ×
//! width` arrays stored row-major. A "token" is one spatial position of a
//! feature map; token sequences keep the same layout with the spatial axes
//! flattened.
#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::too_many_arguments)]

extern crate alloc;

mod error;
pub mod scalar;
pub mod tensor;
pub mod tape;
pub mod nn;

pub mod freqsep;
pub mod lfeb;
pub mod hfeb;
pub mod net;

pub mod resample;
pub mod metrics;
pub mod profile;
pub mod optim;
pub mod synth;

pub use crate::error::{Error, Result};
pub use crate::scalar::Scalar;
pub use crate::tape::{Graph, Var};
pub use crate::tensor::Tensor;
