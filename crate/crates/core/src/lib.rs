//! Desk-scale visual knowledge base and pose-masked diffusion.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense `f64` tensors, hand-derived backward passes, optimizers,
//!   a finite-difference gradient checker and the `KBDM` checkpoint format.
//! * [`codebook`]: vector-quantized knowledge base (distance, assignment, one-hot
//!   gather, reconstruction loss, training).
//! * [`classifier`]: text-query token classifier and decomposed (D&C) retrieval.
//! * [`dynmask`]: binary pose masks, the timestep gate and soft-masked attention.
//! * [`diffusion`]: noise schedule, epsilon-prediction denoiser, training and DDIM.
//! * [`synthdata`]: procedural stick-figure corpus and keypoint extraction.
//! * [`harness`]: configuration, metrics, ablation runner and file formats.

pub mod classifier;
pub mod codebook;
pub mod diffusion;
pub mod dynmask;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod synthdata;

pub use error::{Error, Result};
