//! devgan: a self-contained trainer for unpaired image-to-image translation.
//!
//! The proposed model translates domain-A images into domain-B images with a
//! single shared encoder/decoder pair, one residual translator operating in
//! encoding space, and a discriminator that scores encodings instead of
//! images. A matched CycleGAN-style baseline (two full generators, two
//! image-space discriminators) is built from the same kernels so that
//! training-cost comparisons isolate the architecture.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod infer;
pub mod losses;
pub mod networks;
pub mod rng;
pub mod tensor;
pub mod training;
