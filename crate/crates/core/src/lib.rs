//! Unsupervised pansharpening with a stick-breaking self-attention autoencoder.
//!
//! A small network is trained on the low-resolution multispectral image alone;
//! its attention maps drive detail extraction from the panchromatic image and
//! region-wise injection of that detail before decoding back to spectral bands.

pub mod attnet;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod protocol;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};
pub use raster::{MsiPanPair, RasterImage};
