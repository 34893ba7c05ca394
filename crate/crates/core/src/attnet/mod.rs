//! Stick-breaking self-attention autoencoder.
//!
//! The encoder maps each pixel spectrum to a point on the probability simplex
//! (its attention vector); the bias-free linear decoder maps it back. Trained
//! per image, the decoder's effective rows act as spectral signatures and the
//! attention vectors as their per-pixel proportions.

mod layers;
mod network;
mod stick;
mod train;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::RasterImage;

pub use layers::{dense_forward, sigmoid, softplus, Activation, LayerShape, LEAKY_SLOPE};
pub use network::{LossParts, NetworkConfig, NetworkParams, ParamLayout, RECON_GUARD};
pub use stick::{entropy, stick_break, ENTROPY_EPS};
pub use train::{load_model, restart_seed, save_model, train, LossRecord, TrainedModel};

/// Tolerance on the sum-to-one constraint of stored attention vectors.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Per-pixel attention vectors stored as `maps` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    maps: RasterImage,
}

impl AttentionStack {
    /// Wraps a `c`-band raster, checking non-negativity and sum-to-one at
    /// every pixel.
    pub fn new(maps: RasterImage) -> Result<Self> {
        let plane = maps.pixel_count();
        let samples = maps.samples();
        for p in 0..plane {
            let mut sum = 0.0;
            for j in 0..maps.bands() {
                let v = samples[j * plane + p];
                if v < 0.0 {
                    return Err(Error::Domain {
                        op: "attention stack",
                        reason: format!("negative proportion {v} at pixel {p}, map {j}"),
                    });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Domain {
                    op: "attention stack",
                    reason: format!("proportions at pixel {p} sum to {sum}"),
                });
            }
        }
        Ok(Self { maps })
    }

    pub fn width(&self) -> usize {
        self.maps.width()
    }

    pub fn height(&self) -> usize {
        self.maps.height()
    }

    pub fn maps(&self) -> usize {
        self.maps.bands()
    }

    pub fn vector(&self, p: usize) -> Vec<f64> {
        self.maps.spectrum(p)
    }

    pub fn map(&self, j: usize) -> &[f64] {
        self.maps.band(j)
    }

    pub fn as_raster(&self) -> &RasterImage {
        &self.maps
    }

    pub fn into_raster(self) -> RasterImage {
        self.maps
    }
}

/// Encodes every pixel of `msi`.
pub fn encode_image(params: &NetworkParams, msi: &RasterImage) -> Result<AttentionStack> {
    if msi.bands() != params.bands() {
        return Err(Error::ShapeMismatch(format!(
            "image has {} bands, network expects {}",
            msi.bands(),
            params.bands()
        )));
    }
    let codes = (0..msi.pixel_count())
        .into_par_iter()
        .map(|p| params.encode(&msi.spectrum(p)))
        .collect::<Result<Vec<_>>>()?;
    AttentionStack::new(RasterImage::from_spectra(msi.width(), msi.height(), &codes)?)
}

/// Decodes a `maps`-band raster pixel by pixel. The input need not lie on the
/// simplex, which is what detail injection relies on.
pub fn decode_image(params: &NetworkParams, maps: &RasterImage) -> Result<RasterImage> {
    if maps.bands() != params.maps() {
        return Err(Error::ShapeMismatch(format!(
            "{} maps supplied, decoder expects {}",
            maps.bands(),
            params.maps()
        )));
    }
    let spectra = (0..maps.pixel_count())
        .into_par_iter()
        .map(|p| params.decode(&maps.spectrum(p)))
        .collect::<Result<Vec<_>>>()?;
    RasterImage::from_spectra(maps.width(), maps.height(), &spectra)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn image_ops_match_pixel_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = NetworkConfig::new(3).with_maps(5);
        let net = NetworkParams::init(&cfg, &mut rng).unwrap();
        let (w, h) = (5, 4);
        let img = RasterImage::new(w, h, 3, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap();
        let stack = encode_image(&net, &img).unwrap();
        let recon = decode_image(&net, stack.as_raster()).unwrap();
        assert!(recon.same_shape(&img));
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let px: Vec<f64> = (0..3).map(|k| img.get(x, y, k)).collect();
                let s = net.encode(&px).unwrap();
                assert_eq!(stack.vector(p), s);
                let d = net.decode(&s).unwrap();
                for k in 0..3 {
                    assert_eq!(recon.get(x, y, k), d[k]);
                }
            }
        }
    }

    #[test]
    fn band_mismatch() {
        let net = NetworkParams::init(&NetworkConfig::new(3), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(encode_image(&net, &RasterImage::zeros(2, 2, 4)).is_err());
        assert!(decode_image(&net, &RasterImage::zeros(2, 2, 3)).is_err());
    }

    #[test]
    fn stack_rejects_non_simplex() {
        assert!(AttentionStack::new(RasterImage::new(1, 1, 2, vec![0.5, 0.6]).unwrap()).is_err());
        assert!(AttentionStack::new(RasterImage::new(1, 1, 2, vec![1.5, -0.5]).unwrap()).is_err());
        assert!(AttentionStack::new(RasterImage::new(1, 1, 2, vec![0.25, 0.75]).unwrap()).is_ok());
    }
}
