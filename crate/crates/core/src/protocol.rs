//! Resolution reduction (Wald protocol) and the upsampling operator.
//!
//! Sampling convention: low-resolution pixel `i` sits on top of
//! high-resolution pixel `i * r` (decimation phase 0). The bicubic upsampler
//! uses the same convention, so `decimate(upsample(x))` returns `x` and a
//! degraded image lines up with its reference.

use std::f64::consts::PI;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{MsiPanPair, RasterImage};

pub const DEFAULT_MTF_GAIN: f64 = 0.29;
pub const DEFAULT_TAPS: usize = 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleKernel {
    Bicubic,
    Nearest,
}

impl FromStr for UpsampleKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bicubic" => Ok(Self::Bicubic),
            "nearest" => Ok(Self::Nearest),
            other => Err(Error::param("kernel", format!("unsupported kernel `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeConfig {
    pub factor: usize,
    /// MTF gain at the low-resolution Nyquist frequency, one per band or a
    /// single value for all bands.
    pub mtf_gains: Vec<f64>,
    /// Tap count of both the MTF and the PAN filters (odd).
    pub taps: usize,
    pub upsample: UpsampleKernel,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            factor: 4,
            mtf_gains: vec![DEFAULT_MTF_GAIN],
            taps: DEFAULT_TAPS,
            upsample: UpsampleKernel::Bicubic,
        }
    }
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor < 2 {
            return Err(Error::param("factor", format!("must be >= 2, got {}", self.factor)));
        }
        if self.mtf_gains.is_empty() {
            return Err(Error::param("mtf_gains", "at least one gain required"));
        }
        if let Some(g) = self.mtf_gains.iter().find(|&&g| !(g > 0.0 && g < 1.0)) {
            return Err(Error::param("mtf_gains", format!("gain {g} outside (0, 1)")));
        }
        if self.taps % 2 == 0 || self.taps < 3 {
            return Err(Error::param("taps", format!("must be odd and >= 3, got {}", self.taps)));
        }
        Ok(())
    }

    fn gain_for_band(&self, band: usize, bands: usize) -> Result<f64> {
        match self.mtf_gains.len() {
            1 => Ok(self.mtf_gains[0]),
            n if n == bands => Ok(self.mtf_gains[band]),
            n => Err(Error::param(
                "mtf_gains",
                format!("{n} gains supplied for {bands} bands"),
            )),
        }
    }
}

/// Standard deviation (in high-resolution samples) of the Gaussian whose
/// frequency response at `1 / (2 r)` cycles per sample equals `gain`.
pub fn mtf_sigma(factor: usize, gain: f64) -> f64 {
    factor as f64 * (-2.0 * gain.ln()).sqrt() / PI
}

fn normalized(mut taps: Vec<f64>) -> Vec<f64> {
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Sampled Gaussian with unit DC gain.
pub fn mtf_kernel(factor: usize, gain: f64, taps: usize) -> Vec<f64> {
    let sigma = mtf_sigma(factor, gain);
    let half = (taps / 2) as f64;
    normalized(
        (0..taps)
            .map(|i| {
                let n = i as f64 - half;
                (-n * n / (2.0 * sigma * sigma)).exp()
            })
            .collect(),
    )
}

/// Hamming-windowed sinc low-pass with cutoff `pi / r` and unit DC gain.
pub fn pan_kernel(factor: usize, taps: usize) -> Vec<f64> {
    let half = (taps / 2) as f64;
    let r = factor as f64;
    normalized(
        (0..taps)
            .map(|i| {
                let n = i as f64 - half;
                let x = n / r;
                let sinc = if n == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
                let window = 0.54 + 0.46 * (2.0 * PI * n / (taps - 1) as f64).cos();
                sinc * window / r
            })
            .collect(),
    )
}

/// Half-sample symmetric reflection of an index into `0..n`.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

fn convolve_rows(plane: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &h)| h * row[reflect(x as isize + k as isize - half, width)])
                .sum();
        }
    }
    out
}

fn convolve_cols(plane: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for (k, &h) in kernel.iter().enumerate() {
            let src = reflect(y as isize + k as isize - half, height);
            let src_row = &plane[src * width..(src + 1) * width];
            for (o, &v) in out[y * width..(y + 1) * width].iter_mut().zip(src_row) {
                *o += h * v;
            }
        }
    }
    out
}

/// Separable 2-D convolution of one plane with the same odd kernel along both
/// axes, symmetric boundaries.
pub fn convolve_separable(plane: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let rows = convolve_rows(plane, width, height, kernel);
    convolve_cols(&rows, width, height, kernel)
}

fn check_divisible(img: &RasterImage, r: usize) -> Result<()> {
    if r == 0 || img.width() % r != 0 || img.height() % r != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} is not divisible by {r}",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

fn decimate_plane(plane: &[f64], width: usize, height: usize, r: usize) -> Vec<f64> {
    let (w, h) = (width / r, height / r);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(plane[y * r * width + x * r]);
        }
    }
    out
}

/// Keeps every `r`-th pixel starting at 0 (nearest-neighbour reduction).
pub fn decimate(img: &RasterImage, r: usize) -> Result<RasterImage> {
    check_divisible(img, r)?;
    let planes = img
        .bands_iter()
        .map(|b| decimate_plane(b, img.width(), img.height(), r))
        .collect();
    RasterImage::from_bands(img.width() / r, img.height() / r, planes)
}

fn filter_and_decimate(img: &RasterImage, r: usize, kernels: &[Vec<f64>]) -> Result<RasterImage> {
    check_divisible(img, r)?;
    let (w, h) = (img.width(), img.height());
    let planes = (0..img.bands())
        .into_par_iter()
        .map(|k| decimate_plane(&convolve_separable(img.band(k), w, h, &kernels[k]), w, h, r))
        .collect();
    RasterImage::from_bands(w / r, h / r, planes)
}

/// Per band: Gaussian MTF filter, then decimation by `cfg.factor`.
pub fn mtf_degrade_msi(msi: &RasterImage, cfg: &DegradeConfig) -> Result<RasterImage> {
    cfg.validate()?;
    let kernels = (0..msi.bands())
        .map(|k| Ok(mtf_kernel(cfg.factor, cfg.gain_for_band(k, msi.bands())?, cfg.taps)))
        .collect::<Result<Vec<_>>>()?;
    filter_and_decimate(msi, cfg.factor, &kernels)
}

/// Ideal-filter (windowed sinc) reduction of the PAN.
pub fn downsample_pan(pan: &RasterImage, cfg: &DegradeConfig) -> Result<RasterImage> {
    cfg.validate()?;
    let kernel = pan_kernel(cfg.factor, cfg.taps);
    filter_and_decimate(pan, cfg.factor, &vec![kernel; pan.bands()])
}

/// Catmull-Rom cubic convolution weight (`a = -0.5`).
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Taps `(source index, weight)` of each output position along one axis.
fn bicubic_taps(n_in: usize, r: usize) -> Vec<[(usize, f64); 4]> {
    (0..n_in * r)
        .map(|o| {
            let t = o as f64 / r as f64;
            let base = t.floor();
            let frac = t - base;
            let base = base as isize;
            let mut taps = [(0, 0.0); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let off = k as isize - 1;
                *tap = (reflect(base + off, n_in), cubic_weight(frac - off as f64));
            }
            taps
        })
        .collect()
}

fn upsample_plane_bicubic(plane: &[f64], width: usize, height: usize, r: usize) -> Vec<f64> {
    let tx = bicubic_taps(width, r);
    let ty = bicubic_taps(height, r);
    let out_w = width * r;
    let mut rows = vec![0.0; out_w * height];
    for y in 0..height {
        let src = &plane[y * width..(y + 1) * width];
        for (x, taps) in tx.iter().enumerate() {
            rows[y * out_w + x] = taps.iter().map(|&(i, w)| w * src[i]).sum();
        }
    }
    let mut out = vec![0.0; out_w * height * r];
    for (y, taps) in ty.iter().enumerate() {
        let dst = &mut out[y * out_w..(y + 1) * out_w];
        for &(i, w) in taps {
            for (d, s) in dst.iter_mut().zip(&rows[i * out_w..(i + 1) * out_w]) {
                *d += w * s;
            }
        }
    }
    out
}

fn upsample_plane_nearest(plane: &[f64], width: usize, height: usize, r: usize) -> Vec<f64> {
    let out_w = width * r;
    (0..height * r)
        .flat_map(|y| (0..out_w).map(move |x| plane[(y / r) * width + x / r]))
        .collect()
}

/// Enlarges every band by `r`. Output dimensions are exactly `r` times the input.
pub fn upsample(img: &RasterImage, r: usize, kernel: UpsampleKernel) -> Result<RasterImage> {
    if r == 0 {
        return Err(Error::param("factor", "must be positive"));
    }
    let (w, h) = (img.width(), img.height());
    let planes = (0..img.bands())
        .into_par_iter()
        .map(|k| match kernel {
            UpsampleKernel::Bicubic => upsample_plane_bicubic(img.band(k), w, h, r),
            UpsampleKernel::Nearest => upsample_plane_nearest(img.band(k), w, h, r),
        })
        .collect();
    RasterImage::from_bands(w * r, h * r, planes)
}

/// Result of reducing a pair by the Wald protocol.
#[derive(Debug, Clone)]
pub struct WaldReduction {
    pub pair: MsiPanPair,
    /// The original MSI, used as ground truth at the reduced scale.
    pub reference: RasterImage,
}

pub fn wald_reduce(pair: &MsiPanPair, cfg: &DegradeConfig) -> Result<WaldReduction> {
    let msi = mtf_degrade_msi(pair.msi(), cfg)?;
    let pan = downsample_pan(pair.pan(), cfg)?;
    Ok(WaldReduction {
        pair: MsiPanPair::new(msi, pan, pair.factor())?,
        reference: pair.msi().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dtft_magnitude(kernel: &[f64], freq: f64) -> f64 {
        let half = (kernel.len() / 2) as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &h) in kernel.iter().enumerate() {
            let n = i as f64 - half;
            re += h * (2.0 * PI * freq * n).cos();
            im -= h * (2.0 * PI * freq * n).sin();
        }
        (re * re + im * im).sqrt()
    }

    #[test]
    fn kernels_have_unit_dc() {
        for r in [2, 3, 4, 6] {
            assert!((mtf_kernel(r, 0.29, 41).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((pan_kernel(r, 41).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mtf_kernel_hits_nyquist_gain() {
        for (r, g) in [(4, 0.29), (4, 0.15), (2, 0.3), (4, 0.5)] {
            let k = mtf_kernel(r, g, 41);
            let at_nyquist = dtft_magnitude(&k, 1.0 / (2.0 * r as f64));
            assert!((at_nyquist - g).abs() < 1e-3, "r={r} g={g}: {at_nyquist}");
        }
    }

    #[test]
    fn reflect_is_half_sample_symmetric() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, [2, 1, 0, 0, 1, 2, 3, 4, 4, 3, 2]);
        assert_eq!(reflect(-1, 1), 0);
        assert_eq!(reflect(7, 2), 0);
    }

    #[test]
    fn constants_are_preserved() {
        let img = RasterImage::filled(16, 8, 2, 0.37);
        let cfg = DegradeConfig::default();
        for out in [
            mtf_degrade_msi(&img, &cfg).unwrap(),
            downsample_pan(&img, &cfg).unwrap(),
            upsample(&img, 4, UpsampleKernel::Bicubic).unwrap(),
        ] {
            assert!(out.samples().iter().all(|v| (v - 0.37).abs() < 1e-10));
        }
        let small = mtf_degrade_msi(&img, &cfg).unwrap();
        assert_eq!((small.width(), small.height(), small.bands()), (4, 2, 2));
    }

    #[test]
    fn impulse_shows_the_kernel() {
        let (w, h) = (64, 64);
        let mut plane = vec![0.0; w * h];
        plane[32 * w + 32] = 1.0;
        let img = RasterImage::from_bands(w, h, vec![plane]).unwrap();
        let cfg = DegradeConfig::default();
        let out = mtf_degrade_msi(&img, &cfg).unwrap();
        let k = mtf_kernel(4, 0.29, 41);
        for dy in -2isize..=2 {
            for dx in -2isize..=2 {
                let (x, y) = ((8 + dx) as usize, (8 + dy) as usize);
                let expected = k[(20 + 4 * dy) as usize] * k[(20 + 4 * dx) as usize];
                assert!((out.get(x, y, 0) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn separable_equals_direct_2d() {
        let (w, h) = (9, 7);
        let plane: Vec<f64> = (0..w * h).map(|i| ((i * 37 % 11) as f64).sin()).collect();
        let k = mtf_kernel(2, 0.3, 7);
        let sep = convolve_separable(&plane, w, h, &k);
        let half = 3isize;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, ky) in k.iter().enumerate() {
                    for (i, kx) in k.iter().enumerate() {
                        let sy = reflect(y as isize + j as isize - half, h);
                        let sx = reflect(x as isize + i as isize - half, w);
                        acc += ky * kx * plane[sy * w + sx];
                    }
                }
                assert!((sep[y * w + x] - acc).abs() < 1e-10);
            }
        }
    }

    fn dft_amplitude(signal: &[f64], bin: usize) -> f64 {
        let n = signal.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &v) in signal.iter().enumerate() {
            let phase = 2.0 * PI * bin as f64 * i as f64 / n;
            re += v * phase.cos();
            im -= v * phase.sin();
        }
        2.0 * (re * re + im * im).sqrt() / n
    }

    #[test]
    fn pan_filter_passes_low_and_stops_nyquist() {
        let (w, h) = (128, 128);
        let cfg = DegradeConfig::default();
        // 4 cycles across 128 samples -> well below the pi/4 cutoff
        let low: Vec<f64> = (0..w * h)
            .map(|i| 0.5 + 0.4 * (2.0 * PI * 4.0 * (i % w) as f64 / w as f64).cos())
            .collect();
        let out = downsample_pan(&RasterImage::from_bands(w, h, vec![low]).unwrap(), &cfg).unwrap();
        let row = &out.band(0)[0..out.width()];
        let amp = dft_amplitude(row, 4) / 0.4;
        assert!(amp >= 0.95, "{amp}");

        let checker: Vec<f64> = (0..w * h)
            .map(|i| if (i % w + i / w) % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        let out = downsample_pan(&RasterImage::from_bands(w, h, vec![checker]).unwrap(), &cfg).unwrap();
        // reflection breaks the alternation at the borders, so look inside
        let ow = out.width();
        let dev = (6..ow - 6)
            .flat_map(|y| (6..ow - 6).map(move |x| (x, y)))
            .map(|(x, y)| (out.get(x, y, 0) - 0.5).abs())
            .fold(0.0, f64::max);
        assert!(dev / 0.5 <= 0.05, "{dev}");
    }

    #[test]
    fn nearest_replicates_blocks() {
        let img = RasterImage::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample(&img, 3, UpsampleKernel::Nearest).unwrap();
        assert_eq!((up.width(), up.height()), (6, 6));
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(up.get(x, y, 0), img.get(x / 3, y / 3, 0));
            }
        }
    }

    #[test]
    fn bicubic_reproduces_ramps() {
        let (w, h, r) = (12, 10, 4);
        let plane: Vec<f64> = (0..w * h).map(|i| 0.1 * (i % w) as f64 + 0.05 * (i / w) as f64).collect();
        let up = upsample(&RasterImage::from_bands(w, h, vec![plane]).unwrap(), r, UpsampleKernel::Bicubic).unwrap();
        for y in 2 * r..(h - 2) * r {
            for x in 2 * r..(w - 2) * r {
                let expected = 0.1 * x as f64 / r as f64 + 0.05 * y as f64 / r as f64;
                assert!((up.get(x, y, 0) - expected).abs() < 1e-6);
            }
        }
        // phase 0: decimating the upsampled image gives the input back
        let back = decimate(&up, r).unwrap();
        for (a, b) in back.samples().iter().zip(RasterImage::from_bands(w, h, vec![(0..w * h).map(|i| 0.1 * (i % w) as f64 + 0.05 * (i / w) as f64).collect()]).unwrap().samples()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let img = RasterImage::zeros(10, 8, 1);
        let cfg = DegradeConfig::default();
        assert!(mtf_degrade_msi(&img, &cfg).is_err());
        assert!(downsample_pan(&img, &cfg).is_err());
        assert!("lanczos".parse::<UpsampleKernel>().is_err());
        let bad = DegradeConfig {
            mtf_gains: vec![1.2],
            ..DegradeConfig::default()
        };
        assert!(bad.validate().is_err());
        let wrong_count = DegradeConfig {
            mtf_gains: vec![0.3, 0.3],
            ..DegradeConfig::default()
        };
        assert!(mtf_degrade_msi(&RasterImage::zeros(8, 8, 3), &wrong_count).is_err());
    }

    #[test]
    fn wald_shapes_and_reference() {
        let msi = RasterImage::filled(16, 16, 3, 0.2);
        let pan = RasterImage::filled(64, 64, 1, 0.4);
        let pair = MsiPanPair::new(msi.clone(), pan, 4).unwrap();
        let red = wald_reduce(&pair, &DegradeConfig::default()).unwrap();
        assert_eq!((red.pair.msi().width(), red.pair.pan().width()), (4, 16));
        assert_eq!(red.pair.factor(), 4);
        assert_eq!(red.reference, msi);
    }

    #[test]
    fn config_json_defaults() {
        let cfg: DegradeConfig = serde_json::from_str(r#"{"factor": 2}"#).unwrap();
        assert_eq!(cfg.taps, 41);
        assert_eq!(cfg.mtf_gains, vec![0.29]);
        assert!(serde_json::from_str::<DegradeConfig>(r#"{"fator": 2}"#).is_err());
    }
}
