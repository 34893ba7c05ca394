//! Raster data model and the on-disk format shared by every tool in the crate.
//!
//! An image is stored as two files next to each other: `<name>.json` holds the
//! header and `<name>.f32` holds the samples as little-endian 32-bit floats in
//! band-sequential order (all of band 0 row by row, then band 1, ...).
//!
//! In memory the samples are kept as `f64` so the numerical pipeline does not
//! accumulate single-precision error. Saving rounds each sample to the nearest
//! `f32`; loading widens exactly, so any image read from disk survives a
//! save/load cycle bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const DTYPE: &str = "f32";
pub const LAYOUT: &str = "bsq";
pub const ENDIANNESS: &str = "little";

/// A `width x height x bands` grid of finite samples, band-sequential.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    bands: usize,
    samples: Vec<f64>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, bands: usize, samples: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::InvalidRaster(format!(
                "dimensions must be positive, got {width}x{height}x{bands}"
            )));
        }
        if samples.len() != width * height * bands {
            return Err(Error::InvalidRaster(format!(
                "expected {} samples for {width}x{height}x{bands}, got {}",
                width * height * bands,
                samples.len()
            )));
        }
        if let Some(offset) = samples.iter().position(|v| !v.is_finite()) {
            let plane = width * height;
            return Err(Error::NonFiniteSample {
                offset,
                band: offset / plane,
                x: (offset % plane) % width,
                y: (offset % plane) / width,
            });
        }
        Ok(Self {
            width,
            height,
            bands,
            samples,
        })
    }

    pub fn zeros(width: usize, height: usize, bands: usize) -> Self {
        Self::filled(width, height, bands, 0.0)
    }

    pub fn filled(width: usize, height: usize, bands: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0 && bands > 0, "empty raster");
        assert!(value.is_finite());
        Self {
            width,
            height,
            bands,
            samples: vec![value; width * height * bands],
        }
    }

    /// Builds an image from one plane per band.
    pub fn from_bands(width: usize, height: usize, planes: Vec<Vec<f64>>) -> Result<Self> {
        let bands = planes.len();
        let samples = planes.into_iter().flatten().collect();
        Self::new(width, height, bands, samples)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn same_shape(&self, other: &RasterImage) -> bool {
        self.width == other.width && self.height == other.height && self.bands == other.bands
    }

    pub fn same_grid(&self, other: &RasterImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn band(&self, k: usize) -> &[f64] {
        let plane = self.pixel_count();
        &self.samples[k * plane..(k + 1) * plane]
    }

    pub fn bands_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks_exact(self.pixel_count())
    }

    pub fn get(&self, x: usize, y: usize, band: usize) -> f64 {
        self.samples[band * self.pixel_count() + y * self.width + x]
    }

    /// Spectrum of the pixel with linear index `p = y * width + x`.
    pub fn spectrum(&self, p: usize) -> Vec<f64> {
        let plane = self.pixel_count();
        (0..self.bands).map(|k| self.samples[k * plane + p]).collect()
    }

    /// All pixel spectra, pixel-major (`pixel_count x bands`).
    pub fn spectra(&self) -> Vec<Vec<f64>> {
        (0..self.pixel_count()).map(|p| self.spectrum(p)).collect()
    }

    /// Inverse of [`RasterImage::spectra`].
    pub fn from_spectra(width: usize, height: usize, spectra: &[Vec<f64>]) -> Result<Self> {
        if spectra.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} spectra for a {width}x{height} grid",
                spectra.len()
            )));
        }
        let bands = spectra.first().map_or(0, Vec::len);
        let plane = width * height;
        let mut samples = vec![0.0; plane * bands];
        for (p, s) in spectra.iter().enumerate() {
            if s.len() != bands {
                return Err(Error::ShapeMismatch(format!(
                    "pixel {p} has {} bands, expected {bands}",
                    s.len()
                )));
            }
            for (k, &v) in s.iter().enumerate() {
                samples[k * plane + p] = v;
            }
        }
        Self::new(width, height, bands, samples)
    }

    /// Extracts a single band as a one-band image.
    pub fn band_image(&self, k: usize) -> RasterImage {
        RasterImage {
            width: self.width,
            height: self.height,
            bands: 1,
            samples: self.band(k).to_vec(),
        }
    }

    /// Applies `f` to every sample. Fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<RasterImage> {
        Self::new(
            self.width,
            self.height,
            self.bands,
            self.samples.iter().map(|&v| f(v)).collect(),
        )
    }
}

/// The JSON sidecar describing a `.f32` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterHeader {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub dtype: String,
    pub layout: String,
    pub endianness: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution_m: Option<f64>,
}

impl RasterHeader {
    pub fn for_image(img: &RasterImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            bands: img.bands,
            dtype: DTYPE.to_string(),
            layout: LAYOUT.to_string(),
            endianness: ENDIANNESS.to_string(),
            band_names: None,
            resolution_m: None,
        }
    }

    pub fn payload_bytes(&self) -> usize {
        self.width * self.height * self.bands * 4
    }
}

/// Returns the `(header, data)` paths for a raster name. The name may carry a
/// `.json` or `.f32` extension, which is stripped.
pub fn raster_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("f32") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut header = base.clone().into_os_string();
    header.push(".json");
    let mut data = base.into_os_string();
    data.push(".f32");
    (header.into(), data.into())
}

pub fn read_header(path: &Path) -> Result<RasterHeader> {
    let (header_path, _) = raster_paths(path);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    parse_header(&text, &header_path)
}

fn parse_header(text: &str, path: &Path) -> Result<RasterHeader> {
    let malformed = |field: &str, reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        field: field.to_string(),
        reason: reason.to_string(),
    };
    let value: Value = serde_json::from_str(text).map_err(|e| malformed("<root>", &e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("<root>", "expected a JSON object"))?;

    let dim = |field: &str| -> Result<usize> {
        let v = obj.get(field).ok_or_else(|| malformed(field, "missing"))?;
        match v.as_u64() {
            Some(n) if n > 0 => Ok(n as usize),
            _ => Err(malformed(field, "expected a positive integer")),
        }
    };
    let tag = |field: &str, expected: &str| -> Result<String> {
        let v = obj.get(field).ok_or_else(|| malformed(field, "missing"))?;
        match v.as_str() {
            Some(s) if s == expected => Ok(s.to_string()),
            _ => Err(malformed(field, &format!("expected \"{expected}\""))),
        }
    };

    let width = dim("width")?;
    let height = dim("height")?;
    let bands = dim("bands")?;
    let dtype = tag("dtype", DTYPE)?;
    let layout = tag("layout", LAYOUT)?;
    let endianness = tag("endianness", ENDIANNESS)?;

    let band_names = match obj.get("band_names") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => {
            let names = items
                .iter()
                .map(|v| v.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| malformed("band_names", "expected an array of strings"))?;
            if names.len() != bands {
                return Err(malformed("band_names", "length differs from `bands`"));
            }
            Some(names)
        }
        Some(_) => return Err(malformed("band_names", "expected an array of strings")),
    };
    let resolution_m = match obj.get("resolution_m") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_f64()
                .filter(|r| r.is_finite() && *r > 0.0)
                .ok_or_else(|| malformed("resolution_m", "expected a positive number"))?,
        ),
    };

    Ok(RasterHeader {
        width,
        height,
        bands,
        dtype,
        layout,
        endianness,
        band_names,
        resolution_m,
    })
}

pub fn load_raster(path: &Path) -> Result<RasterImage> {
    let header = read_header(path)?;
    let (_, data_path) = raster_paths(path);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    if bytes.len() != header.payload_bytes() {
        return Err(Error::SizeMismatch {
            path: data_path,
            expected: header.payload_bytes(),
            actual: bytes.len(),
        });
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    RasterImage::new(header.width, header.height, header.bands, samples)
}

pub fn save_raster(img: &RasterImage, path: &Path) -> Result<()> {
    save_raster_with_header(img, &RasterHeader::for_image(img), path)
}

/// Like [`save_raster`] but keeps the optional header fields of `header`.
/// The dimension and tag fields are always taken from `img`.
pub fn save_raster_with_header(img: &RasterImage, header: &RasterHeader, path: &Path) -> Result<()> {
    let mut header = header.clone();
    header.width = img.width;
    header.height = img.height;
    header.bands = img.bands;
    header.dtype = DTYPE.to_string();
    header.layout = LAYOUT.to_string();
    header.endianness = ENDIANNESS.to_string();

    let mut payload = Vec::with_capacity(img.samples.len() * 4);
    for (offset, &v) in img.samples.iter().enumerate() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            let plane = img.pixel_count();
            return Err(Error::NonFiniteSample {
                offset,
                band: offset / plane,
                x: (offset % plane) % img.width,
                y: (offset % plane) / img.width,
            });
        }
        payload.extend_from_slice(&narrowed.to_le_bytes());
    }

    let (header_path, data_path) = raster_paths(path);
    let text = serde_json::to_string_pretty(&header)?;
    fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))?;
    fs::write(&data_path, payload).map_err(|e| Error::io(&data_path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    GlobalMax,
    PerBandMax,
    FixedPeak(f64),
}

pub fn normalize(img: &RasterImage, mode: Normalization) -> Result<RasterImage> {
    let max_of = |s: &[f64]| s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let divisors: Vec<f64> = match mode {
        Normalization::GlobalMax => vec![max_of(&img.samples); img.bands],
        Normalization::PerBandMax => img.bands_iter().map(max_of).collect(),
        Normalization::FixedPeak(p) => {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::param("peak", format!("must be positive, got {p}")));
            }
            vec![p; img.bands]
        }
    };
    if let Some(k) = divisors.iter().position(|&d| d <= 0.0) {
        return Err(Error::ZeroScale(format!(
            "band {k} has no positive maximum under {mode:?}"
        )));
    }
    let plane = img.pixel_count();
    let samples = img
        .samples
        .iter()
        .enumerate()
        .map(|(i, &v)| v / divisors[i / plane])
        .collect();
    RasterImage::new(img.width, img.height, img.bands, samples)
}

/// Linear-interpolated percentile of an already sorted slice, `q` in `[0, 1]`.
pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// 1st/99th percentile stretch of one band to 8 bits. A flat band maps to mid gray.
pub(crate) fn stretch_band(band: &[f64]) -> Vec<u8> {
    let mut sorted = band.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, 0.01);
    let hi = percentile_sorted(&sorted, 0.99);
    if hi <= lo {
        return vec![128; band.len()];
    }
    band.iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes an 8-bit RGB PNG from three bands of `img`.
pub fn export_preview(img: &RasterImage, band_indices: [usize; 3], path: &Path) -> Result<()> {
    if let Some(&k) = band_indices.iter().find(|&&k| k >= img.bands) {
        return Err(Error::param(
            "band_indices",
            format!("index {k} out of range for {} bands", img.bands),
        ));
    }
    let channels: Vec<Vec<u8>> = band_indices.iter().map(|&k| stretch_band(img.band(k))).collect();
    let mut rgb = image::RgbImage::new(img.width as u32, img.height as u32);
    for (p, px) in rgb.pixels_mut().enumerate() {
        *px = image::Rgb([channels[0][p], channels[1][p], channels[2][p]]);
    }
    rgb.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Pair of a low-resolution MSI and a high-resolution PAN whose sizes differ by
/// an integer factor.
#[derive(Debug, Clone, PartialEq)]
pub struct MsiPanPair {
    msi: RasterImage,
    pan: RasterImage,
    factor: usize,
}

impl MsiPanPair {
    pub fn new(msi: RasterImage, pan: RasterImage, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::param("factor", "must be positive"));
        }
        if pan.bands != 1 {
            return Err(Error::ShapeMismatch(format!(
                "PAN must have 1 band, has {}",
                pan.bands
            )));
        }
        if pan.width != factor * msi.width || pan.height != factor * msi.height {
            return Err(Error::ShapeMismatch(format!(
                "PAN {}x{} is not {factor} x MSI {}x{}",
                pan.width, pan.height, msi.width, msi.height
            )));
        }
        Ok(Self { msi, pan, factor })
    }

    /// Infers the factor from the two sizes.
    pub fn infer(msi: RasterImage, pan: RasterImage) -> Result<Self> {
        let factor = pan.width / msi.width.max(1);
        Self::new(msi, pan, factor)
    }

    pub fn msi(&self) -> &RasterImage {
        &self.msi
    }

    pub fn pan(&self) -> &RasterImage {
        &self.pan
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn into_parts(self) -> (RasterImage, RasterImage, usize) {
        (self.msi, self.pan, self.factor)
    }
}
