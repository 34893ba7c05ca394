//! Fusion quality metrics.
//!
//! Full-reference: PSNR, SAM, ERGAS and Q2^n. No-reference: the spectral and
//! spatial distortions D_lambda, D_S and their product QNR. All inputs are
//! expected in normalized units with a peak of 1.

pub mod hypercomplex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Reported PSNR when the two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const DEFAULT_BLOCK: usize = 32;

fn check_same_shape(a: &RasterImage, b: &RasterImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.bands(),
            b.width(),
            b.height(),
            b.bands()
        )));
    }
    Ok(())
}

fn band_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Mean over bands of `10 log10(1 / MSE_k)`.
pub fn psnr(reference: &RasterImage, test: &RasterImage) -> Result<f64> {
    check_same_shape(reference, test)?;
    let total: f64 = reference
        .bands_iter()
        .zip(test.bands_iter())
        .map(|(a, b)| {
            let mse = band_mse(a, b);
            if mse == 0.0 {
                PSNR_CAP_DB
            } else {
                -10.0 * mse.log10()
            }
        })
        .sum();
    Ok(total / reference.bands() as f64)
}

/// Mean spectral angle in degrees. Pixels where either spectrum has zero norm
/// are skipped.
pub fn sam(reference: &RasterImage, test: &RasterImage) -> Result<f64> {
    check_same_shape(reference, test)?;
    let plane = reference.pixel_count();
    let (ra, ta) = (reference.samples(), test.samples());
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..plane {
        let (mut nr, mut nt) = (0.0, 0.0);
        for k in 0..reference.bands() {
            nr += ra[k * plane + p].powi(2);
            nt += ta[k * plane + p].powi(2);
        }
        if nr == 0.0 || nt == 0.0 {
            continue;
        }
        // angle = 2 atan2(|u - v|, |u + v|) on unit vectors; exact 0 for
        // parallel inputs where acos of a rounded cosine is not
        let (nr, nt) = (nr.sqrt(), nt.sqrt());
        let (mut diff, mut sum_sq) = (0.0, 0.0);
        for k in 0..reference.bands() {
            let (u, v) = (ra[k * plane + p] / nr, ta[k * plane + p] / nt);
            diff += (u - v).powi(2);
            sum_sq += (u + v).powi(2);
        }
        sum += 2.0 * diff.sqrt().atan2(sum_sq.sqrt());
        count += 1;
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok((sum / count as f64).to_degrees())
}

/// `(100 / r) sqrt(mean_k RMSE_k^2 / mu_k^2)` with `mu_k` the reference band mean.
pub fn ergas(reference: &RasterImage, test: &RasterImage, factor: f64) -> Result<f64> {
    check_same_shape(reference, test)?;
    if !(factor > 0.0) {
        return Err(Error::param("factor", "must be positive"));
    }
    let mut acc = 0.0;
    for (k, (a, b)) in reference.bands_iter().zip(test.bands_iter()).enumerate() {
        let mu = a.iter().sum::<f64>() / a.len() as f64;
        if mu == 0.0 {
            return Err(Error::Degenerate(format!("reference band {k} has zero mean")));
        }
        acc += band_mse(a, b) / (mu * mu);
    }
    Ok(100.0 / factor * (acc / reference.bands() as f64).sqrt())
}

/// Top-left corners of the `block x block` windows stepped by `shift`.
fn block_origins(width: usize, height: usize, block: usize, shift: usize) -> Result<Vec<(usize, usize)>> {
    if block == 0 || shift == 0 {
        return Err(Error::param("block", "block and shift must be positive"));
    }
    if block > width || block > height {
        return Err(Error::ShapeMismatch(format!(
            "block {block} exceeds image {width}x{height}"
        )));
    }
    let xs: Vec<usize> = (0..=width - block).step_by(shift).collect();
    Ok((0..=height - block)
        .step_by(shift)
        .flat_map(|y| xs.iter().map(move |&x| (x, y)))
        .collect())
}

fn block_values(plane: &[f64], width: usize, x0: usize, y0: usize, block: usize) -> Vec<f64> {
    (y0..y0 + block)
        .flat_map(|y| plane[y * width + x0..y * width + x0 + block].iter().copied())
        .collect()
}

fn uiqi_block(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        va += dx * dx;
        vb += dy * dy;
        cab += dx * dy;
    }
    let (va, vb, cab) = (va / n, vb / n, cab / n);
    quality(cab, va + vb, ma * ma + mb * mb, ma * mb, a == b)
}

/// `(2 cov / (var_a + var_b)) * (2 mu_a mu_b / (mu_a^2 + mu_b^2))`. Two constant
/// blocks score 1 if identical and 0 otherwise; two zero-mean blocks have a
/// luminance factor of 1.
fn quality(cov: f64, var_sum: f64, mean_sq_sum: f64, mean_prod: f64, identical: bool) -> f64 {
    if var_sum <= 0.0 {
        return if identical { 1.0 } else { 0.0 };
    }
    let luminance = if mean_sq_sum == 0.0 {
        1.0
    } else {
        2.0 * mean_prod / mean_sq_sum
    };
    2.0 * cov / var_sum * luminance
}

/// Universal image quality index of two single-band images, averaged over
/// `block x block` windows stepped by `shift`.
pub fn uiqi(a: &RasterImage, b: &RasterImage, block: usize, shift: usize) -> Result<f64> {
    check_same_shape(a, b)?;
    if a.bands() != 1 {
        return Err(Error::ShapeMismatch(format!("uiqi needs 1 band, got {}", a.bands())));
    }
    uiqi_planes(a.band(0), b.band(0), a.width(), a.height(), block, shift)
}

fn uiqi_planes(a: &[f64], b: &[f64], width: usize, height: usize, block: usize, shift: usize) -> Result<f64> {
    let origins = block_origins(width, height, block, shift)?;
    let total: f64 = origins
        .iter()
        .map(|&(x, y)| {
            uiqi_block(
                &block_values(a, width, x, y, block),
                &block_values(b, width, x, y, block),
            )
        })
        .sum();
    Ok(total / origins.len() as f64)
}

/// Hypercomplex quality of one block given pixel spectra padded to `2^n`.
fn q2n_block(z: &[Vec<f64>], w: &[Vec<f64>]) -> f64 {
    use hypercomplex::{conj, mul, norm};
    let dim = z[0].len();
    let n = z.len() as f64;
    let mut mz = vec![0.0; dim];
    let mut mw = vec![0.0; dim];
    for (a, b) in z.iter().zip(w) {
        for k in 0..dim {
            mz[k] += a[k] / n;
            mw[k] += b[k] / n;
        }
    }
    // two-pass: centre first, then accumulate hypercomplex covariance
    let mut cov = vec![0.0; dim];
    let mut var_sum = 0.0;
    for (a, b) in z.iter().zip(w) {
        let da: Vec<f64> = a.iter().zip(&mz).map(|(x, m)| x - m).collect();
        let db: Vec<f64> = b.iter().zip(&mw).map(|(x, m)| x - m).collect();
        for (c, v) in cov.iter_mut().zip(mul(&da, &conj(&db))) {
            *c += v / n;
        }
        var_sum += (norm(&da).powi(2) + norm(&db).powi(2)) / n;
    }
    let (nz, nw) = (norm(&mz), norm(&mw));
    quality(norm(&cov), var_sum, nz * nz + nw * nw, nz * nw, z == w)
}

fn padded_spectra(img: &RasterImage, x0: usize, y0: usize, block: usize) -> Vec<Vec<f64>> {
    let dim = img.bands().next_power_of_two();
    let w = img.width();
    let mut out = Vec::with_capacity(block * block);
    for y in y0..y0 + block {
        for x in x0..x0 + block {
            let mut s = img.spectrum(y * w + x);
            s.resize(dim, 0.0);
            out.push(s);
        }
    }
    out
}

/// Q2^n: hypercomplex extension of UIQI over `block x block` windows.
/// Bands are zero-padded to the next power of two.
pub fn q2n(reference: &RasterImage, test: &RasterImage, block: usize, shift: usize) -> Result<f64> {
    check_same_shape(reference, test)?;
    let origins = block_origins(reference.width(), reference.height(), block, shift)?;
    let total: f64 = origins
        .iter()
        .map(|&(x, y)| {
            q2n_block(
                &padded_spectra(reference, x, y, block),
                &padded_spectra(test, x, y, block),
            )
        })
        .sum();
    Ok(total / origins.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoReference {
    pub d_lambda: f64,
    pub d_s: f64,
    pub qnr: f64,
}

/// QNR with exponents 1. UIQI uses `block` windows at the fused scale and
/// `block / r` windows at the low-resolution scale, so both scales cover the
/// same ground footprint.
pub fn qnr(
    fused: &RasterImage,
    msi_lr: &RasterImage,
    pan: &RasterImage,
    pan_lr: &RasterImage,
    block: usize,
) -> Result<NoReference> {
    if fused.bands() != msi_lr.bands() || pan.bands() != 1 || pan_lr.bands() != 1 {
        return Err(Error::ShapeMismatch("band counts of QNR inputs disagree".into()));
    }
    if !fused.same_grid(pan) || !msi_lr.same_grid(pan_lr) {
        return Err(Error::ShapeMismatch("QNR inputs are not on matching grids".into()));
    }
    let r = fused.width() / msi_lr.width();
    if r == 0 || fused.width() != r * msi_lr.width() || fused.height() != r * msi_lr.height() {
        return Err(Error::ShapeMismatch("fused size is not an integer multiple of the MSI".into()));
    }
    if block % r != 0 {
        return Err(Error::param("block", format!("{block} is not a multiple of the factor {r}")));
    }
    let lr_block = block / r;
    let hr = |a: &[f64], b: &[f64]| uiqi_planes(a, b, fused.width(), fused.height(), block, block);
    let lr = |a: &[f64], b: &[f64]| uiqi_planes(a, b, msi_lr.width(), msi_lr.height(), lr_block, lr_block);

    let l = fused.bands();
    let mut d_lambda = 0.0;
    if l > 1 {
        for i in 0..l {
            for j in 0..l {
                if i != j {
                    d_lambda += (hr(fused.band(i), fused.band(j))? - lr(msi_lr.band(i), msi_lr.band(j))?).abs();
                }
            }
        }
        d_lambda /= (l * (l - 1)) as f64;
    }
    let mut d_s = 0.0;
    for i in 0..l {
        d_s += (hr(fused.band(i), pan.band(0))? - lr(msi_lr.band(i), pan_lr.band(0))?).abs();
    }
    d_s /= l as f64;
    Ok(NoReference {
        d_lambda,
        d_s,
        qnr: (1.0 - d_lambda) * (1.0 - d_s),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr: f64,
    pub sam: f64,
    pub ergas: f64,
    pub q2n: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qnr: Option<f64>,
}

/// All reduced-resolution metrics. The Q2^n block shrinks to the image size
/// when the image is smaller than `block`.
pub fn evaluate(reference: &RasterImage, test: &RasterImage, factor: f64, block: usize) -> Result<MetricsReport> {
    let block = block.min(reference.width()).min(reference.height());
    Ok(MetricsReport {
        psnr: psnr(reference, test)?,
        sam: sam(reference, test)?,
        ergas: ergas(reference, test, factor)?,
        q2n: q2n(reference, test, block, block)?,
        d_lambda: None,
        d_s: None,
        qnr: None,
    })
}

/// Plain-text table, one row per method.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let full = rows.iter().any(|(_, m)| m.qnr.is_some());
    let mut out = format!(
        "{:<name_w$} | {:>9} | {:>8} | {:>8} | {:>7}",
        "Method", "PSNR", "SAM", "ERGAS", "Q2n"
    );
    if full {
        out.push_str(&format!(" | {:>7} | {:>7} | {:>7}", "D_l", "D_s", "QNR"));
    }
    out.push('\n');
    out.push_str(&"-".repeat(out.len() - 1));
    out.push('\n');
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for (name, m) in rows {
        out.push_str(&format!(
            "{:<name_w$} | {:>9.4} | {:>8.4} | {:>8.4} | {:>7.4}",
            name, m.psnr, m.sam, m.ergas, m.q2n
        ));
        if full {
            out.push_str(&format!(
                " | {:>7} | {:>7} | {:>7}",
                opt(m.d_lambda),
                opt(m.d_s),
                opt(m.qnr)
            ));
        }
        out.push('\n');
    }
    out
}
