//! Synthetic scenes with known ground truth: the three-signature toy mixture,
//! full MSI/PAN pairs, Gaussian noise at a target SNR and a k-means baseline.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attnet::NetworkConfig;
use crate::error::{Error, Result};
use crate::protocol::{mtf_degrade_msi, DegradeConfig};
use crate::raster::{MsiPanPair, RasterImage};

pub const TOY_SIZE: usize = 64;
pub const TOY_BANDS: usize = 8;
/// Attention maps used when the network is trained on the toy scene.
pub const TOY_MAPS: usize = 4;
/// Decoder weight decay for the toy study. Without it the decoder can rescale
/// small attention components and the map assignment is not identifiable.
pub const TOY_DECODER_DECAY: f64 = 1e-2;
pub const TOY_SNR_DB: f64 = 30.0;
/// Width in pixels of the soft transition between neighbouring toy regions.
pub const TOY_EDGE_PX: f64 = 4.0;

/// Toy signatures over 8 bands: rising, falling, and peaked at band 2. The
/// peaked curve sits close to the falling one.
pub const TOY_SIGNATURES: [[f64; TOY_BANDS]; 3] = [
    [0.10, 0.16, 0.24, 0.33, 0.43, 0.55, 0.68, 0.82],
    [0.85, 0.78, 0.69, 0.58, 0.47, 0.37, 0.28, 0.20],
    [0.80, 0.82, 0.84, 0.76, 0.58, 0.40, 0.28, 0.20],
];

/// Lower edges of the first two strips as fractions of the image height.
const TOY_EDGES: [f64; 2] = [0.6, 0.8];
/// Largest share of the secondary signature inside each strip, and which
/// signature that is.
const TOY_MIX: [(f64, usize); 3] = [(0.45, 1), (0.1, 2), (0.1, 1)];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyFixture {
    pub signatures: Vec<Vec<f64>>,
    /// One band per signature.
    pub abundances: RasterImage,
    pub clean: RasterImage,
    pub msi: RasterImage,
    pub labels: Vec<usize>,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Proportions of the three toy signatures at pixel `(x, y)`.
///
/// Regions are horizontal strips with logistic transitions. Inside strip `j`
/// the share of its secondary signature grows linearly from 0 at the left
/// edge to `TOY_MIX[j].0` at the right.
fn toy_abundance(x: usize, y: usize) -> [f64; 3] {
    let n = TOY_SIZE as f64;
    // a logistic with scale edge/8 rises from 1.8% to 98.2% over `edge` pixels
    let s = TOY_EDGE_PX / 8.0;
    let yc = y as f64 + 0.5;
    let upper = logistic((TOY_EDGES[0] * n - yc) / s);
    let lower = logistic((yc - TOY_EDGES[1] * n) / s);
    let middle = (1.0 - upper - lower).max(0.0);
    let region = [upper, middle, lower];
    let u = x as f64 / (n - 1.0);
    let mut a = [0.0; 3];
    for (j, (&w, &(mix, partner))) in region.iter().zip(&TOY_MIX).enumerate() {
        let t = mix * u;
        a[j] += w * (1.0 - t);
        a[partner] += w * t;
    }
    let sum: f64 = a.iter().sum();
    a.map(|v| v / sum)
}

/// Noise-free toy scene: abundances, their mixture and the argmax labels.
pub fn gen_toy_clean() -> ToyFixture {
    let (w, h) = (TOY_SIZE, TOY_SIZE);
    let mut abundance = vec![vec![0.0; w * h]; 3];
    let mut labels = vec![0; w * h];
    for y in 0..h {
        for x in 0..w {
            let a = toy_abundance(x, y);
            let p = y * w + x;
            for j in 0..3 {
                abundance[j][p] = a[j];
            }
            labels[p] = argmax(&a);
        }
    }
    let signatures: Vec<Vec<f64>> = TOY_SIGNATURES.iter().map(|s| s.to_vec()).collect();
    let abundances = RasterImage::from_bands(w, h, abundance).expect("toy abundances are finite");
    let clean = mix(&abundances, &signatures).expect("toy shapes agree");
    ToyFixture {
        signatures,
        msi: clean.clone(),
        clean,
        abundances,
        labels,
    }
}

/// The toy scene with 30 dB white Gaussian noise drawn from `seed`.
pub fn gen_toy(seed: u64) -> ToyFixture {
    let mut toy = gen_toy_clean();
    toy.msi = add_noise_snr(&toy.clean, TOY_SNR_DB, seed).expect("toy scene has signal power");
    toy
}

/// Network settings for the toy study: default architecture with
/// [`TOY_MAPS`] maps and [`TOY_DECODER_DECAY`].
pub fn toy_network_config(seed: u64) -> NetworkConfig {
    let mut cfg = NetworkConfig::new(TOY_BANDS).with_maps(TOY_MAPS);
    cfg.decoder_decay = TOY_DECODER_DECAY;
    cfg.seed = seed;
    cfg
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Linear mixture: band `k` of the result is `sum_j abundance_j * signature_j[k]`.
pub fn mix(abundances: &RasterImage, signatures: &[Vec<f64>]) -> Result<RasterImage> {
    if signatures.len() != abundances.bands() || signatures.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} abundance maps for {} signatures",
            abundances.bands(),
            signatures.len()
        )));
    }
    let bands = signatures[0].len();
    if signatures.iter().any(|s| s.len() != bands) {
        return Err(Error::ShapeMismatch("signatures differ in length".into()));
    }
    let n = abundances.pixel_count();
    let mut planes = vec![vec![0.0; n]; bands];
    for (sig, a) in signatures.iter().zip(abundances.bands_iter()) {
        for (plane, &s) in planes.iter_mut().zip(sig) {
            for (o, &v) in plane.iter_mut().zip(a) {
                *o += v * s;
            }
        }
    }
    RasterImage::from_bands(abundances.width(), abundances.height(), planes)
}

/// Mean squared sample value.
pub fn signal_power(img: &RasterImage) -> f64 {
    img.samples().iter().map(|v| v * v).sum::<f64>() / img.samples().len() as f64
}

/// Adds zero-mean Gaussian noise with variance `power / 10^(snr_db / 10)`.
/// `f64::INFINITY` returns the image unchanged.
pub fn add_noise_snr(img: &RasterImage, snr_db: f64, seed: u64) -> Result<RasterImage> {
    if snr_db == f64::INFINITY {
        return Ok(img.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::param("snr_db", format!("must be finite or +inf, got {snr_db}")));
    }
    let power = signal_power(img);
    if power == 0.0 {
        return Err(Error::Degenerate("image has zero signal power".into()));
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::param("snr_db", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = img.samples().iter().map(|v| v + normal.sample(&mut rng)).collect();
    RasterImage::new(img.width(), img.height(), img.bands(), noisy)
}

/// `10 log10(P_signal / P_noise)` between a clean image and its noisy copy.
pub fn measured_snr_db(clean: &RasterImage, noisy: &RasterImage) -> Result<f64> {
    if !clean.same_shape(noisy) {
        return Err(Error::ShapeMismatch("snr needs equal shapes".into()));
    }
    let noise: f64 = clean
        .samples()
        .iter()
        .zip(noisy.samples())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / clean.samples().len() as f64;
    Ok(10.0 * (signal_power(clean) / noise).log10())
}

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < bd {
            bd = d;
            best = j;
        }
    }
    best
}

/// Lloyd's algorithm on pixel spectra with k-means++ seeding. Stops after
/// [`KMEANS_MAX_ITER`] rounds or when no centre moves more than [`KMEANS_TOL`].
pub fn kmeans_labels(msi: &RasterImage, k: usize, seed: u64) -> Result<Vec<usize>> {
    let points = msi.spectra();
    if points.is_empty() {
        return Err(Error::InvalidRaster("empty image".into()));
    }
    if k == 0 || k > points.len() {
        return Err(Error::param("k", format!("must be in 1..={}, got {k}", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total == 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centers.push(points[next].clone());
        let c = centers.last().expect("just pushed");
        for (d, p) in d2.iter_mut().zip(&points) {
            *d = d.min(dist2(p, c));
        }
    }

    let dim = points[0].len();
    let mut labels = vec![0; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        for (l, p) in labels.iter_mut().zip(&points) {
            *l = nearest(p, &centers);
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let c: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(dist2(&c, &centers[j]).sqrt());
            centers[j] = c;
        }
        if shift <= KMEANS_TOL {
            break;
        }
    }
    for (l, p) in labels.iter_mut().zip(&points) {
        *l = nearest(p, &centers);
    }
    Ok(labels)
}

/// Fraction of pixels labelled correctly under the best one-to-one matching
/// of predicted labels to truth labels. Predicted labels left unmatched count
/// as wrong.
pub fn label_agreement(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "label maps of {} and {} pixels",
            predicted.len(),
            truth.len()
        )));
    }
    let np = predicted.iter().max().map_or(0, |m| m + 1);
    let nt = truth.iter().max().map_or(0, |m| m + 1);
    if np > 12 || nt > 12 {
        return Err(Error::param("labels", "at most 12 distinct labels are supported"));
    }
    let mut confusion = vec![vec![0usize; nt]; np];
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[p][t] += 1;
    }
    fn best(row: usize, used: u32, confusion: &[Vec<usize>]) -> usize {
        if row == confusion.len() {
            return 0;
        }
        let skip = best(row + 1, used, confusion);
        (0..confusion[row].len())
            .filter(|t| used & (1 << t) == 0)
            .map(|t| confusion[row][t] + best(row + 1, used | (1 << t), confusion))
            .fold(skip, usize::max)
    }
    Ok(best(0, 0, &confusion) as f64 / truth.len() as f64)
}

/// `count` smooth random spectra over `bands` bands with values in `[0.05, 0.95]`.
pub fn random_signatures(count: usize, bands: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let base = rng.random_range(0.2..0.6);
            let slope = rng.random_range(-0.4..0.4);
            let bump = rng.random_range(-0.3..0.3);
            let centre = rng.random_range(0.0..1.0);
            (0..bands)
                .map(|k| {
                    let u = if bands > 1 { k as f64 / (bands - 1) as f64 } else { 0.0 };
                    let v = base + slope * (u - 0.5) + bump * (-(u - centre).powi(2) / 0.08).exp();
                    v.clamp(0.05, 0.95)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub hr_ref: RasterImage,
    pub abundances: RasterImage,
    pub pair: MsiPanPair,
    pub alpha_true: Vec<f64>,
}

/// Fabricates a full-reference scene of `size x size` pixels.
///
/// Abundances are a softmax over per-signature fields made of a few random
/// low-frequency waves, random sharp-edged patches and fine pixel texture.
/// The PAN is a positive band combination (`alpha_true`, summing to 1) of the
/// HR MSI and the LR MSI is its MTF-degraded copy at factor `r`.
pub fn gen_synthetic_pair(signatures: &[Vec<f64>], size: usize, r: usize, seed: u64) -> Result<SyntheticPair> {
    if size == 0 || r == 0 || size % r != 0 {
        return Err(Error::param("size", format!("{size} must be a positive multiple of r = {r}")));
    }
    if signatures.len() < 2 {
        return Err(Error::param("signatures", "need at least two"));
    }
    let bands = signatures[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let texture = Normal::new(0.0, 0.35).expect("valid sigma");
    let mut fields = vec![vec![0.0; size * size]; signatures.len()];
    for field in &mut fields {
        for _ in 0..4 {
            let fx = rng.random_range(-6.0..6.0);
            let fy = rng.random_range(-6.0..6.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.5..1.5);
            for y in 0..size {
                for x in 0..size {
                    field[y * size + x] += amp * (2.0 * PI * (fx * x as f64 + fy * y as f64) / n + phase).sin();
                }
            }
        }
        for _ in 0..3 {
            let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
            let rad = rng.random_range(n / 16.0..n / 5.0);
            let lift = rng.random_range(1.0..2.5);
            for y in 0..size {
                for x in 0..size {
                    if (x as f64 - cx).hypot(y as f64 - cy) < rad {
                        field[y * size + x] += lift;
                    }
                }
            }
        }
        for v in field.iter_mut() {
            *v += texture.sample(&mut rng);
        }
    }
    let temperature = 1.5;
    for p in 0..size * size {
        let m = fields.iter().map(|f| f[p]).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = fields.iter().map(|f| ((f[p] - m) * temperature).exp()).collect();
        let z: f64 = e.iter().sum();
        for (f, v) in fields.iter_mut().zip(e) {
            f[p] = v / z;
        }
    }
    let abundances = RasterImage::from_bands(size, size, fields)?;
    let hr_ref = mix(&abundances, signatures)?;

    let raw: Vec<f64> = (0..bands).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let alpha_true: Vec<f64> = raw.iter().map(|a| a / total).collect();
    let mut pan = vec![0.0; size * size];
    for (a, band) in alpha_true.iter().zip(hr_ref.bands_iter()) {
        for (o, v) in pan.iter_mut().zip(band) {
            *o += a * v;
        }
    }
    let pan = RasterImage::new(size, size, 1, pan)?;
    let cfg = DegradeConfig {
        factor: r,
        ..DegradeConfig::default()
    };
    let msi = mtf_degrade_msi(&hr_ref, &cfg)?;
    Ok(SyntheticPair {
        pair: MsiPanPair::new(msi, pan, r)?,
        hr_ref,
        abundances,
        alpha_true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn toy_is_a_simplex_mixture() {
        let t = gen_toy_clean();
        for p in 0..t.abundances.pixel_count() {
            let s: f64 = t.abundances.spectrum(p).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(t.clean, mix(&t.abundances, &t.signatures).unwrap());
        assert_eq!(t.msi, t.clean);
        let hist = (0..3).map(|j| t.labels.iter().filter(|&&l| l == j).count()).collect::<Vec<_>>();
        assert!(hist.iter().all(|&c| c > 700), "{hist:?}");
    }

    #[test]
    fn toy_has_requested_snr() {
        let t = gen_toy(1);
        let snr = measured_snr_db(&t.clean, &t.msi).unwrap();
        assert!((snr - 30.0).abs() < 0.5, "{snr}");
        assert_eq!(gen_toy(1), t);
        assert_ne!(gen_toy(2).msi, t.msi);
    }

    #[test]
    fn infinite_snr_is_identity() {
        let t = gen_toy_clean();
        assert_eq!(add_noise_snr(&t.clean, f64::INFINITY, 0).unwrap(), t.clean);
        assert!(add_noise_snr(&RasterImage::zeros(4, 4, 1), 30.0, 0).is_err());
        assert!(add_noise_snr(&t.clean, f64::NAN, 0).is_err());
    }

    #[test]
    fn kmeans_cases() {
        let t = gen_toy(3);
        assert!(kmeans_labels(&t.msi, 1, 0).unwrap().iter().all(|&l| l == 0));
        let mut v = vec![0.0; 40];
        for (i, x) in v.iter_mut().enumerate() {
            *x = if i < 20 { 0.01 * i as f64 } else { 10.0 + 0.01 * i as f64 };
        }
        let img = RasterImage::new(40, 1, 1, v).unwrap();
        let labels = kmeans_labels(&img, 2, 5).unwrap();
        assert!(labels[..20].iter().all(|&l| l == labels[0]));
        assert!(labels[20..].iter().all(|&l| l == labels[20]));
        assert_ne!(labels[0], labels[20]);
        assert!(kmeans_labels(&img, 0, 0).is_err());
        assert!(kmeans_labels(&img, 41, 0).is_err());
    }

    #[test]
    fn agreement_uses_best_matching() {
        assert_eq!(label_agreement(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(label_agreement(&[0, 1, 2, 3], &[0, 0, 1, 1]).unwrap(), 0.5);
        assert_eq!(label_agreement(&[0, 0, 0, 0], &[0, 1, 2, 2]).unwrap(), 0.5);
        assert!(label_agreement(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn synthetic_pair_contract() {
        let sig = random_signatures(5, 4, 1);
        let s = gen_synthetic_pair(&sig, 64, 4, 2).unwrap();
        assert_eq!((s.pair.msi().width(), s.pair.pan().width()), (16, 64));
        let again = mtf_degrade_msi(&s.hr_ref, &DegradeConfig::default()).unwrap();
        assert_eq!(&again, s.pair.msi());
        assert!((s.alpha_true.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.alpha_true.iter().all(|&a| a > 0.0));
        assert_eq!(gen_synthetic_pair(&sig, 64, 4, 2).unwrap(), s);
        assert!(gen_synthetic_pair(&sig, 62, 4, 2).is_err());
    }

    proptest! {
        #[test]
        fn synthetic_abundances_on_simplex(seed in 0u64..20) {
            let s = gen_synthetic_pair(&random_signatures(3, 3, seed), 16, 4, seed).unwrap();
            for p in 0..s.abundances.pixel_count() {
                let a = s.abundances.spectrum(p);
                prop_assert!(a.iter().all(|&v| v >= 0.0));
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
