//! Attention-driven detail extraction and injection.
//!
//! Steps of a run: (1) train the autoencoder on the LR MSI, (2) synthesize a
//! low-resolution PAN from the upsampled reconstruction, (3) take the PAN
//! detail, (4) build the max-proportion index map and the injection gains,
//! (5) inject and decode.

use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attnet::{decode_image, encode_image, train, AttentionStack, LossRecord, NetworkConfig, NetworkParams, TrainedModel};
use crate::error::{Error, Result};
use crate::protocol::{decimate, upsample, UpsampleKernel};
use crate::raster::{MsiPanPair, RasterImage};

/// Diagonal damping added to the normal equations of the PAN regression.
pub const REGRESSION_DAMPING: f64 = 1e-8;
const REGRESSION_REFINEMENTS: usize = 3;
/// Regions with fewer pixels than this get a zero gain.
pub const MIN_REGION_PIXELS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionCoeffs {
    pub alpha: Vec<f64>,
    pub intercept: f64,
}

/// Least-squares fit of `pan_lr` on the bands of `msi_lr` plus an intercept.
pub fn fit_pan_regression(msi_lr: &RasterImage, pan_lr: &RasterImage) -> Result<RegressionCoeffs> {
    if !msi_lr.same_grid(pan_lr) || pan_lr.bands() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "regression needs a 1-band PAN on the MSI grid, got {}x{}x{} vs {}x{}",
            pan_lr.width(),
            pan_lr.height(),
            pan_lr.bands(),
            msi_lr.width(),
            msi_lr.height()
        )));
    }
    let constant = |b: &[f64]| b.iter().all(|&v| v == b[0]);
    if msi_lr.bands_iter().all(constant) {
        return Err(Error::Degenerate("every MSI band is constant".into()));
    }
    let l = msi_lr.bands();
    let dim = l + 1;
    let regressor = |j: usize, p: usize| if j < l { msi_lr.band(j)[p] } else { 1.0 };
    let target = pan_lr.band(0);
    let mut a = vec![vec![0.0; dim]; dim];
    let mut rhs = vec![0.0; dim];
    for p in 0..msi_lr.pixel_count() {
        for i in 0..dim {
            let xi = regressor(i, p);
            rhs[i] += xi * target[p];
            for j in i..dim {
                a[i][j] += xi * regressor(j, p);
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            a[i][j] = a[j][i];
        }
    }
    let mut damped = a.clone();
    for (i, row) in damped.iter_mut().enumerate() {
        row[i] += REGRESSION_DAMPING;
    }
    // iterated Tikhonov: refine against the undamped system so the damping
    // only steers the null space of a rank-deficient design
    let mut beta = solve(damped.clone(), rhs.clone())?;
    for _ in 0..REGRESSION_REFINEMENTS {
        let resid: Vec<f64> = (0..dim)
            .map(|i| rhs[i] - (0..dim).map(|j| a[i][j] * beta[j]).sum::<f64>())
            .collect();
        let step = solve(damped.clone(), resid)?;
        for (b, s) in beta.iter_mut().zip(step) {
            *b += s;
        }
    }
    let coeffs = RegressionCoeffs {
        alpha: beta[..l].to_vec(),
        intercept: beta[l],
    };
    if !coeffs.alpha.iter().all(|v| v.is_finite()) || !coeffs.intercept.is_finite() {
        return Err(Error::Degenerate("regression produced non-finite coefficients".into()));
    }
    Ok(coeffs)
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        if a[pivot][col] == 0.0 {
            return Err(Error::Degenerate("singular normal equations".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}

/// `sum_k alpha_k * band_k + b` at every pixel.
pub fn synth_low_pan(coeffs: &RegressionCoeffs, msi_hat_up: &RasterImage) -> Result<RasterImage> {
    if coeffs.alpha.len() != msi_hat_up.bands() {
        return Err(Error::ShapeMismatch(format!(
            "{} coefficients for {} bands",
            coeffs.alpha.len(),
            msi_hat_up.bands()
        )));
    }
    let mut out = vec![coeffs.intercept; msi_hat_up.pixel_count()];
    for (a, band) in coeffs.alpha.iter().zip(msi_hat_up.bands_iter()) {
        for (o, v) in out.iter_mut().zip(band) {
            *o += a * v;
        }
    }
    RasterImage::new(msi_hat_up.width(), msi_hat_up.height(), 1, out)
}

/// `pan - pan_low_hat`.
pub fn extract_detail(pan: &RasterImage, pan_low_hat: &RasterImage) -> Result<RasterImage> {
    if !pan.same_shape(pan_low_hat) || pan.bands() != 1 {
        return Err(Error::ShapeMismatch("detail needs two 1-band images of equal size".into()));
    }
    let d = pan.samples().iter().zip(pan_low_hat.samples()).map(|(a, b)| a - b).collect();
    RasterImage::new(pan.width(), pan.height(), 1, d)
}

/// Per-pixel index of the largest attention proportion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Msim {
    pub width: usize,
    pub height: usize,
    pub maps: usize,
    pub index: Vec<usize>,
}

impl Msim {
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.maps];
        for &t in &self.index {
            h[t] += 1;
        }
        h
    }

    pub fn distinct(&self) -> usize {
        self.histogram().iter().filter(|&&n| n > 0).count()
    }

    pub fn as_raster(&self) -> RasterImage {
        let v = self.index.iter().map(|&t| t as f64).collect();
        RasterImage::new(self.width, self.height, 1, v).expect("index map is finite")
    }
}

/// Argmax over maps at every pixel, lowest index on ties. Accepts any
/// `c`-band raster, since interpolated attention need not stay on the simplex.
pub fn compute_msim(s_up: &RasterImage) -> Msim {
    let plane = s_up.pixel_count();
    let samples = s_up.samples();
    let index = (0..plane)
        .map(|p| {
            let mut best = 0;
            for j in 1..s_up.bands() {
                if samples[j * plane + p] > samples[best * plane + p] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Msim {
        width: s_up.width(),
        height: s_up.height(),
        maps: s_up.bands(),
        index,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionMode {
    Global,
    Msim,
}

impl FromStr for InjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "msim" => Ok(Self::Msim),
            other => Err(Error::param("injection", format!("expected global|msim, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectDomain {
    Maps,
    Bands,
}

impl FromStr for InjectDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maps" => Ok(Self::Maps),
            "bands" => Ok(Self::Bands),
            other => Err(Error::param("inject-domain", format!("expected maps|bands, got `{other}`"))),
        }
    }
}

/// Injection gains. `gains[i][t]` is the gain of channel `i` in region `t`;
/// a global table has a single region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    pub mode: InjectionMode,
    pub channels: usize,
    pub regions: usize,
    pub gains: Vec<Vec<f64>>,
    pub degenerate: Vec<bool>,
}

impl GainTable {
    pub fn gain(&self, channel: usize, region: usize) -> Result<f64> {
        let t = match self.mode {
            InjectionMode::Global => 0,
            InjectionMode::Msim => region,
        };
        self.gains
            .get(channel)
            .and_then(|g| g.get(t))
            .copied()
            .ok_or_else(|| Error::ShapeMismatch(format!("no gain for channel {channel}, region {region}")))
    }

    pub fn degenerate_regions(&self) -> Vec<usize> {
        (0..self.regions).filter(|&t| self.degenerate[t]).collect()
    }
}

/// Population `(cov(s, p), var(p))` over `pixels`, two-pass.
fn cov_var(s: &[f64], p: &[f64], pixels: &[usize]) -> (f64, f64) {
    let n = pixels.len() as f64;
    let ms = pixels.iter().map(|&i| s[i]).sum::<f64>() / n;
    let mp = pixels.iter().map(|&i| p[i]).sum::<f64>() / n;
    let (mut c, mut v) = (0.0, 0.0);
    for &i in pixels {
        let dp = p[i] - mp;
        c += (s[i] - ms) * dp;
        v += dp * dp;
    }
    (c / n, v / n)
}

fn check_gain_inputs(s_up: &RasterImage, pan_low_hat: &RasterImage) -> Result<()> {
    if !s_up.same_grid(pan_low_hat) || pan_low_hat.bands() != 1 {
        return Err(Error::ShapeMismatch("gain inputs must share one grid; PAN must be 1 band".into()));
    }
    Ok(())
}

/// `cov(channel_i, pan_low_hat) / var(pan_low_hat)` over the whole image.
pub fn global_gains(s_up: &RasterImage, pan_low_hat: &RasterImage) -> Result<GainTable> {
    check_gain_inputs(s_up, pan_low_hat)?;
    let all: Vec<usize> = (0..s_up.pixel_count()).collect();
    let p = pan_low_hat.band(0);
    let gains = s_up
        .bands_iter()
        .map(|s| {
            let (c, v) = cov_var(s, p, &all);
            if v == 0.0 {
                Err(Error::Degenerate("synthesized low-resolution PAN is constant".into()))
            } else {
                Ok(vec![c / v])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GainTable {
        mode: InjectionMode::Global,
        channels: s_up.bands(),
        regions: 1,
        gains,
        degenerate: vec![false],
    })
}

/// Gains estimated separately inside every index region of `msim`.
pub fn variant_gains(s_up: &RasterImage, pan_low_hat: &RasterImage, msim: &Msim) -> Result<GainTable> {
    check_gain_inputs(s_up, pan_low_hat)?;
    if msim.width != s_up.width() || msim.height != s_up.height() {
        return Err(Error::ShapeMismatch("index map is not aligned with the gain inputs".into()));
    }
    let mut members = vec![Vec::new(); msim.maps];
    for (p, &t) in msim.index.iter().enumerate() {
        members[t].push(p);
    }
    let p = pan_low_hat.band(0);
    let stats: Vec<Vec<(f64, f64)>> = s_up
        .bands_iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|s| {
            members
                .iter()
                .map(|px| if px.len() < MIN_REGION_PIXELS { (0.0, 0.0) } else { cov_var(s, p, px) })
                .collect()
        })
        .collect();
    let degenerate: Vec<bool> = (0..msim.maps)
        .map(|t| members[t].len() < MIN_REGION_PIXELS || stats.first().is_none_or(|s| s[t].1 == 0.0))
        .collect();
    let gains = stats
        .iter()
        .map(|row| {
            row.iter()
                .zip(&degenerate)
                .map(|(&(c, v), &d)| if d { 0.0 } else { c / v })
                .collect()
        })
        .collect();
    Ok(GainTable {
        mode: InjectionMode::Msim,
        channels: s_up.bands(),
        regions: msim.maps,
        gains,
        degenerate,
    })
}

/// `base_i(p) + gain(i, t(p)) * detail(p)` for every channel `i`.
pub fn inject(base: &RasterImage, gains: &GainTable, msim: Option<&Msim>, detail: &RasterImage) -> Result<RasterImage> {
    if !base.same_grid(detail) || detail.bands() != 1 {
        return Err(Error::ShapeMismatch("detail must be 1 band on the injection grid".into()));
    }
    if gains.channels != base.bands() {
        return Err(Error::ShapeMismatch(format!(
            "gain table covers {} channels, image has {}",
            gains.channels,
            base.bands()
        )));
    }
    let region = |p: usize| -> Result<usize> {
        match (gains.mode, msim) {
            (InjectionMode::Global, _) => Ok(0),
            (InjectionMode::Msim, Some(m)) => Ok(m.index[p]),
            (InjectionMode::Msim, None) => Err(Error::param("msim", "region gains need an index map")),
        }
    };
    if let Some(m) = msim {
        if m.index.len() != base.pixel_count() {
            return Err(Error::ShapeMismatch("index map is not aligned with the image".into()));
        }
    }
    let d = detail.band(0);
    let mut out = base.samples().to_vec();
    let plane = base.pixel_count();
    for i in 0..base.bands() {
        for p in 0..plane {
            out[i * plane + p] += gains.gain(i, region(p)?)? * d[p];
        }
    }
    RasterImage::new(base.width(), base.height(), base.bands(), out)
}

/// Injects detail into the (upsampled) attention maps and decodes to bands.
pub fn inject_and_reconstruct(
    params: &NetworkParams,
    s_up: &RasterImage,
    gains: &GainTable,
    msim: Option<&Msim>,
    detail: &RasterImage,
) -> Result<RasterImage> {
    decode_image(params, &inject(s_up, gains, msim, detail)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub injection: InjectionMode,
    pub domain: InjectDomain,
    pub upsample: UpsampleKernel,
    pub network: NetworkConfig,
    pub seed: u64,
}

impl FusionConfig {
    pub fn new(bands: usize) -> Self {
        Self {
            injection: InjectionMode::Msim,
            domain: InjectDomain::Maps,
            upsample: UpsampleKernel::Bicubic,
            network: NetworkConfig::new(bands),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub step: u8,
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub config: FusionConfig,
    pub loss_history: Vec<LossRecord>,
    pub coefficients: RegressionCoeffs,
    pub gains: GainTable,
    pub degenerate_regions: Vec<usize>,
    pub msim_histogram: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub timings: Vec<StageTiming>,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub fused: RasterImage,
    pub report: FusionReport,
    pub model: TrainedModel,
    /// Attention maps of the LR MSI.
    pub attention: AttentionStack,
    /// Attention maps interpolated to the PAN grid.
    pub attention_up: RasterImage,
    pub msim: Msim,
    pub detail: RasterImage,
}

fn stage<T>(step: u8, name: &'static str, timings: &mut Vec<StageTiming>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| Error::Stage {
        step,
        name,
        source: Box::new(e),
    })?;
    timings.push(StageTiming {
        step,
        name: name.to_string(),
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(out)
}

/// Runs the five steps on one MSI/PAN pair.
pub fn pansharpen(pair: &MsiPanPair, cfg: &FusionConfig) -> Result<FusionOutput> {
    let (msi, pan, r) = (pair.msi(), pair.pan(), pair.factor());
    let mut net_cfg = cfg.network.clone();
    net_cfg.seed = cfg.seed;
    let mut timings = Vec::new();

    let model = stage(1, "train", &mut timings, || train(msi, &net_cfg))?;
    let params = &model.params;

    let (attention, attention_up, msi_hat_up, coefficients, pan_low_hat) =
        stage(2, "low-resolution PAN synthesis", &mut timings, || {
            let attention = encode_image(params, msi)?;
            let msi_hat = decode_image(params, attention.as_raster())?;
            let attention_up = upsample(attention.as_raster(), r, cfg.upsample)?;
            let msi_hat_up = upsample(&msi_hat, r, cfg.upsample)?;
            let coefficients = fit_pan_regression(msi, &decimate(pan, r)?)?;
            let pan_low_hat = synth_low_pan(&coefficients, &msi_hat_up)?;
            Ok((attention, attention_up, msi_hat_up, coefficients, pan_low_hat))
        })?;

    let detail = stage(3, "detail extraction", &mut timings, || extract_detail(pan, &pan_low_hat))?;

    let (msim, gains) = stage(4, "gain estimation", &mut timings, || {
        let msim = compute_msim(&attention_up);
        let target = match cfg.domain {
            InjectDomain::Maps => &attention_up,
            InjectDomain::Bands => &msi_hat_up,
        };
        let gains = match cfg.injection {
            InjectionMode::Global => global_gains(target, &pan_low_hat)?,
            InjectionMode::Msim => variant_gains(target, &pan_low_hat, &msim)?,
        };
        Ok((msim, gains))
    })?;

    let fused = stage(5, "reconstruction", &mut timings, || match cfg.domain {
        InjectDomain::Maps => inject_and_reconstruct(params, &attention_up, &gains, Some(&msim), &detail),
        InjectDomain::Bands => inject(&msi_hat_up, &gains, Some(&msim), &detail),
    })?;

    let report = FusionReport {
        config: FusionConfig {
            network: net_cfg,
            ..cfg.clone()
        },
        loss_history: model.history.clone(),
        coefficients,
        degenerate_regions: gains.degenerate_regions(),
        gains,
        msim_histogram: msim.histogram(),
        timings,
    };
    Ok(FusionOutput {
        fused,
        report,
        model,
        attention,
        attention_up,
        msim,
        detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, b: usize, seed: u64) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RasterImage::new(w, h, b, (0..w * h * b).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn plane(w: usize, h: usize, v: Vec<f64>) -> RasterImage {
        RasterImage::new(w, h, 1, v).unwrap()
    }

    #[test]
    fn regression_exact_span() {
        let m = random(8, 8, 2, 1);
        let pan: Vec<f64> = (0..64).map(|p| 0.3 * m.band(0)[p] + 0.7 * m.band(1)[p] + 0.1).collect();
        let c = fit_pan_regression(&m, &plane(8, 8, pan.clone())).unwrap();
        assert!((c.alpha[0] - 0.3).abs() < 1e-6 && (c.alpha[1] - 0.7).abs() < 1e-6);
        assert!((c.intercept - 0.1).abs() < 1e-6);
        let fit = synth_low_pan(&c, &m).unwrap();
        let res = fit.samples().iter().zip(&pan).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(res < 1e-10, "{res}");

        let c = fit_pan_regression(&m, &m.band_image(0)).unwrap();
        assert!((c.alpha[0] - 1.0).abs() < 1e-6 && c.alpha[1].abs() < 1e-6 && c.intercept.abs() < 1e-6);
    }

    #[test]
    fn regression_residual_is_orthogonal() {
        let m = random(10, 10, 3, 2);
        let pan = random(10, 10, 1, 3);
        let c = fit_pan_regression(&m, &pan).unwrap();
        let fit = synth_low_pan(&c, &m).unwrap();
        let r: Vec<f64> = pan.samples().iter().zip(fit.samples()).map(|(a, b)| a - b).collect();
        for k in 0..3 {
            let dot: f64 = r.iter().zip(m.band(k)).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-8, "{dot}");
        }
        assert!(r.iter().sum::<f64>().abs() < 1e-8);
    }

    #[test]
    fn regression_rejects_constant_design() {
        let m = RasterImage::filled(4, 4, 2, 0.5);
        assert!(matches!(fit_pan_regression(&m, &random(4, 4, 1, 0)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn synth_low_pan_cases() {
        let m = random(4, 4, 3, 4);
        let unit = RegressionCoeffs { alpha: vec![1.0, 0.0, 0.0], intercept: 0.0 };
        assert_eq!(synth_low_pan(&unit, &m).unwrap().band(0), m.band(0));
        let flat = RegressionCoeffs { alpha: vec![0.0; 3], intercept: 0.5 };
        assert!(synth_low_pan(&flat, &m).unwrap().samples().iter().all(|&v| v == 0.5));
        assert!(synth_low_pan(&flat, &random(4, 4, 2, 0)).is_err());
    }

    #[test]
    fn detail_hand_case() {
        let p = plane(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let d = extract_detail(&p, &plane(2, 2, vec![0.5; 4])).unwrap();
        assert_eq!(d.samples(), &[0.5, -0.5, -0.5, 0.5]);
        assert!(extract_detail(&p, &plane(1, 4, vec![0.0; 4])).is_err());
    }

    #[test]
    fn msim_ties_and_one_hot() {
        let s = RasterImage::new(3, 1, 2, vec![1.0, 0.5, 0.0, 0.0, 0.5, 1.0]).unwrap();
        assert_eq!(compute_msim(&s).index, vec![0, 0, 1]);
    }

    #[test]
    fn global_gain_cases() {
        let p = random(6, 6, 1, 5);
        let s = RasterImage::from_bands(
            6,
            6,
            vec![p.band(0).iter().map(|v| 2.0 * v + 5.0).collect(), vec![0.3; 36]],
        )
        .unwrap();
        let g = global_gains(&s, &p).unwrap();
        assert!((g.gains[0][0] - 2.0).abs() < 1e-12);
        assert!(g.gains[1][0].abs() < 1e-12);
        assert!(global_gains(&s, &RasterImage::filled(6, 6, 1, 1.0)).is_err());
    }

    #[test]
    fn variant_gains_per_region() {
        let (w, h) = (8, 8);
        let p = random(w, h, 1, 6);
        let msim = Msim { width: w, height: h, maps: 3, index: (0..64).map(|i| if i < 32 { 0 } else { 1 }).collect() };
        let s = RasterImage::from_bands(
            w,
            h,
            vec![
                (0..64).map(|i| if i < 32 { 3.0 * p.band(0)[i] } else { -p.band(0)[i] + 1.0 }).collect(),
                vec![0.2; 64],
                random(w, h, 1, 7).band(0).to_vec(),
            ],
        )
        .unwrap();
        let g = variant_gains(&s, &p, &msim).unwrap();
        assert!((g.gains[0][0] - 3.0).abs() < 1e-10);
        assert!((g.gains[0][1] + 1.0).abs() < 1e-10);
        assert!(g.gains[1][0].abs() < 1e-12);
        assert_eq!(g.degenerate, vec![false, false, true]);
        assert_eq!(g.gains[2][2], 0.0);
    }

    #[test]
    fn injection_fixpoints_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = NetworkParams::init(&NetworkConfig::new(3).with_maps(4), &mut rng).unwrap();
        let s = random(4, 4, 4, 9);
        let d = random(4, 4, 1, 10).map(|v| v - 0.5).unwrap();
        let pan = random(4, 4, 1, 11);
        let msim = compute_msim(&s);
        let g = variant_gains(&s, &pan, &Msim { maps: 4, index: vec![0; 16], ..msim.clone() }).unwrap();
        let plain = decode_image(&net, &s).unwrap();

        let zero = RasterImage::zeros(4, 4, 1);
        assert_eq!(inject_and_reconstruct(&net, &s, &g, Some(&msim), &zero).unwrap(), plain);
        let zero_g = GainTable { gains: vec![vec![0.0; 4]; 4], ..g.clone() };
        assert_eq!(inject_and_reconstruct(&net, &s, &zero_g, Some(&msim), &d).unwrap(), plain);

        let x1 = inject_and_reconstruct(&net, &s, &g, Some(&msim), &d).unwrap();
        let x2 = inject_and_reconstruct(&net, &s, &g, Some(&msim), &d.map(|v| 2.0 * v).unwrap()).unwrap();
        for ((a, b), c) in x1.samples().iter().zip(x2.samples()).zip(plain.samples()) {
            assert!(((b - c) - 2.0 * (a - c)).abs() < 1e-10);
        }
        assert!(inject(&s, &g, None, &d).is_err());
    }

    #[test]
    fn pansharpen_shapes_and_stage_errors() {
        let msi = random(8, 8, 3, 12);
        let pan = random(32, 32, 1, 13);
        let pair = MsiPanPair::new(msi, pan, 4).unwrap();
        let mut cfg = FusionConfig::new(3);
        cfg.network.iterations = 5;
        cfg.network.maps = 4;
        let out = pansharpen(&pair, &cfg).unwrap();
        assert_eq!((out.fused.width(), out.fused.height(), out.fused.bands()), (32, 32, 3));
        assert_eq!(out.report.timings.iter().map(|t| t.step).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);

        cfg.network.bands = 5;
        match pansharpen(&pair, &cfg) {
            Err(Error::Stage { step, .. }) => assert_eq!(step, 1),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn constant_msim_reduces_to_global(seed in 0u64..500) {
            let s = random(6, 6, 3, seed);
            let p = random(6, 6, 1, seed + 1000);
            let t = (seed % 3) as usize;
            let msim = Msim { width: 6, height: 6, maps: 3, index: vec![t; 36] };
            let v = variant_gains(&s, &p, &msim).unwrap();
            let g = global_gains(&s, &p).unwrap();
            for i in 0..3 {
                prop_assert!((v.gains[i][t] - g.gains[i][0]).abs() <= 1e-10);
            }
        }

        #[test]
        fn msim_ignores_positive_scaling(seed in 0u64..500, k in 0.01f64..100.0) {
            let s = random(5, 5, 4, seed);
            prop_assert_eq!(compute_msim(&s), compute_msim(&s.map(|v| v * k).unwrap()));
        }
    }
}
