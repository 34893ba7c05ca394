use upsam::fusion::{fit_pan_regression, pansharpen, FusionConfig, InjectionMode};
use upsam::protocol::{mtf_degrade_msi, upsample, wald_reduce, DegradeConfig, UpsampleKernel};
use upsam::synth::{gen_synthetic_pair, random_signatures};

/// The LR PAN goes through the same MTF filter as the MSI, so it is exactly
/// `alpha_true` applied to the LR bands.
#[test]
fn regression_recovers_planted_pan_weights() {
    for seed in [1u64, 4, 11] {
        let sp = gen_synthetic_pair(&random_signatures(5, 4, seed), 128, 4, seed).unwrap();
        let pan_lr = mtf_degrade_msi(sp.pair.pan(), &DegradeConfig::default()).unwrap();
        let fit = fit_pan_regression(sp.pair.msi(), &pan_lr).unwrap();
        for (a, t) in fit.alpha.iter().zip(&sp.alpha_true) {
            assert!((a - t).abs() < 0.05, "seed {seed}: {:?} vs {:?}", fit.alpha, sp.alpha_true);
        }
    }
}

#[test]
fn wald_reduced_pair_fuses_back_to_reference_grid() {
    let sp = gen_synthetic_pair(&random_signatures(5, 4, 2), 64, 4, 2).unwrap();
    let reduced = wald_reduce(&sp.pair, &DegradeConfig::default()).unwrap();
    let mut cfg = FusionConfig::new(4);
    cfg.network.iterations = 100;
    cfg.network.restarts = 1;
    cfg.injection = InjectionMode::Global;
    let out = pansharpen(&reduced.pair, &cfg).unwrap();
    assert!(out.fused.same_shape(&reduced.reference));
    assert!(out.fused.samples().iter().all(|v| v.is_finite()));
    assert_eq!(out.attention_up.width(), reduced.pair.pan().width());
    assert_eq!(out.report.timings.len(), 5);
    assert_eq!(out.report.gains.regions, 1);
}

#[test]
fn nearest_and_bicubic_upsampling_agree_on_constants() {
    let img = upsam::RasterImage::filled(8, 6, 3, 0.25);
    for k in [UpsampleKernel::Nearest, UpsampleKernel::Bicubic] {
        let up = upsample(&img, 4, k).unwrap();
        assert_eq!((up.width(), up.height()), (32, 24));
        assert!(up.samples().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }
}
