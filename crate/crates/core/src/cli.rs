//! Command-line front end. Every subcommand prints a JSON report (`schema: 1`)
//! on stdout; `--report` also writes it to a file.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::attnet::{encode_image, load_model, save_model, train, NetworkConfig, TrainedModel};
use crate::fusion::{compute_msim, pansharpen, FusionConfig, InjectDomain, InjectionMode, Msim};
use crate::metrics::{evaluate, qnr, DEFAULT_BLOCK};
use crate::protocol::{downsample_pan, mtf_sigma, wald_reduce, DegradeConfig, UpsampleKernel};
use crate::raster::{export_preview, load_raster, normalize, save_raster, MsiPanPair, Normalization, RasterImage};
use crate::synth::{gen_toy, kmeans_labels, label_agreement, toy_network_config};

pub const REPORT_SCHEMA: u32 = 1;
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "UPSAM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "upsam", version, about = "Unsupervised attention-driven pansharpening")]
struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fuse a low-resolution MSI with a high-resolution PAN.
    Sharpen(SharpenArgs),
    /// Reduce an MSI/PAN pair by the factor r (Wald protocol).
    Degrade(DegradeArgs),
    /// Full-reference metrics of a test image against a reference, or label agreement.
    Evaluate(EvaluateArgs),
    /// No-reference QNR of a fused image.
    EvaluateFr(EvaluateFrArgs),
    /// Generate the three-signature toy scene and run the attention study on it.
    Toy(ToyArgs),
    /// Train on (or load a model for) an MSI and dump its attention maps and MSIM.
    Attention(AttentionArgs),
}

#[derive(Debug, Args)]
struct NetArgs {
    /// Attention maps c [default: 10; toy: 4]
    #[arg(long)]
    maps: Option<usize>,
    /// Entropy weight [default: 0.001]
    #[arg(long)]
    lambda: Option<f64>,
    /// Training iterations per restart [default: 5000]
    #[arg(long)]
    iters: Option<usize>,
    /// Adam learning rate [default: 0.02]
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size in pixels [default: 256]
    #[arg(long)]
    batch: Option<usize>,
    /// Independent trainings; the lowest final loss wins [default: 3]
    #[arg(long)]
    restarts: Option<usize>,
    /// L2 penalty on decoder weights [default: 0; toy: 0.01]
    #[arg(long)]
    decoder_decay: Option<f64>,
}

impl NetArgs {
    fn apply(&self, cfg: &mut NetworkConfig) {
        if let Some(v) = self.maps {
            cfg.maps = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.iters {
            cfg.iterations = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.restarts {
            cfg.restarts = v;
        }
        if let Some(v) = self.decoder_decay {
            cfg.decoder_decay = v;
        }
    }
}

#[derive(Debug, Args)]
struct SharpenArgs {
    /// Low-resolution MSI raster.
    #[arg(long)]
    msi: PathBuf,
    /// High-resolution PAN raster.
    #[arg(long)]
    pan: PathBuf,
    /// Output raster for the fused image.
    #[arg(long)]
    out: PathBuf,
    /// Resolution ratio [default: PAN width / MSI width]
    #[arg(long)]
    factor: Option<usize>,
    /// Gain estimation: one global gain per map or one per MSIM region.
    #[arg(long, default_value = "msim")]
    injection: InjectionMode,
    /// Inject detail into the attention maps or into the reconstructed bands.
    #[arg(long, default_value = "maps")]
    inject_domain: InjectDomain,
    /// Interpolation used to bring maps to the PAN grid.
    #[arg(long, default_value = "bicubic")]
    upsample: UpsampleKernel,
    /// Divide both inputs by this peak first; the output stays normalized.
    #[arg(long)]
    peak: Option<f64>,
    /// Training seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Include per-stage wall-clock timings in the report (not reproducible).
    #[arg(long)]
    timings: bool,
    /// Also write the trained model to this path.
    #[arg(long)]
    save_model: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Debug, Args)]
struct DegradeArgs {
    /// Original MSI raster.
    #[arg(long)]
    msi: PathBuf,
    /// Original PAN raster.
    #[arg(long)]
    pan: PathBuf,
    /// Output raster for the reduced MSI.
    #[arg(long)]
    out_msi: PathBuf,
    /// Output raster for the reduced PAN.
    #[arg(long)]
    out_pan: PathBuf,
    /// DegradeConfig as JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reduction factor r [default: 4]
    #[arg(long)]
    factor: Option<usize>,
    /// MTF gain at Nyquist, once for all bands or once per band [default: 0.29]
    #[arg(long = "mtf-gain")]
    mtf_gains: Vec<f64>,
    /// Filter tap count, odd [default: 41]
    #[arg(long)]
    taps: Option<usize>,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Reference raster (ground-truth labels with --labels).
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Raster under test (predicted labels with --labels).
    #[arg(long)]
    test: PathBuf,
    /// Treat both rasters as label maps and report best-permutation agreement.
    #[arg(long)]
    labels: bool,
    /// Resolution ratio used by ERGAS.
    #[arg(long, default_value_t = 4)]
    factor: usize,
    /// Q2^n block size.
    #[arg(long, default_value_t = DEFAULT_BLOCK)]
    block: usize,
    /// Divide both rasters by this peak first.
    #[arg(long)]
    peak: Option<f64>,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateFrArgs {
    /// Fused raster on the PAN grid.
    #[arg(long)]
    fused: PathBuf,
    /// Low-resolution MSI the fused image came from.
    #[arg(long)]
    msi: PathBuf,
    /// High-resolution PAN.
    #[arg(long)]
    pan: PathBuf,
    /// UIQI block at the PAN scale; must be a multiple of the factor.
    #[arg(long, default_value_t = DEFAULT_BLOCK)]
    block: usize,
    /// Divide all inputs by this peak first.
    #[arg(long)]
    peak: Option<f64>,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ToyArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed for noise, k-means and training.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Debug, Args)]
struct AttentionArgs {
    /// MSI raster to encode.
    #[arg(long)]
    msi: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Use this saved model instead of training.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Divide the MSI by this peak first.
    #[arg(long)]
    peak: Option<f64>,
    /// Training seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return EXIT_USAGE;
    }
    match dispatch(&cli) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{value}`"))?;
    // A pool may already exist when `run` is called more than once in a process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cli: &Cli) -> anyhow::Result<Value> {
    let (name, body, report_path) = match &cli.command {
        Command::Sharpen(a) => ("sharpen", sharpen(a, cli.verbose)?, &a.report),
        Command::Degrade(a) => ("degrade", degrade(a)?, &a.report),
        Command::Evaluate(a) => ("evaluate", evaluate_cmd(a)?, &a.report),
        Command::EvaluateFr(a) => ("evaluate-fr", evaluate_fr(a)?, &a.report),
        Command::Toy(a) => ("toy", toy(a, cli.verbose)?, &a.report),
        Command::Attention(a) => ("attention", attention(a, cli.verbose)?, &a.report),
    };
    let mut report = json!({ "schema": REPORT_SCHEMA, "command": name });
    if let (Value::Object(head), Value::Object(rest)) = (&mut report, body) {
        head.extend(rest);
    }
    if let Some(path) = report_path {
        let text = serde_json::to_string_pretty(&report)?;
        fs::write(path, text).with_context(|| format!("writing report {}", path.display()))?;
    }
    Ok(report)
}

fn read(path: &Path, peak: Option<f64>) -> anyhow::Result<RasterImage> {
    let img = load_raster(path).with_context(|| format!("reading {}", path.display()))?;
    match peak {
        Some(p) => Ok(normalize(&img, Normalization::FixedPeak(p))?),
        None => Ok(img),
    }
}

fn write(img: &RasterImage, path: &Path) -> anyhow::Result<()> {
    save_raster(img, path).with_context(|| format!("writing {}", path.display()))
}

fn shape(img: &RasterImage) -> Value {
    json!([img.width(), img.height(), img.bands()])
}

fn labels_raster(width: usize, height: usize, labels: &[usize]) -> RasterImage {
    let plane = labels.iter().map(|&l| l as f64).collect();
    RasterImage::from_bands(width, height, vec![plane]).expect("label plane matches grid")
}

fn raster_labels(img: &RasterImage) -> anyhow::Result<Vec<usize>> {
    if img.bands() != 1 {
        bail!("label raster must have one band, got {}", img.bands());
    }
    img.band(0)
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                bail!("label value {v} is not a nonnegative integer")
            }
        })
        .collect()
}

/// RGB band choice for a preview: first, middle and last band.
fn preview_bands(img: &RasterImage) -> [usize; 3] {
    let b = img.bands();
    [b - 1, b / 2, 0]
}

fn write_with_preview(img: &RasterImage, dir: &Path, name: &str) -> anyhow::Result<()> {
    write(img, &dir.join(name))?;
    let png = dir.join(format!("{name}.png"));
    export_preview(img, preview_bands(img), &png).with_context(|| format!("writing {}", png.display()))
}

fn final_loss(model: &TrainedModel) -> Value {
    serde_json::to_value(model.history.last()).expect("loss record serializes")
}

fn msim_summary(msim: &Msim) -> Value {
    let hist = msim.histogram();
    let least = hist
        .iter()
        .enumerate()
        .min_by_key(|&(j, &n)| (n, j))
        .map(|(j, _)| j);
    json!({ "histogram": hist, "distinct": msim.distinct(), "least_selected": least })
}

fn sharpen(a: &SharpenArgs, verbose: bool) -> anyhow::Result<Value> {
    let msi = read(&a.msi, a.peak)?;
    let pan = read(&a.pan, a.peak)?;
    let pair = match a.factor {
        Some(r) => MsiPanPair::new(msi, pan, r)?,
        None => MsiPanPair::infer(msi, pan)?,
    };
    let mut cfg = FusionConfig::new(pair.msi().bands());
    cfg.injection = a.injection;
    cfg.domain = a.inject_domain;
    cfg.upsample = a.upsample;
    cfg.seed = a.seed;
    a.net.apply(&mut cfg.network);
    if verbose {
        eprintln!(
            "sharpen: {}x{}x{} MSI, factor {}, {} maps, {} iterations x {} restarts",
            pair.msi().width(),
            pair.msi().height(),
            pair.msi().bands(),
            pair.factor(),
            cfg.network.maps,
            cfg.network.iterations,
            cfg.network.restarts
        );
    }
    let mut out = pansharpen(&pair, &cfg)?;
    write(&out.fused, &a.out)?;
    if let Some(path) = &a.save_model {
        save_model(&out.model, path).with_context(|| format!("writing model {}", path.display()))?;
    }
    if !a.timings {
        out.report.timings.clear();
    }
    if verbose {
        for t in &out.report.timings {
            eprintln!("step {} ({}): {:.3} s", t.step, t.name, t.seconds);
        }
    }
    Ok(json!({
        "factor": pair.factor(),
        "fused_shape": shape(&out.fused),
        "restart": out.model.restart,
        "final_loss": final_loss(&out.model),
        "fusion": out.report,
    }))
}

fn degrade(a: &DegradeArgs) -> anyhow::Result<Value> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => DegradeConfig::default(),
    };
    if let Some(r) = a.factor {
        cfg.factor = r;
    }
    if !a.mtf_gains.is_empty() {
        cfg.mtf_gains = a.mtf_gains.clone();
    }
    if let Some(t) = a.taps {
        cfg.taps = t;
    }
    cfg.validate()?;
    let msi = read(&a.msi, None)?;
    let pan = read(&a.pan, None)?;
    let pair = MsiPanPair::new(msi, pan, cfg.factor)?;
    let reduced = wald_reduce(&pair, &cfg)?;
    write(reduced.pair.msi(), &a.out_msi)?;
    write(reduced.pair.pan(), &a.out_pan)?;
    let sigmas: Vec<f64> = cfg.mtf_gains.iter().map(|&g| mtf_sigma(cfg.factor, g)).collect();
    Ok(json!({
        "config": cfg,
        "mtf_sigma": sigmas,
        "msi_shape": shape(reduced.pair.msi()),
        "pan_shape": shape(reduced.pair.pan()),
    }))
}

fn evaluate_cmd(a: &EvaluateArgs) -> anyhow::Result<Value> {
    let reference = read(&a.reference, a.peak)?;
    let test = read(&a.test, a.peak)?;
    if a.labels {
        if !reference.same_grid(&test) {
            bail!("label maps are on different grids");
        }
        let agreement = label_agreement(&raster_labels(&test)?, &raster_labels(&reference)?)?;
        return Ok(json!({ "mode": "labels", "agreement": agreement }));
    }
    let metrics = evaluate(&reference, &test, a.factor as f64, a.block)?;
    Ok(json!({ "mode": "full-reference", "metrics": metrics }))
}

fn evaluate_fr(a: &EvaluateFrArgs) -> anyhow::Result<Value> {
    let fused = read(&a.fused, a.peak)?;
    let msi = read(&a.msi, a.peak)?;
    let pan = read(&a.pan, a.peak)?;
    let pair = MsiPanPair::infer(msi, pan)?;
    let cfg = DegradeConfig {
        factor: pair.factor(),
        ..DegradeConfig::default()
    };
    let pan_lr = downsample_pan(pair.pan(), &cfg)?;
    let nr = qnr(&fused, pair.msi(), pair.pan(), &pan_lr, a.block)?;
    Ok(json!({ "factor": pair.factor(), "metrics": nr }))
}

fn toy(a: &ToyArgs, verbose: bool) -> anyhow::Result<Value> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let fixture = gen_toy(a.seed);
    let (w, h) = (fixture.msi.width(), fixture.msi.height());
    let kmeans = kmeans_labels(&fixture.msi, fixture.signatures.len(), a.seed)?;
    let mut cfg = toy_network_config(a.seed);
    a.net.apply(&mut cfg);
    if verbose {
        eprintln!("toy: training {} maps, {} iterations x {} restarts", cfg.maps, cfg.iterations, cfg.restarts);
    }
    let model = train(&fixture.msi, &cfg)?;
    let attention = encode_image(&model.params, &fixture.msi)?;
    let msim = compute_msim(attention.as_raster());

    write_with_preview(&fixture.msi, &a.out, "msi")?;
    write_with_preview(&fixture.abundances, &a.out, "abundances")?;
    write_with_preview(&labels_raster(w, h, &fixture.labels), &a.out, "labels")?;
    write_with_preview(&labels_raster(w, h, &kmeans), &a.out, "kmeans")?;
    write_with_preview(attention.as_raster(), &a.out, "attention")?;
    write_with_preview(&msim.as_raster(), &a.out, "msim")?;

    Ok(json!({
        "seed": a.seed,
        "network": cfg,
        "restart": model.restart,
        "final_loss": final_loss(&model),
        "msim": msim_summary(&msim),
        "agreement": {
            "msim": label_agreement(&msim.index, &fixture.labels)?,
            "kmeans": label_agreement(&kmeans, &fixture.labels)?,
        },
    }))
}

fn attention(a: &AttentionArgs, verbose: bool) -> anyhow::Result<Value> {
    let msi = read(&a.msi, a.peak)?;
    let model = match &a.model {
        Some(path) => load_model(path).with_context(|| format!("reading model {}", path.display()))?,
        None => {
            let mut cfg = NetworkConfig::new(msi.bands());
            cfg.seed = a.seed;
            a.net.apply(&mut cfg);
            if verbose {
                eprintln!("attention: training {} maps, {} iterations", cfg.maps, cfg.iterations);
            }
            train(&msi, &cfg)?
        }
    };
    let attention = encode_image(&model.params, &msi)?;
    let msim = compute_msim(attention.as_raster());
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_with_preview(attention.as_raster(), &a.out, "attention")?;
    write_with_preview(&msim.as_raster(), &a.out, "msim")?;
    Ok(json!({
        "network": model.config(),
        "restart": model.restart,
        "final_loss": final_loss(&model),
        "attention_shape": shape(attention.as_raster()),
        "msim": msim_summary(&msim),
    }))
}
