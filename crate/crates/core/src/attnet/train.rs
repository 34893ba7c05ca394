use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

use super::layers::LayerShape;
use super::network::{LossParts, NetworkConfig, NetworkParams};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub recon: f64,
    pub entropy: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: NetworkParams,
    pub history: Vec<LossRecord>,
    /// Index of the restart that was kept.
    pub restart: usize,
}

impl TrainedModel {
    pub fn config(&self) -> &NetworkConfig {
        self.params.config()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Per-image unsupervised training with Adam over shuffled pixel minibatches.
///
/// Runs `cfg.restarts` independent trainings and keeps the one with the lowest
/// final mean loss. Restart `k` draws everything random (initialization and
/// shuffling) from one ChaCha stream seeded with [`restart_seed`], and batch
/// gradients are reduced in a fixed order, so a given input and config always
/// produce the same parameters.
pub fn train(msi: &RasterImage, cfg: &NetworkConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if msi.bands() != cfg.bands {
        return Err(Error::ShapeMismatch(format!(
            "image has {} bands, network configured for {}",
            msi.bands(),
            cfg.bands
        )));
    }
    let pixels = msi.spectra();
    let mut best: Option<(f64, TrainedModel)> = None;
    for k in 0..cfg.restarts {
        let (model, final_total) = train_once(&pixels, cfg, restart_seed(cfg.seed, k))?;
        let model = TrainedModel { restart: k, ..model };
        if best.as_ref().is_none_or(|(t, _)| final_total < *t) {
            best = Some((final_total, model));
        }
    }
    Ok(best.expect("validate() guarantees at least one restart").1)
}

/// Seed of restart `k`; restart 0 uses `seed` itself.
pub fn restart_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn train_once(pixels: &[Vec<f64>], cfg: &NetworkConfig, seed: u64) -> Result<(TrainedModel, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::init(cfg, &mut rng)?;
    let n = pixels.len();
    let batch = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut adam = Adam::new(params.values().len(), cfg.learning_rate);
    let mut history = Vec::new();
    for it in 0..cfg.iterations {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let refs: Vec<&[f64]> = idx.iter().map(|&i| pixels[i].as_slice()).collect();

        let lambda = if it < cfg.lambda_warmup {
            cfg.lambda * it as f64 / cfg.lambda_warmup as f64
        } else {
            cfg.lambda
        };
        let (loss, mut grad) = match params.gradients(&refs, lambda, cfg.entropy_eps) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    iteration: it,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: loss.total,
            });
        }
        if it % cfg.log_every == 0 {
            history.push(record(it, loss));
        }
        if cfg.decoder_decay > 0.0 {
            let range = params.layout().decoder_params();
            for i in range {
                grad[i] += cfg.decoder_decay * params.values()[i];
            }
        }
        adam.lr = scheduled_lr(cfg, it);
        adam.step(params.values_mut(), &grad);
    }

    let refs: Vec<&[f64]> = pixels.iter().map(Vec::as_slice).collect();
    let final_loss = params.mean_loss(&refs, cfg.lambda, cfg.entropy_eps)?;
    if !final_loss.total.is_finite() {
        return Err(Error::Diverged {
            iteration: cfg.iterations,
            loss: final_loss.total,
        });
    }
    history.push(record(cfg.iterations, final_loss));
    Ok((
        TrainedModel {
            params,
            history,
            restart: 0,
        },
        final_loss.total,
    ))
}

fn scheduled_lr(cfg: &NetworkConfig, it: usize) -> f64 {
    if cfg.final_lr_fraction == 1.0 || cfg.iterations < 2 {
        return cfg.learning_rate;
    }
    let progress = it as f64 / (cfg.iterations - 1) as f64;
    let f = cfg.final_lr_fraction
        + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.learning_rate * f
}

fn record(iteration: usize, loss: LossParts) -> LossRecord {
    LossRecord {
        iteration,
        recon: loss.recon,
        entropy: loss.sparsity,
        total: loss.total,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    schema: u32,
    config: NetworkConfig,
    seed: u64,
    layers: Vec<LayerShape>,
    parameter_count: usize,
    parameter_file: String,
    restart: usize,
    history: Vec<LossRecord>,
}

fn model_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut manifest = base.clone().into_os_string();
    manifest.push(".json");
    let mut blob = base.into_os_string();
    blob.push(".params.f32");
    (manifest.into(), blob.into())
}

/// Writes `<path>.json` (config, seed, layer layout, loss history) and
/// `<path>.params.f32` (parameters as little-endian f32 in layout order).
pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    let (manifest_path, blob_path) = model_paths(path);
    let manifest = ModelManifest {
        schema: 1,
        config: model.config().clone(),
        seed: model.config().seed,
        layers: model.params.layout().layers().to_vec(),
        parameter_count: model.params.values().len(),
        parameter_file: blob_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        restart: model.restart,
        history: model.history.clone(),
    };
    let blob: Vec<u8> = model
        .params
        .values()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&manifest_path, e))?;
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    Ok(())
}

/// Reads a model written by [`save_model`]. Parameters come back rounded to f32.
pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let (manifest_path, blob_path) = model_paths(path);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text)?;
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if bytes.len() != manifest.parameter_count * 4 {
        return Err(Error::SizeMismatch {
            path: blob_path,
            expected: manifest.parameter_count * 4,
            actual: bytes.len(),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let params = NetworkParams::from_values(&manifest.config, values)?;
    if params.layout().layers() != manifest.layers.as_slice() {
        return Err(Error::MalformedHeader {
            path: manifest_path,
            field: "layers".into(),
            reason: "layout does not match config".into(),
        });
    }
    Ok(TrainedModel {
        params,
        history: manifest.history,
        restart: manifest.restart,
    })
}
