//! Stacked self-attention autoencoder: forward pass, loss and backprop.
//!
//! Encoder, per pixel spectrum `x`:
//!
//! ```text
//! x -> dense block 1 -> [u1 logits (sigmoid), beta1 (softplus)] -> stick -> s1
//! s1 -> dense block 2 -> [u2 logits (sigmoid), beta2 (softplus)] -> stick -> s
//! ```
//!
//! A dense block feeds each layer the concatenation of the block input and
//! every earlier layer output; the block output is that full concatenation.
//! The decoder is a chain of bias-free linear layers ending at `bands`
//! outputs, so its product plays the role of the endmember matrix.

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::layers::{accumulate_param_grad, softplus, Activation, Dense, LayerShape};
use super::stick::{entropy, entropy_grad, stick_backward, stick_from_logits, StickCache, ENTROPY_EPS};

/// Guard added under the square root of the reconstruction norm.
pub const RECON_GUARD: f64 = 1e-12;

/// Pixels per gradient work unit. Fixed so the reduction order does not depend
/// on the number of worker threads.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub bands: usize,
    pub dense1: Vec<usize>,
    pub pieces1: usize,
    pub dense2: Vec<usize>,
    /// Number of attention maps `c`.
    pub maps: usize,
    /// Hidden widths of the decoder; a final layer of `bands` outputs is implied.
    pub decoder_hidden: Vec<usize>,
    pub lambda: f64,
    pub entropy_eps: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Loss history sampling interval in iterations.
    pub log_every: usize,
    /// Iterations over which the sparsity weight ramps linearly from 0 to
    /// `lambda`.
    #[serde(default)]
    pub lambda_warmup: usize,
    /// L2 penalty on decoder weights, applied in the optimizer step.
    #[serde(default)]
    pub decoder_decay: f64,
    /// Learning rate at the last iteration as a fraction of `learning_rate`;
    /// the rate follows a half-cosine between the two. 1 keeps it constant.
    #[serde(default = "one_f64")]
    pub final_lr_fraction: f64,
    /// Independent trainings from different seeds; the lowest final loss wins.
    #[serde(default = "one")]
    pub restarts: usize,
}

fn one() -> usize {
    1
}

fn one_f64() -> f64 {
    1.0
}

impl NetworkConfig {
    pub fn new(bands: usize) -> Self {
        Self {
            bands,
            dense1: vec![3, 3, 3],
            pieces1: 20,
            dense2: vec![3, 3, 3],
            maps: 10,
            decoder_hidden: vec![10],
            lambda: 0.001,
            entropy_eps: ENTROPY_EPS,
            iterations: 5000,
            batch_size: 256,
            learning_rate: 2e-2,
            seed: 0,
            log_every: 10,
            lambda_warmup: 0,
            decoder_decay: 0.0,
            final_lr_fraction: 0.01,
            restarts: 3,
        }
    }

    pub fn with_maps(mut self, maps: usize) -> Self {
        self.maps = maps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 {
            return Err(Error::param("bands", "must be positive"));
        }
        if self.maps == 0 || self.pieces1 == 0 {
            return Err(Error::param("maps", "stick pieces must be positive"));
        }
        if self.maps > self.pieces1 {
            return Err(Error::param(
                "maps",
                format!(
                    "second stage ({}) must not exceed first stage ({})",
                    self.maps, self.pieces1
                ),
            ));
        }
        if self.dense1.iter().chain(&self.dense2).chain(&self.decoder_hidden).any(|&w| w == 0) {
            return Err(Error::param("widths", "layer widths must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(self.entropy_eps > 0.0) {
            return Err(Error::param("entropy_eps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::param("final_lr_fraction", "must be in (0, 1]"));
        }
        if self.restarts == 0 {
            return Err(Error::param("restarts", "must be positive"));
        }
        if !(self.decoder_decay >= 0.0 && self.decoder_decay.is_finite()) {
            return Err(Error::param("decoder_decay", "must be >= 0"));
        }
        if self.log_every == 0 {
            return Err(Error::param("log_every", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    total: usize,
    dense1: Range<usize>,
    u1: usize,
    beta1: usize,
    dense2: Range<usize>,
    u2: usize,
    beta2: usize,
    decoder: Range<usize>,
}

fn push_block(layers: &mut Vec<LayerShape>, prefix: &str, input: usize, widths: &[usize]) -> usize {
    let mut width = input;
    for (i, &w) in widths.iter().enumerate() {
        layers.push(LayerShape {
            name: format!("{prefix}.{i}"),
            inputs: width,
            outputs: w,
            bias: true,
            activation: Activation::LeakyRelu,
        });
        width += w;
    }
    width
}

fn head(name: &str, inputs: usize, outputs: usize, activation: Activation) -> LayerShape {
    LayerShape {
        name: name.to_string(),
        inputs,
        outputs,
        bias: true,
        activation,
    }
}

impl ParamLayout {
    pub fn new(cfg: &NetworkConfig) -> Self {
        let mut layers = Vec::new();
        let f1 = push_block(&mut layers, "dense1", cfg.bands, &cfg.dense1);
        let dense1 = 0..layers.len();
        let u1 = layers.len();
        layers.push(head("u1", f1, cfg.pieces1, Activation::Sigmoid));
        let beta1 = layers.len();
        layers.push(head("beta1", f1, 1, Activation::Softplus));

        let start = layers.len();
        let f2 = push_block(&mut layers, "dense2", cfg.pieces1, &cfg.dense2);
        let dense2 = start..layers.len();
        let u2 = layers.len();
        layers.push(head("u2", f2, cfg.maps, Activation::Sigmoid));
        let beta2 = layers.len();
        layers.push(head("beta2", f2, 1, Activation::Softplus));

        let start = layers.len();
        let mut width = cfg.maps;
        let widths = cfg.decoder_hidden.iter().copied().chain(std::iter::once(cfg.bands));
        for (i, w) in widths.enumerate() {
            layers.push(LayerShape {
                name: format!("decoder.{i}"),
                inputs: width,
                outputs: w,
                bias: false,
                activation: Activation::Identity,
            });
            width = w;
        }
        let decoder = start..layers.len();

        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_count();
        }
        Self {
            layers,
            offsets,
            total,
            dense1,
            u1,
            beta1,
            dense2,
            u2,
            beta2,
            decoder,
        }
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Parameter index range spanned by the decoder layers.
    pub fn decoder_params(&self) -> Range<usize> {
        self.range(self.decoder.start).start..self.range(self.decoder.end - 1).end
    }

    pub fn range(&self, layer: usize) -> Range<usize> {
        self.offsets[layer]..self.offsets[layer] + self.layers[layer].param_count()
    }
}

/// All network weights in one flat vector, laid out layer by layer in the
/// order of [`ParamLayout::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    config: NetworkConfig,
    layout: ParamLayout,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub sparsity: f64,
}

struct BlockTrace {
    /// Block input followed by every layer output.
    feats: Vec<f64>,
    pre: Vec<Vec<f64>>,
}

struct StageTrace {
    block: BlockTrace,
    z: Vec<f64>,
    z_beta: f64,
    beta: f64,
    stick: StickCache,
}

struct ForwardTrace {
    stage1: StageTrace,
    stage2: StageTrace,
    /// Decoder layer inputs, then the final output.
    dec: Vec<Vec<f64>>,
}

fn check_finite(values: &[f64], layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer: layer.to_string(),
        })
    }
}

impl NetworkParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut values = vec![0.0; layout.total];
        for (i, shape) in layout.layers.iter().enumerate() {
            let limit = (6.0 / (shape.inputs + shape.outputs) as f64).sqrt();
            let start = layout.offsets[i];
            for v in &mut values[start..start + shape.inputs * shape.outputs] {
                *v = rng.random_range(-limit..limit);
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            values,
        })
    }

    pub fn from_values(config: &NetworkConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        if values.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters supplied, layout needs {}",
                values.len(),
                layout.total
            )));
        }
        check_finite(&values, "parameters")?;
        Ok(Self {
            config: config.clone(),
            layout,
            values,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn bands(&self) -> usize {
        self.config.bands
    }

    pub fn maps(&self) -> usize {
        self.config.maps
    }

    fn dense(&self, layer: usize) -> Dense<'_> {
        Dense::from_slice(&self.layout.layers[layer], &self.values[self.layout.range(layer)])
    }

    /// Effective endmember matrix: row `j` is the decoded spectrum of the
    /// one-hot representation `e_j`.
    pub fn signatures(&self) -> Vec<Vec<f64>> {
        (0..self.maps())
            .map(|j| {
                let mut e = vec![0.0; self.maps()];
                e[j] = 1.0;
                self.decode_unchecked(&e)
            })
            .collect()
    }

    fn block_forward(&self, layers: Range<usize>, input: &[f64]) -> BlockTrace {
        let mut feats = input.to_vec();
        let mut pre = Vec::with_capacity(layers.len());
        for l in layers {
            let dense = self.dense(l);
            let z = dense.affine(&feats[..dense.inputs]);
            feats.extend(z.iter().map(|&v| dense.activation.apply(v)));
            pre.push(z);
        }
        BlockTrace { feats, pre }
    }

    fn stage_forward(
        &self,
        block: Range<usize>,
        u_head: usize,
        beta_head: usize,
        input: &[f64],
        name: &str,
    ) -> Result<StageTrace> {
        let block = self.block_forward(block, input);
        check_finite(&block.feats, &format!("{name} dense block"))?;
        let z = self.dense(u_head).affine(&block.feats);
        let z_beta = self.dense(beta_head).affine(&block.feats)[0];
        let beta = softplus(z_beta);
        if !(beta > 0.0) || !z.iter().all(|v| v.is_finite()) || !beta.is_finite() {
            return Err(Error::NonFinite {
                layer: format!("{name} attention heads"),
            });
        }
        let stick = stick_from_logits(&z, beta);
        check_finite(&stick.s, &format!("{name} stick-breaking"))?;
        Ok(StageTrace {
            block,
            z,
            z_beta,
            beta,
            stick,
        })
    }

    fn forward(&self, pixel: &[f64]) -> Result<ForwardTrace> {
        let l = &self.layout;
        let stage1 = self.stage_forward(l.dense1.clone(), l.u1, l.beta1, pixel, "stage 1")?;
        let stage2 = self.stage_forward(l.dense2.clone(), l.u2, l.beta2, &stage1.stick.s, "stage 2")?;
        let mut dec = vec![stage2.stick.s.clone()];
        for layer in l.decoder.clone() {
            let next = self.dense(layer).affine(dec.last().unwrap());
            dec.push(next);
        }
        check_finite(dec.last().unwrap(), "decoder")?;
        Ok(ForwardTrace { stage1, stage2, dec })
    }

    fn check_pixel(&self, pixel: &[f64]) -> Result<()> {
        if pixel.len() != self.bands() {
            return Err(Error::ShapeMismatch(format!(
                "pixel has {} bands, network expects {}",
                pixel.len(),
                self.bands()
            )));
        }
        check_finite(pixel, "input")
    }

    /// Attention vector of one spectrum.
    pub fn encode(&self, pixel: &[f64]) -> Result<Vec<f64>> {
        self.check_pixel(pixel)?;
        let l = &self.layout;
        let s1 = self.stage_forward(l.dense1.clone(), l.u1, l.beta1, pixel, "stage 1")?;
        let s2 = self.stage_forward(l.dense2.clone(), l.u2, l.beta2, &s1.stick.s, "stage 2")?;
        Ok(s2.stick.s)
    }

    fn decode_unchecked(&self, s: &[f64]) -> Vec<f64> {
        self.layout
            .decoder
            .clone()
            .fold(s.to_vec(), |h, layer| self.dense(layer).affine(&h))
    }

    /// Spectrum reconstructed from a representation vector (any real vector of
    /// length `maps`, not only simplex points).
    pub fn decode(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.maps() {
            return Err(Error::ShapeMismatch(format!(
                "representation has {} entries, decoder expects {}",
                s.len(),
                self.maps()
            )));
        }
        check_finite(s, "representation")?;
        Ok(self.decode_unchecked(s))
    }

    pub fn loss(&self, pixel: &[f64], lambda: f64, eps: f64) -> Result<LossParts> {
        self.check_pixel(pixel)?;
        let trace = self.forward(pixel)?;
        Ok(loss_from_trace(&trace, pixel, lambda, eps))
    }

    /// Pre-activations of every leaky-ReLU unit. Finite-difference checks use
    /// this to stay clear of the kink at zero.
    pub fn hidden_preactivations(&self, pixel: &[f64]) -> Result<Vec<f64>> {
        self.check_pixel(pixel)?;
        let trace = self.forward(pixel)?;
        Ok(trace
            .stage1
            .block
            .pre
            .iter()
            .chain(&trace.stage2.block.pre)
            .flatten()
            .copied()
            .collect())
    }

    fn block_backward(&self, layers: Range<usize>, trace: &BlockTrace, grad_feats: &mut [f64], grad: &mut [f64]) {
        let layers: Vec<usize> = layers.collect();
        // each layer's output segment starts after the inputs it consumed
        for (k, &l) in layers.iter().enumerate().rev() {
            let dense = self.dense(l);
            let seg = dense.inputs..dense.inputs + dense.outputs;
            let grad_pre: Vec<f64> = grad_feats[seg]
                .iter()
                .zip(&trace.pre[k])
                .map(|(g, &z)| g * dense.activation.derivative(z))
                .collect();
            let r = self.layout.range(l);
            accumulate_param_grad(
                &self.layout.layers[l],
                &grad_pre,
                &trace.feats[..dense.inputs],
                &mut grad[r],
            );
            dense.accumulate_input_grad(&grad_pre, &mut grad_feats[..dense.inputs]);
        }
    }

    /// Backprop through one attention stage; returns the gradient w.r.t. the
    /// stage input.
    fn stage_backward(
        &self,
        block: Range<usize>,
        u_head: usize,
        beta_head: usize,
        trace: &StageTrace,
        grad_s: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let (grad_z, grad_beta) = stick_backward(&trace.stick, &trace.z, trace.beta, grad_s);
        let grad_z_beta = [grad_beta * Activation::Softplus.derivative(trace.z_beta)];

        let feats = &trace.block.feats;
        let mut grad_feats = vec![0.0; feats.len()];
        for (head, g) in [(u_head, &grad_z[..]), (beta_head, &grad_z_beta[..])] {
            let r = self.layout.range(head);
            accumulate_param_grad(&self.layout.layers[head], g, feats, &mut grad[r]);
            self.dense(head).accumulate_input_grad(g, &mut grad_feats);
        }
        self.block_backward(block, &trace.block, &mut grad_feats, grad);
        let input_len = feats.len() - trace.block.pre.iter().map(Vec::len).sum::<usize>();
        grad_feats.truncate(input_len);
        grad_feats
    }

    /// Adds the gradient of one pixel's loss into `grad`.
    fn backward(&self, trace: &ForwardTrace, pixel: &[f64], lambda: f64, eps: f64, grad: &mut [f64]) {
        let l = &self.layout;
        let out = trace.dec.last().unwrap();
        let norm = (out.iter().zip(pixel).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + RECON_GUARD).sqrt();
        let mut g: Vec<f64> = out.iter().zip(pixel).map(|(a, b)| (a - b) / norm).collect();

        let dec_layers: Vec<usize> = l.decoder.clone().collect();
        for (k, &layer) in dec_layers.iter().enumerate().rev() {
            let input = &trace.dec[k];
            let r = l.range(layer);
            accumulate_param_grad(&l.layers[layer], &g, input, &mut grad[r]);
            let mut gin = vec![0.0; input.len()];
            self.dense(layer).accumulate_input_grad(&g, &mut gin);
            g = gin;
        }

        if lambda != 0.0 {
            let ge = entropy_grad(&trace.stage2.stick.s, eps);
            for (a, b) in g.iter_mut().zip(ge) {
                *a += lambda * b;
            }
        }
        let grad_s1 = self.stage_backward(l.dense2.clone(), l.u2, l.beta2, &trace.stage2, &g, grad);
        self.stage_backward(l.dense1.clone(), l.u1, l.beta1, &trace.stage1, &grad_s1, grad);
    }

    /// Mean loss and its exact gradient over a batch of pixels.
    pub fn gradients(&self, batch: &[&[f64]], lambda: f64, eps: f64) -> Result<(LossParts, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::param("batch", "must not be empty"));
        }
        let partials: Vec<Result<(LossParts, Vec<f64>)>> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut grad = vec![0.0; self.layout.total];
                let mut loss = LossParts::default();
                for &pixel in chunk {
                    self.check_pixel(pixel)?;
                    let trace = self.forward(pixel)?;
                    let parts = loss_from_trace(&trace, pixel, lambda, eps);
                    loss.total += parts.total;
                    loss.recon += parts.recon;
                    loss.sparsity += parts.sparsity;
                    self.backward(&trace, pixel, lambda, eps, &mut grad);
                }
                Ok((loss, grad))
            })
            .collect();

        let n = batch.len() as f64;
        let mut grad = vec![0.0; self.layout.total];
        let mut loss = LossParts::default();
        for partial in partials {
            let (l, g) = partial?;
            loss.total += l.total;
            loss.recon += l.recon;
            loss.sparsity += l.sparsity;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        for v in &mut grad {
            *v /= n;
        }
        loss.total /= n;
        loss.recon /= n;
        loss.sparsity /= n;
        if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
            let layer = (0..self.layout.layers.len())
                .find(|&l| self.layout.range(l).contains(&i))
                .map(|l| self.layout.layers[l].name.clone())
                .unwrap_or_default();
            return Err(Error::NonFinite {
                layer: format!("gradient of {layer}"),
            });
        }
        Ok((loss, grad))
    }

    /// Mean loss over many pixels without gradients.
    pub fn mean_loss(&self, pixels: &[&[f64]], lambda: f64, eps: f64) -> Result<LossParts> {
        let parts: Vec<Result<LossParts>> = pixels
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut acc = LossParts::default();
                for &p in chunk {
                    let l = self.loss(p, lambda, eps)?;
                    acc.total += l.total;
                    acc.recon += l.recon;
                    acc.sparsity += l.sparsity;
                }
                Ok(acc)
            })
            .collect();
        let mut acc = LossParts::default();
        for p in parts {
            let p = p?;
            acc.total += p.total;
            acc.recon += p.recon;
            acc.sparsity += p.sparsity;
        }
        let n = pixels.len().max(1) as f64;
        Ok(LossParts {
            total: acc.total / n,
            recon: acc.recon / n,
            sparsity: acc.sparsity / n,
        })
    }
}

fn loss_from_trace(trace: &ForwardTrace, pixel: &[f64], lambda: f64, eps: f64) -> LossParts {
    let out = trace.dec.last().unwrap();
    let recon = (out.iter().zip(pixel).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + RECON_GUARD).sqrt();
    let sparsity = entropy(&trace.stage2.stick.s, eps);
    LossParts {
        total: recon + lambda * sparsity,
        recon,
        sparsity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64) -> NetworkParams {
        let cfg = NetworkConfig::new(4);
        NetworkParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn layout_shapes() {
        let net = small_net(0);
        let names: Vec<&str> = net.layout().layers().iter().map(|l| l.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "dense1.0", "dense1.1", "dense1.2", "u1", "beta1", "dense2.0", "dense2.1", "dense2.2", "u2",
                "beta2", "decoder.0", "decoder.1"
            ]
        );
        let layers = net.layout().layers();
        assert_eq!(layers[1].inputs, 4 + 3);
        assert_eq!(layers[3].inputs, 4 + 9);
        assert_eq!(layers[3].outputs, 20);
        assert_eq!(layers[5].inputs, 20);
        assert_eq!(layers[8].inputs, 29);
        assert_eq!(layers[8].outputs, 10);
        assert_eq!((layers[10].inputs, layers[10].outputs), (10, 10));
        assert_eq!((layers[11].inputs, layers[11].outputs), (10, 4));
        assert!(layers[10..].iter().all(|l| !l.bias));
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetworkConfig::new(4);
        cfg.maps = 21;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::new(4);
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn decoder_is_linear_without_bias() {
        let net = small_net(1);
        assert!(net.decode(&[0.0; 10]).unwrap().iter().all(|&v| v == 0.0));
        let s1: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let s2: Vec<f64> = (0..10).map(|i| (i as f64 * 1.3).cos()).collect();
        let (a, b) = (0.7, -2.5);
        let mix: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
        let lhs = net.decode(&mix).unwrap();
        let d1 = net.decode(&s1).unwrap();
        let d2 = net.decode(&s2).unwrap();
        for k in 0..4 {
            assert!((lhs[k] - (a * d1[k] + b * d2[k])).abs() < 1e-10);
        }
        assert!(net.decode(&[0.0; 9]).is_err());
    }

    #[test]
    fn encode_is_deterministic_and_on_simplex() {
        let net = small_net(2);
        let x = [0.2, 0.4, 0.6, 0.1];
        let a = net.encode(&x).unwrap();
        assert_eq!(a, net.encode(&x).unwrap());
        assert!(a.iter().all(|&v| v >= 0.0));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(net.encode(&[0.1; 3]).is_err());
        assert!(net.encode(&[f64::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn encode_is_continuous() {
        let net = small_net(3);
        let x = [0.25, 0.5, 0.75, 0.3];
        let y = [0.25 + 1e-8, 0.5 - 1e-8, 0.75 + 1e-8, 0.3];
        let a = net.encode(&x).unwrap();
        let b = net.encode(&y).unwrap();
        let dist = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(dist < 1e-4);
    }

    #[test]
    fn loss_composes_from_primitives() {
        let net = small_net(4);
        let x = [0.3, 0.1, 0.9, 0.5];
        let l = net.loss(&x, 0.05, ENTROPY_EPS).unwrap();
        let s = net.encode(&x).unwrap();
        let xh = net.decode(&s).unwrap();
        let recon = (xh.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + RECON_GUARD).sqrt();
        let h = entropy(&s, ENTROPY_EPS);
        assert!((l.recon - recon).abs() < 1e-14);
        assert!((l.sparsity - h).abs() < 1e-14);
        assert!((l.total - (recon + 0.05 * h)).abs() < 1e-14);
        let l0 = net.loss(&x, 0.0, ENTROPY_EPS).unwrap();
        assert_eq!(l0.total, l0.recon);
    }

    #[test]
    fn perfect_reconstruction_with_one_hot_code_has_near_zero_loss() {
        // Force stage 2 to emit e_1 by saturating its first break, then make
        // the decoder map e_1 to the pixel.
        let cfg = NetworkConfig::new(2).with_maps(3);
        let mut net = NetworkParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let l = net.layout().clone();
        let u2 = l.range(l.u2);
        let n_w = l.layers()[l.u2].inputs * l.layers()[l.u2].outputs;
        for v in &mut net.values_mut()[u2.start..u2.start + n_w] {
            *v = 0.0;
        }
        net.values_mut()[u2.start + n_w] = 60.0;
        let x = [0.4, 0.8];
        // decoder: 3 -> 10 -> 2 ; set so that e_1 maps to x
        let d0 = l.range(l.decoder.start);
        let d1 = l.range(l.decoder.start + 1);
        for v in &mut net.values_mut()[d0.clone()] {
            *v = 0.0;
        }
        net.values_mut()[d0.start] = 1.0; // hidden 0 <- input 0
        for v in &mut net.values_mut()[d1.clone()] {
            *v = 0.0;
        }
        net.values_mut()[d1.start] = x[0]; // out 0 <- hidden 0
        net.values_mut()[d1.start + 10] = x[1]; // out 1 <- hidden 0
        let loss = net.loss(&x, 0.001, 1e-12).unwrap();
        assert!(loss.total < 1e-5, "{loss:?}");
    }
}
