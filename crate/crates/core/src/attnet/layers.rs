use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::Softplus => softplus(z),
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(z),
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Shape of one fully-connected layer. Weights are stored row-major as
/// `outputs x inputs`, followed by `outputs` biases when `bias` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub bias: bool,
    pub activation: Activation,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + if self.bias { self.outputs } else { 0 }
    }
}

/// Borrowed view of a layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct Dense<'a> {
    pub weights: &'a [f64],
    pub bias: Option<&'a [f64]>,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl<'a> Dense<'a> {
    pub(crate) fn from_slice(shape: &LayerShape, params: &'a [f64]) -> Self {
        let nw = shape.inputs * shape.outputs;
        Dense {
            weights: &params[..nw],
            bias: shape.bias.then(|| &params[nw..nw + shape.outputs]),
            inputs: shape.inputs,
            outputs: shape.outputs,
            activation: shape.activation,
        }
    }

    /// Pre-activations `W x + b`.
    pub(crate) fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
                dot + self.bias.map_or(0.0, |b| b[o])
            })
            .collect()
    }

    /// Adds `W^T g` to `out`.
    pub(crate) fn accumulate_input_grad(&self, g: &[f64], out: &mut [f64]) {
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            for (acc, w) in out.iter_mut().zip(row) {
                *acc += w * go;
            }
        }
    }
}

/// Adds the parameter gradient of a layer given the pre-activation gradient
/// `g` and the layer input `x`. `grad` covers exactly this layer's parameters.
pub(crate) fn accumulate_param_grad(shape: &LayerShape, g: &[f64], x: &[f64], grad: &mut [f64]) {
    let nw = shape.inputs * shape.outputs;
    for (o, &go) in g.iter().enumerate() {
        if go == 0.0 {
            continue;
        }
        let row = &mut grad[o * shape.inputs..(o + 1) * shape.inputs];
        for (acc, v) in row.iter_mut().zip(x) {
            *acc += go * v;
        }
    }
    if shape.bias {
        for (acc, go) in grad[nw..nw + shape.outputs].iter_mut().zip(g) {
            *acc += go;
        }
    }
}

/// One fully-connected layer: `activation(W x + b)`.
///
/// `weights` is row-major `outputs x inputs`, so row `o` holds the incoming
/// weights of output `o`.
pub fn dense_forward(
    weights: &[f64],
    biases: Option<&[f64]>,
    x: &[f64],
    activation: Activation,
) -> Result<Vec<f64>> {
    let inputs = x.len();
    if inputs == 0 || weights.len() % inputs != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} weights cannot map {inputs} inputs",
            weights.len()
        )));
    }
    let outputs = weights.len() / inputs;
    if let Some(b) = biases {
        if b.len() != outputs {
            return Err(Error::ShapeMismatch(format!(
                "{} biases for {outputs} outputs",
                b.len()
            )));
        }
    }
    let layer = Dense {
        weights,
        bias: biases,
        inputs,
        outputs,
        activation,
    };
    Ok(layer
        .affine(x)
        .into_iter()
        .map(|z| activation.apply(z))
        .collect())
}
