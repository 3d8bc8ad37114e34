//! The quantized LeNet-style MNIST network.
//!
//! Every parameterized layer `i` reads its width `k_i` from the bit vector,
//! quantizes its incoming activations and its weights with it, then applies
//! `pre * gain[c] / sqrt(fan_in) + bias[c]` with full-precision per-channel
//! gain and bias. Hidden layers end in `clip(., 0, 1)`,
//! which keeps the next layer's activation quantizer on its natural range.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::alloc::LayerPrecision;
use crate::error::{contract, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { stride: usize, pad: usize },
    Dense,
}

#[derive(Clone, Debug)]
pub struct QuantLayer {
    pub kind: LayerKind,
    /// `[cout, cin, kh, kw]` for conv, `[in, out]` for dense.
    pub weights: Tensor<f32>,
    pub gain: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub bit_index: usize,
    pub quantize_weights: bool,
    pub quantize_activations: bool,
    /// 2x2 max pool after the nonlinearity.
    pub pool: bool,
}

impl QuantLayer {
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv { .. } => self.weights.shape()[1..].iter().product(),
            LayerKind::Dense => self.weights.shape()[0],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.numel() + self.gain.numel() + self.bias.numel()
    }
}

/// Graph handles for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    /// `[weights, gain, bias]` per layer, in layer order.
    pub params: Vec<[Var; 3]>,
    /// Output of each layer (after clip and pool for hidden layers).
    pub outputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub layers: Vec<QuantLayer>,
}

pub const INIT_GAIN: f32 = 2.0;

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape").with_grad()
}

/// conv 16@5x5, pool, conv 32@5x5, pool, conv 32@3x3, conv 64@3x3, dense 10.
/// Expects `1 x 28 x 28` inputs.
pub fn build_mnist_model(rng: &mut ChaCha8Rng) -> Model {
    let specs: [(LayerKind, &[usize], bool); 5] = [
        (LayerKind::Conv { stride: 1, pad: 0 }, &[16, 1, 5, 5], true),
        (LayerKind::Conv { stride: 1, pad: 0 }, &[32, 16, 5, 5], true),
        (LayerKind::Conv { stride: 1, pad: 1 }, &[32, 32, 3, 3], false),
        (LayerKind::Conv { stride: 1, pad: 1 }, &[64, 32, 3, 3], false),
        (LayerKind::Dense, &[64 * 4 * 4, 10], false),
    ];
    let layers = specs
        .iter()
        .enumerate()
        .map(|(i, &(kind, shape, pool))| {
            let out = match kind {
                LayerKind::Conv { .. } => shape[0],
                LayerKind::Dense => shape[1],
            };
            QuantLayer {
                kind,
                weights: uniform_init(rng, shape, 1.0),
                gain: Tensor::full([out], INIT_GAIN).with_grad(),
                bias: Tensor::zeros([out]).with_grad(),
                bit_index: i,
                quantize_weights: true,
                quantize_activations: true,
                pool,
            }
        })
        .collect();
    Model { layers }
}

impl Model {
    /// Number of bit-width slots the model reads.
    pub fn quantized_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.quantize_weights || l.quantize_activations)
            .map(|l| l.bit_index + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(QuantLayer::param_count).sum()
    }

    /// Records the forward pass of `input` on `g`. `bits` must be a 1-d
    /// node with one width per quantized layer.
    pub fn forward(&self, g: &mut Graph<f32>, input: Var, bits: Var) -> Result<ForwardVars> {
        let want = self.quantized_layers();
        if g.value(bits).shape() != [want] {
            return Err(Error::Dimension {
                op: "forward",
                lhs: vec![want],
                rhs: g.value(bits).shape().to_vec(),
            });
        }
        let mut x = input;
        let mut params = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let w = g.param(&layer.weights);
            let s = g.param(&layer.gain);
            let b = g.param(&layer.bias);
            params.push([w, s, b]);
            let xin = if layer.quantize_activations {
                g.quantize_activations(x, bits, layer.bit_index)?
            } else {
                x
            };
            let wq = if layer.quantize_weights {
                g.quantize_weights(w, bits, layer.bit_index)?
            } else {
                w
            };
            let pre = match layer.kind {
                LayerKind::Conv { stride, pad } => g.conv2d(xin, wq, stride, pad)?,
                LayerKind::Dense => {
                    let flat = g.flatten(xin)?;
                    g.matmul(flat, wq)?
                }
            };
            let normed = g.scale(pre, 1.0 / (layer.fan_in() as f32).sqrt());
            let scaled = g.scale_channels(normed, s)?;
            let mut h = g.add_bias(scaled, b)?;
            if li != last {
                h = g.clip01(h);
            }
            if layer.pool {
                h = g.maxpool2(h)?;
            }
            outputs.push(h);
            x = h;
        }
        Ok(ForwardVars {
            logits: x,
            params,
            outputs,
        })
    }

    /// Inference-only forward with fixed widths.
    pub fn forward_quantized(&self, images: &Tensor<f32>, bits: &LayerPrecision) -> Result<Tensor<f32>> {
        if let Some(k) = bits.bits().iter().find(|&&k| !(k > 0.0)) {
            return Err(contract(format!("non-positive bit width {k}")));
        }
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let b = g.constant(Tensor::new(
            [bits.len()],
            bits.bits().iter().map(|&k| k as f32).collect(),
        )?);
        let out = self.forward(&mut g, x, b)?;
        Ok(g.value(out.logits).clone())
    }

    /// Parameters in the order [`ForwardVars::params`] lists them.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.gain, &mut l.bias])
            .collect()
    }
}
