//! The source ANN: layer chain, forward pass with full activation trace,
//! batch-norm folding and a small trainer for the desk-scale fixtures.

mod train;

pub(crate) use train::argmax_rows;

use std::fmt;
use std::str::FromStr;

pub use train::{accuracy, loss_and_gradients, predict, train_desk_scale, Arch, LayerGrad, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor};

/// Running statistics and affine transform of a batch-norm layer.
///
/// `std` is σ = sqrt(var + ε), stored directly.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub mean: Tensor,
    pub std: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            std: Tensor::full(&[channels], 1.0),
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [("std", &self.std), ("gamma", &self.gamma), ("beta", &self.beta)] {
            if t.shape() != [c] {
                return Err(Error::invalid(format!(
                    "batchnorm {name} has shape {:?}, expected [{c}]",
                    t.shape()
                )));
            }
        }
        if self.std.data().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("batchnorm sigma must be strictly positive"));
        }
        Ok(())
    }

    /// Applies `γ(x−μ)/σ + β` channel-wise to a batch.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.channels() != self.channels() {
            return Err(Error::shape("batchnorm", x.shape(), self.mean.shape()));
        }
        let stride = x.channel_stride();
        let c = self.channels();
        let mut out = x.clone();
        for sample in out.data_mut().chunks_mut(c * stride) {
            for (ch, plane) in sample.chunks_mut(stride).enumerate() {
                let scale = self.gamma.data()[ch] / self.std.data()[ch];
                let (mu, beta) = (self.mean.data()[ch], self.beta.data()[ch]);
                plane.iter_mut().for_each(|v| *v = (*v - mu) * scale + beta);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Weight `O×I`, bias `O`.
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    /// Weight `O×C×kh×kw`, bias `O`.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        geometry: ConvGeometry,
    },
    AvgPool2d {
        window: usize,
        stride: usize,
    },
    Relu,
    BatchNorm(BatchNorm),
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Linear,
    Conv2d,
    AvgPool2d,
    Relu,
    BatchNorm,
    Flatten,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Linear,
        LayerKind::Conv2d,
        LayerKind::AvgPool2d,
        LayerKind::Relu,
        LayerKind::BatchNorm,
        LayerKind::Flatten,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Linear => "linear",
            LayerKind::Conv2d => "conv2d",
            LayerKind::AvgPool2d => "avgpool2d",
            LayerKind::Relu => "relu",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Flatten => "flatten",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(kind) = Self::ALL.iter().find(|k| k.name() == s) {
            return Ok(*kind);
        }
        Err(match s {
            "maxpool2d" | "maxpool" => {
                Error::Unsupported("max pooling is not convertible to IF neurons; replace it with avgpool2d".into())
            }
            "add" | "concat" | "residual" => Error::Unsupported(format!(
                "layer kind '{s}' implies a branching topology; only single-chain networks are supported"
            )),
            other => Error::Unsupported(format!("unknown layer kind '{other}'")),
        })
    }
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Linear { .. } => LayerKind::Linear,
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::AvgPool2d { .. } => LayerKind::AvgPool2d,
            Layer::Relu => LayerKind::Relu,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, Layer::Linear { .. } | Layer::Conv2d { .. })
    }

    /// Weight and bias of an affine layer.
    pub fn affine(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }

    pub fn affine_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Linear { weight, bias } => {
                if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
                    return Err(Error::invalid(format!(
                        "linear weight {:?} / bias {:?} inconsistent",
                        weight.shape(),
                        bias.shape()
                    )));
                }
                if input != [weight.shape()[1]] {
                    return Err(Error::shape("linear", input, weight.shape()));
                }
                Ok(vec![weight.shape()[0]])
            }
            Layer::Conv2d { weight, bias, geometry } => {
                if weight.rank() != 4 || bias.shape() != [weight.shape()[0]] {
                    return Err(Error::invalid(format!(
                        "conv2d weight {:?} / bias {:?} inconsistent",
                        weight.shape(),
                        bias.shape()
                    )));
                }
                let dims = tensor::ConvDims::new(input, weight.shape(), *geometry)?;
                Ok(vec![dims.o, dims.ho, dims.wo])
            }
            Layer::AvgPool2d { window, stride } => {
                if input.len() != 3 {
                    return Err(Error::invalid(format!("avgpool2d expects C×H×W, got {input:?}")));
                }
                Ok(vec![
                    input[0],
                    tensor::pool_extent(input[1], *window, *stride)?,
                    tensor::pool_extent(input[2], *window, *stride)?,
                ])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::BatchNorm(bn) => {
                bn.validate()?;
                if input.first() != Some(&bn.channels()) {
                    return Err(Error::shape("batchnorm", input, bn.mean.shape()));
                }
                Ok(input.to_vec())
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Applies the layer to a batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Linear { weight, bias } => tensor::linear_forward(x, weight, Some(bias)),
            Layer::Conv2d { weight, bias, geometry } => tensor::conv2d_forward(x, weight, Some(bias), *geometry),
            Layer::AvgPool2d { window, stride } => tensor::avgpool2d(x, *window, *stride),
            Layer::Relu => Ok(x.relu()),
            Layer::BatchNorm(bn) => bn.apply(x),
            Layer::Flatten => {
                let n = x.batch_size();
                let f = x.sample_len();
                x.clone().reshape(vec![n, f])
            }
        }
    }

    /// Number of multiply-accumulates per sample (non-padding taps only).
    pub fn macs(&self, input: &[usize]) -> Result<u64> {
        match self {
            Layer::Linear { weight, .. } => Ok((weight.shape()[0] * weight.shape()[1]) as u64),
            Layer::Conv2d { weight, geometry, .. } => {
                let dims = tensor::ConvDims::new(input, weight.shape(), *geometry)?;
                let per_channel: usize = (0..dims.h)
                    .flat_map(|y| (0..dims.w).map(move |x| (y, x)))
                    .map(|(y, x)| dims.fan_out(y, x))
                    .sum();
                Ok((per_channel * dims.c) as u64)
            }
            _ => Ok(0),
        }
    }
}

/// A single-chain feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Network {
    /// Builds a network, checking that consecutive layer shapes compose.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let net = Self { input_shape, layers };
        net.shapes()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Layer {
        &self.layers[i]
    }

    /// Mutable access to a layer. Callers must keep shapes intact.
    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        &mut self.layers[i]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Per-sample shapes: entry 0 is the input, entry `i+1` the output of
    /// layer `i`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(shapes.last().unwrap()).map_err(|e| e.at_layer(i))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes().ok().and_then(|mut s| s.pop()).unwrap_or_default()
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    /// Indices of linear/conv layers in order.
    pub fn affine_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_affine()).collect()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() == 0 || batch.sample_shape() != self.input_shape.as_slice() {
            return Err(Error::shape("network input", batch.shape(), &self.input_shape));
        }
        Ok(())
    }

    /// Runs the batch and keeps every intermediate tensor.
    pub fn forward(&self, batch: &Tensor) -> Result<ActivationTrace> {
        self.check_batch(batch)?;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            current = layer.forward(&current).map_err(|e| e.at_layer(i))?;
            outputs.push(current.clone());
        }
        Ok(ActivationTrace {
            input: batch.clone(),
            outputs,
        })
    }

    /// Network output only.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut current = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            current = layer.forward(&current).map_err(|e| e.at_layer(i))?;
        }
        Ok(current)
    }

    /// Runs layers `[0, upto)` and returns the tensor entering layer `upto`.
    pub fn forward_prefix(&self, batch: &Tensor, upto: usize) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut current = batch.clone();
        for (i, layer) in self.layers.iter().enumerate().take(upto) {
            current = layer.forward(&current).map_err(|e| e.at_layer(i))?;
        }
        Ok(current)
    }

    /// Absorbs every batch-norm layer into the preceding affine layer:
    /// `W := W·γ/σ`, `b := β + (b−μ)·γ/σ` per output channel.
    pub fn fold_bn(&self) -> Result<Network> {
        let mut layers: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let Layer::BatchNorm(bn) = layer else {
                layers.push(layer.clone());
                continue;
            };
            let Some((weight, bias)) = layers.last_mut().and_then(Layer::affine_mut) else {
                return Err(
                    Error::Unsupported("batchnorm must directly follow a linear or conv2d layer".into()).at_layer(i),
                );
            };
            if bias.len() != bn.channels() {
                return Err(Error::shape("fold_bn", bias.shape(), bn.mean.shape()).at_layer(i));
            }
            let per_out = weight.len() / bias.len();
            for ch in 0..bn.channels() {
                let scale = bn.gamma.data()[ch] / bn.std.data()[ch];
                weight.data_mut()[ch * per_out..(ch + 1) * per_out]
                    .iter_mut()
                    .for_each(|w| *w *= scale);
                let b = &mut bias.data_mut()[ch];
                *b = bn.beta.data()[ch] + (*b - bn.mean.data()[ch]) * scale;
            }
        }
        Network::new(self.input_shape.clone(), layers)
    }
}

/// Every intermediate tensor of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub input: Tensor,
    /// `outputs[i]` is the output of layer `i`.
    pub outputs: Vec<Tensor>,
}

impl ActivationTrace {
    /// Tensor entering layer `i`.
    pub fn layer_input(&self, i: usize) -> &Tensor {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }

    pub fn layer_output(&self, i: usize) -> &Tensor {
        &self.outputs[i]
    }

    /// Raw network output (no activation applied after the last layer).
    pub fn output(&self) -> &Tensor {
        self.outputs.last().unwrap_or(&self.input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear(w: &[&[f64]], b: &[f64]) -> Layer {
        Layer::Linear {
            weight: Tensor::matrix(w),
            bias: Tensor::vector(b.to_vec()),
        }
    }

    #[test]
    fn one_layer_relu_example() {
        let net = Network::new(vec![1], vec![linear(&[&[1.0]], &[-1.0]), Layer::Relu]).unwrap();
        let trace = net.forward(&Tensor::matrix(&[&[2.0]])).unwrap();
        assert_eq!(trace.layer_output(1).data(), &[1.0]);
        assert_eq!(trace.layer_output(0).data(), &[1.0]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = random_conv_bn_net(&mut rng, false);
        let zeroed = Network::new(
            net.input_shape().to_vec(),
            net.layers()
                .iter()
                .map(|l| match l {
                    Layer::Conv2d { weight, bias, geometry } => Layer::Conv2d {
                        weight: weight.clone(),
                        bias: Tensor::zeros(bias.shape()),
                        geometry: *geometry,
                    },
                    Layer::Linear { weight, bias } => Layer::Linear {
                        weight: weight.clone(),
                        bias: Tensor::zeros(bias.shape()),
                    },
                    other => other.clone(),
                })
                .collect(),
        )
        .unwrap();
        let trace = zeroed.forward(&Tensor::zeros(&[2, 2, 6, 6])).unwrap();
        assert!(trace.outputs.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn identity_weights_reproduce_input() {
        let eye: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| (i == j) as u8 as f64).collect())
            .collect();
        let rows: Vec<&[f64]> = eye.iter().map(|r| r.as_slice()).collect();
        let net = Network::new(
            vec![3],
            vec![
                linear(&rows, &[0.0; 3]),
                Layer::Relu,
                linear(&rows, &[0.0; 3]),
                Layer::Relu,
            ],
        )
        .unwrap();
        let x = Tensor::matrix(&[&[0.5, 1.0, 2.0]]);
        let trace = net.forward(&x).unwrap();
        assert!(trace.outputs.iter().all(|t| *t == x));
    }

    #[test]
    fn forward_reports_failing_layer() {
        let layers = vec![linear(&[&[1.0, 1.0]], &[0.0]), Layer::Relu];
        let net = Network::new(vec![2], layers).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 3])).is_err());
        let bad = Network::new(vec![2], vec![Layer::Relu, linear(&[&[1.0, 1.0, 1.0]], &[0.0])]);
        match bad.unwrap_err() {
            Error::Layer { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fold_bn_scalar_example() {
        let net = Network::new(
            vec![1],
            vec![
                linear(&[&[2.0]], &[1.0]),
                Layer::BatchNorm(BatchNorm {
                    mean: Tensor::vector(vec![0.5]),
                    std: Tensor::vector(vec![2.0]),
                    gamma: Tensor::vector(vec![4.0]),
                    beta: Tensor::vector(vec![0.1]),
                }),
            ],
        )
        .unwrap();
        let folded = net.fold_bn().unwrap();
        assert_eq!(folded.len(), 1);
        let (w, b) = folded.layer(0).affine().unwrap();
        assert!((w.data()[0] - 4.0).abs() < 1e-15);
        assert!((b.data()[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn identity_bn_leaves_parameters() {
        let net = Network::new(
            vec![2],
            vec![
                linear(&[&[2.0, -1.0], &[0.5, 0.25]], &[1.0, -3.0]),
                Layer::BatchNorm(BatchNorm::identity(2)),
            ],
        )
        .unwrap();
        let folded = net.fold_bn().unwrap();
        assert_eq!(folded.layer(0), net.layer(0));
    }

    #[test]
    fn bn_without_affine_is_rejected() {
        let net = Network::new(vec![2], vec![Layer::Relu, Layer::BatchNorm(BatchNorm::identity(2))]).unwrap();
        assert!(net.fold_bn().is_err());
    }

    #[test]
    fn unsupported_kinds_are_named() {
        let err = "maxpool2d".parse::<LayerKind>().unwrap_err().to_string();
        assert!(err.contains("avgpool2d"), "{err}");
        assert!("add".parse::<LayerKind>().is_err());
        assert_eq!("conv2d".parse::<LayerKind>().unwrap(), LayerKind::Conv2d);
    }

    pub(crate) fn random_conv_bn_net(rng: &mut ChaCha8Rng, bn: bool) -> Network {
        let mut t = |shape: &[usize], lo: f64, hi: f64| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
        };
        let mut layers = vec![Layer::Conv2d {
            weight: t(&[3, 2, 3, 3], -0.5, 0.5),
            bias: t(&[3], -0.2, 0.2),
            geometry: ConvGeometry { stride: 1, padding: 1 },
        }];
        if bn {
            layers.push(Layer::BatchNorm(BatchNorm {
                mean: t(&[3], -0.5, 0.5),
                std: t(&[3], 0.3, 2.0),
                gamma: t(&[3], 0.2, 2.0),
                beta: t(&[3], -0.5, 0.5),
            }));
        }
        layers.extend([Layer::Relu, Layer::AvgPool2d { window: 2, stride: 2 }, Layer::Flatten]);
        layers.push(Layer::Linear {
            weight: t(&[4, 27], -0.3, 0.3),
            bias: t(&[4], -0.1, 0.1),
        });
        if bn {
            layers.push(Layer::BatchNorm(BatchNorm {
                mean: t(&[4], -0.5, 0.5),
                std: t(&[4], 0.3, 2.0),
                gamma: t(&[4], 0.2, 2.0),
                beta: t(&[4], -0.5, 0.5),
            }));
        }
        layers.extend([Layer::Relu]);
        layers.push(Layer::Linear {
            weight: t(&[2, 4], -1.0, 1.0),
            bias: t(&[2], -0.1, 0.1),
        });
        Network::new(vec![2, 6, 6], layers).unwrap()
    }

    #[test]
    fn fold_bn_preserves_outputs_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let net = random_conv_bn_net(&mut rng, true);
            let x = Tensor::new(vec![3, 2, 6, 6], (0..216).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let folded = net.fold_bn().unwrap();
            assert!(!folded.has_batchnorm());
            let a = net.predict(&x).unwrap();
            let b = folded.predict(&x).unwrap();
            let scale = a.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            assert!(a.max_abs_diff(&b).unwrap() / scale <= 1e-8);
            assert_eq!(folded.fold_bn().unwrap(), folded);
        }
    }

    #[test]
    fn batched_and_single_sample_traces_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = random_conv_bn_net(&mut rng, true);
        let x = Tensor::new(vec![4, 2, 6, 6], (0..288).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let batched = net.forward(&x).unwrap();
        for s in 0..4 {
            let single = net.forward(&x.select_samples(&[s])).unwrap();
            for (a, b) in single.outputs.iter().zip(&batched.outputs) {
                let diff = a
                    .data()
                    .iter()
                    .zip(b.sample(s))
                    .map(|(p, q)| (p - q).abs())
                    .fold(0.0, f64::max);
                assert!(diff <= 1e-12);
            }
        }
    }
}
