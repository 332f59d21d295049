//! Minimal SGD trainer for the two fixed desk-scale architectures.
//!
//! During training batch-norm layers normalise with mini-batch statistics
//! and back-propagate through them; the running statistics used at
//! inference follow an exponential moving average (decay 0.9).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ActivationTrace, BatchNorm, Layer, Network};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor};

const BN_DECAY: f64 = 0.9;
const BN_EPS: f64 = 1e-5;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    MlpSmall,
    CnnSmall,
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    Conv { out: usize, stride: usize },
    Pool,
}

const CNN_SMALL: &[Stage] = &[
    Stage::Conv { out: 8, stride: 2 },
    Stage::Conv { out: 16, stride: 1 },
    Stage::Conv { out: 16, stride: 1 },
    Stage::Conv { out: 32, stride: 1 },
    Stage::Pool,
    Stage::Conv { out: 32, stride: 1 },
    Stage::Conv { out: 32, stride: 1 },
    Stage::Pool,
];

impl Arch {
    pub const NAMES: [&'static str; 2] = ["mlp-small", "cnn-small"];

    pub fn name(self) -> &'static str {
        match self {
            Arch::MlpSmall => "mlp-small",
            Arch::CnnSmall => "cnn-small",
        }
    }

    /// Freshly initialised network (He-normal weights, zero biases,
    /// identity batch-norm).
    pub fn build(self, input_shape: &[usize], classes: usize, seed: u64) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |shape: &[usize], fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).unwrap()
        };
        let mut layers = Vec::new();
        match self {
            Arch::MlpSmall => {
                let features: usize = input_shape.iter().product();
                if input_shape.len() > 1 {
                    layers.push(Layer::Flatten);
                }
                let widths = [features, 64, 32];
                for pair in widths.windows(2) {
                    layers.push(Layer::Linear {
                        weight: he(&[pair[1], pair[0]], pair[0]),
                        bias: Tensor::zeros(&[pair[1]]),
                    });
                    layers.push(Layer::BatchNorm(BatchNorm::identity(pair[1])));
                    layers.push(Layer::Relu);
                }
                layers.push(Layer::Linear {
                    weight: he(&[classes, 32], 32),
                    bias: Tensor::zeros(&[classes]),
                });
            }
            Arch::CnnSmall => {
                let [c, h, w] = match input_shape {
                    [c, h, w] => [*c, *h, *w],
                    other => return Err(Error::invalid(format!("cnn-small expects C×H×W input, got {other:?}"))),
                };
                let (mut ch, mut hh, mut ww) = (c, h, w);
                for stage in CNN_SMALL {
                    match *stage {
                        Stage::Conv { out, stride } => {
                            layers.push(Layer::Conv2d {
                                weight: he(&[out, ch, 3, 3], ch * 9),
                                bias: Tensor::zeros(&[out]),
                                geometry: ConvGeometry { stride, padding: 1 },
                            });
                            layers.push(Layer::BatchNorm(BatchNorm::identity(out)));
                            layers.push(Layer::Relu);
                            ch = out;
                            hh = (hh - 1) / stride + 1;
                            ww = (ww - 1) / stride + 1;
                        }
                        Stage::Pool => {
                            layers.push(Layer::AvgPool2d { window: 2, stride: 2 });
                            hh /= 2;
                            ww /= 2;
                        }
                    }
                }
                if hh == 0 || ww == 0 {
                    return Err(Error::invalid(format!("cnn-small input {h}×{w} is too small")));
                }
                let features = ch * hh * ww;
                let hidden = 64;
                layers.push(Layer::Flatten);
                layers.push(Layer::Linear {
                    weight: he(&[hidden, features], features),
                    bias: Tensor::zeros(&[hidden]),
                });
                layers.push(Layer::BatchNorm(BatchNorm::identity(hidden)));
                layers.push(Layer::Relu);
                layers.push(Layer::Linear {
                    weight: he(&[classes, hidden], hidden),
                    bias: Tensor::zeros(&[classes]),
                });
            }
        }
        Network::new(input_shape.to_vec(), layers)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-small" => Ok(Arch::MlpSmall),
            "cnn-small" => Ok(Arch::CnnSmall),
            other => Err(Error::invalid(format!(
                "unknown architecture '{other}' (valid: {})",
                Arch::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub arch: Arch,
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Parameter gradients for one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    None,
    Affine { weight: Tensor, bias: Tensor },
    BatchNorm { gamma: Tensor, beta: Tensor },
}

/// Trains `arch` on `train` with SGD + momentum and cosine step decay.
/// `epochs = 0` returns the initialisation untouched.
pub fn train_desk_scale(
    arch: Arch,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    let labels = train.labels_required()?;
    let classes = train.classes().max(val.classes());
    let mut net = arch.build(train.sample_shape(), classes, cfg.seed)?;
    let mut velocity: Vec<LayerGrad> = net.layers().iter().map(zero_grad).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let n = train.len();
    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut final_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let x = train.inputs.select_samples(chunk);
            let y: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let (trace, stats) = forward_train(&mut net, &x)?;
            let (loss, grad_out) = softmax_cross_entropy(trace.output(), &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, step {step}"
                )));
            }
            epoch_loss += loss * chunk.len() as f64;
            let grads = backward(&net, &trace, grad_out, Some(&stats))?;
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
            sgd_step(&mut net, &mut velocity, &grads, lr, cfg);
            step += 1;
        }
        final_loss = epoch_loss / n as f64;
        log::debug!("epoch {epoch}: loss {final_loss:.5}");
    }

    let report = TrainReport {
        arch,
        epochs: cfg.epochs,
        final_loss,
        train_accuracy: accuracy(&net, train)?,
        val_accuracy: accuracy(&net, val)?,
    };
    Ok((net, report))
}

/// Cross-entropy loss and parameter gradients without touching the
/// batch-norm statistics.
pub fn loss_and_gradients(net: &Network, x: &Tensor, labels: &[u32]) -> Result<(f64, Vec<LayerGrad>)> {
    let trace = net.forward(x)?;
    let (loss, grad_out) = softmax_cross_entropy(trace.output(), labels)?;
    Ok((loss, backward(net, &trace, grad_out, None)?))
}

/// Class predictions (argmax of the output).
pub fn predict(net: &Network, inputs: &Tensor) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(inputs.batch_size());
    let n = inputs.batch_size();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let logits = net.predict(&inputs.select_samples(&idx))?;
        out.extend(argmax_rows(&logits));
        start += EVAL_CHUNK;
    }
    Ok(out)
}

pub(crate) fn argmax_rows(logits: &Tensor) -> Vec<u32> {
    (0..logits.batch_size())
        .map(|s| {
            let row = logits.sample(s);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Top-1 accuracy of the ANN on a labelled dataset.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    let labels = data.labels_required()?;
    if data.is_empty() {
        return Err(Error::Data("accuracy of an empty dataset".into()));
    }
    let pred = predict(net, &data.inputs)?;
    Ok(hit_rate(&pred, labels))
}

pub(crate) fn hit_rate(pred: &[u32], labels: &[u32]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

fn zero_grad(layer: &Layer) -> LayerGrad {
    match layer {
        Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => LayerGrad::Affine {
            weight: Tensor::zeros(weight.shape()),
            bias: Tensor::zeros(bias.shape()),
        },
        Layer::BatchNorm(bn) => LayerGrad::BatchNorm {
            gamma: Tensor::zeros(bn.gamma.shape()),
            beta: Tensor::zeros(bn.beta.shape()),
        },
        _ => LayerGrad::None,
    }
}

/// Per-channel mean and standard deviation of one mini-batch.
type BatchStats = (Vec<f64>, Vec<f64>);

fn forward_train(net: &mut Network, x: &Tensor) -> Result<(ActivationTrace, Vec<Option<BatchStats>>)> {
    let mut outputs = Vec::with_capacity(net.len());
    let mut stats = Vec::with_capacity(net.len());
    let mut current = x.clone();
    for i in 0..net.len() {
        let mut batch_stats = None;
        current = if let Layer::BatchNorm(bn) = net.layer_mut(i) {
            let (mean, var) = channel_moments(&current, bn.channels());
            let count = current.batch_size() * current.channel_stride();
            let unbiased = count as f64 / (count.max(2) - 1) as f64;
            for ch in 0..bn.channels() {
                let run_mean = &mut bn.mean.data_mut()[ch];
                *run_mean = BN_DECAY * *run_mean + (1.0 - BN_DECAY) * mean[ch];
                let std = &mut bn.std.data_mut()[ch];
                let run_var = (*std * *std - BN_EPS).max(0.0);
                let run_var = BN_DECAY * run_var + (1.0 - BN_DECAY) * var[ch] * unbiased;
                *std = (run_var + BN_EPS).sqrt();
            }
            let std: Vec<f64> = var.iter().map(|v| (v + BN_EPS).sqrt()).collect();
            let batch_bn = BatchNorm {
                mean: Tensor::vector(mean.clone()),
                std: Tensor::vector(std.clone()),
                gamma: bn.gamma.clone(),
                beta: bn.beta.clone(),
            };
            batch_stats = Some((mean, std));
            batch_bn.apply(&current).map_err(|e| e.at_layer(i))?
        } else {
            net.layer(i).forward(&current).map_err(|e| e.at_layer(i))?
        };
        stats.push(batch_stats);
        outputs.push(current.clone());
    }
    Ok((
        ActivationTrace {
            input: x.clone(),
            outputs,
        },
        stats,
    ))
}

/// Per-channel (biased) mean and variance over batch and spatial axes.
fn channel_moments(x: &Tensor, c: usize) -> (Vec<f64>, Vec<f64>) {
    let stride = x.channel_stride();
    let count = (x.batch_size() * stride).max(1) as f64;
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for sample in x.data().chunks(c * stride) {
        for (ch, plane) in sample.chunks(stride).enumerate() {
            for v in plane {
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let var = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / count - m * m).max(0.0))
        .collect();
    (mean, var)
}

fn softmax_cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<(f64, Tensor)> {
    let n = logits.batch_size();
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} samples", labels.len())));
    }
    let classes = logits.sample_len();
    let mut grad = vec![0.0; n * classes];
    let mut loss = 0.0;
    for s in 0..n {
        let row = logits.sample(s);
        let label = labels[s] as usize;
        if label >= classes {
            return Err(Error::Data(format!("label {label} out of range for {classes} classes")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        loss -= (exp[label] / z).ln();
        for (k, e) in exp.iter().enumerate() {
            grad[s * classes + k] = (e / z - (k == label) as u8 as f64) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Back-propagation; `batch_stats` switches batch-norm layers to the
/// mini-batch formulation used by [`forward_train`].
fn backward(
    net: &Network,
    trace: &ActivationTrace,
    grad_out: Tensor,
    batch_stats: Option<&[Option<BatchStats>]>,
) -> Result<Vec<LayerGrad>> {
    let mut grads = vec![LayerGrad::None; net.len()];
    let mut g = grad_out;
    for i in (0..net.len()).rev() {
        let input = trace.layer_input(i);
        let need_input_grad = i > 0;
        match net.layer(i) {
            Layer::Linear { weight, .. } => {
                let (gw, gb, gi) = tensor::linear_backward(input, weight, &g)?;
                grads[i] = LayerGrad::Affine { weight: gw, bias: gb };
                g = gi;
            }
            Layer::Conv2d { weight, geometry, .. } => {
                let (gw, gb, gi) = tensor::conv2d_backward(input, weight, &g, *geometry)?;
                grads[i] = LayerGrad::Affine { weight: gw, bias: gb };
                g = gi;
            }
            Layer::AvgPool2d { window, stride } => {
                if need_input_grad {
                    g = tensor::avgpool2d_backward(input.shape(), &g, *window, *stride)?;
                }
            }
            Layer::Relu => {
                g = g.zip_map(input, |gv, x| if x > 0.0 { gv } else { 0.0 })?;
            }
            Layer::BatchNorm(bn) => {
                let c = bn.channels();
                let stride = input.channel_stride();
                let stats = batch_stats.and_then(|s| s[i].as_ref());
                let (mean, std) = match stats {
                    Some((m, s)) => (m.as_slice(), s.as_slice()),
                    None => (bn.mean.data(), bn.std.data()),
                };
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for (sample_g, sample_x) in g.data().chunks(c * stride).zip(input.data().chunks(c * stride)) {
                    for ch in 0..c {
                        let r = ch * stride..(ch + 1) * stride;
                        for (gv, xv) in sample_g[r.clone()].iter().zip(&sample_x[r]) {
                            gg[ch] += gv * (xv - mean[ch]) / std[ch];
                            gbeta[ch] += gv;
                        }
                    }
                }
                let count = (input.batch_size() * stride) as f64;
                let mut gi = g.clone();
                for (sample_gi, sample_x) in gi
                    .data_mut()
                    .chunks_mut(c * stride)
                    .zip(input.data().chunks(c * stride))
                {
                    for ch in 0..c {
                        let scale = bn.gamma.data()[ch] / std[ch];
                        let r = ch * stride..(ch + 1) * stride;
                        for (giv, xv) in sample_gi[r.clone()].iter_mut().zip(&sample_x[r]) {
                            *giv = if stats.is_some() {
                                let xhat = (xv - mean[ch]) / std[ch];
                                scale * (*giv - (gbeta[ch] + xhat * gg[ch]) / count)
                            } else {
                                *giv * scale
                            };
                        }
                    }
                }
                grads[i] = LayerGrad::BatchNorm {
                    gamma: Tensor::vector(gg),
                    beta: Tensor::vector(gbeta),
                };
                g = gi;
            }
            Layer::Flatten => {
                g = g.reshape(input.shape().to_vec())?;
            }
        }
    }
    Ok(grads)
}

fn sgd_step(net: &mut Network, velocity: &mut [LayerGrad], grads: &[LayerGrad], lr: f64, cfg: &TrainConfig) {
    let update = |p: &mut Tensor, v: &mut Tensor, g: &Tensor, decay: f64| {
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = cfg.momentum * *vv + gv + decay * *pv;
            *pv -= lr * *vv;
        }
    };
    for (i, (vel, grad)) in velocity.iter_mut().zip(grads).enumerate() {
        match (net.layer_mut(i), vel, grad) {
            (
                Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. },
                LayerGrad::Affine { weight: vw, bias: vb },
                LayerGrad::Affine { weight: gw, bias: gb },
            ) => {
                update(weight, vw, gw, cfg.weight_decay);
                update(bias, vb, gb, 0.0);
            }
            (
                Layer::BatchNorm(bn),
                LayerGrad::BatchNorm { gamma: vg, beta: vb },
                LayerGrad::BatchNorm { gamma: gg, beta: gb },
            ) => {
                update(&mut bn.gamma, vg, gg, 0.0);
                update(&mut bn.beta, vb, gb, 0.0);
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use rand::Rng;

    #[test]
    fn zero_epochs_returns_initialisation() {
        let (train, val) = data::blobs(64, 2, 4, 1).split(0.75);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (net, _) = train_desk_scale(Arch::MlpSmall, &train, &val, &cfg).unwrap();
        assert_eq!(net, Arch::MlpSmall.build(&[4], 2, cfg.seed).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let (train, val) = data::blobs(200, 2, 4, 2).split(0.8);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let a = train_desk_scale(Arch::MlpSmall, &train, &val, &cfg).unwrap();
        let b = train_desk_scale(Arch::MlpSmall, &train, &val, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (train, val) = data::blobs(600, 2, 8, 3).split(0.8);
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        let (_, report) = train_desk_scale(Arch::MlpSmall, &train, &val, &cfg).unwrap();
        assert!(report.val_accuracy >= 0.99, "{report:?}");
    }

    #[test]
    fn unlabeled_dataset_is_rejected() {
        let (mut train, val) = data::blobs(20, 2, 4, 1).split(0.5);
        train.labels = None;
        assert!(train_desk_scale(Arch::MlpSmall, &train, &val, &TrainConfig::default()).is_err());
    }

    #[test]
    fn unknown_arch_lists_valid_names() {
        let msg = "resnet".parse::<Arch>().unwrap_err().to_string();
        assert!(msg.contains("mlp-small") && msg.contains("cnn-small"));
    }

    /// Central finite differences on random 3-layer nets (conv, linear).
    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let mut rand_t = |shape: &[usize], s: f64| {
                let n = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-s..s)).collect()).unwrap()
            };
            let net = Network::new(
                vec![2, 5, 5],
                vec![
                    Layer::Conv2d {
                        weight: rand_t(&[3, 2, 3, 3], 0.6),
                        bias: rand_t(&[3], 0.3),
                        geometry: ConvGeometry { stride: 1, padding: 1 },
                    },
                    Layer::BatchNorm(BatchNorm {
                        mean: rand_t(&[3], 0.2),
                        std: rand_t(&[3], 0.4).map(|v| v.abs() + 0.8),
                        gamma: rand_t(&[3], 0.5).map(|v| v + 1.0),
                        beta: rand_t(&[3], 0.2),
                    }),
                    Layer::Relu,
                    Layer::AvgPool2d { window: 2, stride: 2 },
                    Layer::Flatten,
                    Layer::Linear {
                        weight: rand_t(&[6, 12], 0.5),
                        bias: rand_t(&[6], 0.2),
                    },
                    Layer::Relu,
                    Layer::Linear {
                        weight: rand_t(&[3, 6], 0.8),
                        bias: rand_t(&[3], 0.2),
                    },
                ],
            )
            .unwrap();
            let x = rand_t(&[4, 2, 5, 5], 1.0);
            let labels = [0u32, 1, 2, 1];
            let (_, grads) = loss_and_gradients(&net, &x, &labels).unwrap();
            for layer_idx in [0usize, 5, 7] {
                let LayerGrad::Affine { weight: gw, .. } = &grads[layer_idx] else {
                    unreachable!()
                };
                for k in 0..gw.len() {
                    let h = 1e-5;
                    let eval = |delta: f64| {
                        let mut pert = net.clone();
                        pert.layer_mut(layer_idx).affine_mut().unwrap().0.data_mut()[k] += delta;
                        loss_and_gradients(&pert, &x, &labels).unwrap().0
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = gw.data()[k];
                    let denom = fd.abs().max(an.abs()).max(1e-3);
                    assert!(
                        (fd - an).abs() / denom <= 1e-4,
                        "trial {trial} layer {layer_idx} weight {k}: fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn batch_statistics_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut rand_t = |shape: &[usize], s: f64| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-s..s)).collect()).unwrap()
        };
        let net = Network::new(
            vec![2, 4, 4],
            vec![
                Layer::Conv2d {
                    weight: rand_t(&[3, 2, 3, 3], 0.6),
                    bias: rand_t(&[3], 0.3),
                    geometry: ConvGeometry { stride: 1, padding: 1 },
                },
                Layer::BatchNorm(BatchNorm {
                    mean: Tensor::zeros(&[3]),
                    std: Tensor::full(&[3], 1.0),
                    gamma: rand_t(&[3], 0.5).map(|v| v + 1.0),
                    beta: rand_t(&[3], 0.2),
                }),
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear {
                    weight: rand_t(&[3, 48], 0.3),
                    bias: rand_t(&[3], 0.2),
                },
            ],
        )
        .unwrap();
        let x = rand_t(&[5, 2, 4, 4], 1.0);
        let labels = [0u32, 1, 2, 1, 0];
        let loss = |n: &Network| {
            let (trace, _) = forward_train(&mut n.clone(), &x).unwrap();
            softmax_cross_entropy(trace.output(), &labels).unwrap().0
        };
        let (trace, stats) = forward_train(&mut net.clone(), &x).unwrap();
        let (_, g) = softmax_cross_entropy(trace.output(), &labels).unwrap();
        let grads = backward(&net, &trace, g, Some(&stats)).unwrap();
        let LayerGrad::Affine { weight: gw, .. } = &grads[0] else {
            unreachable!()
        };
        for k in 0..gw.len() {
            let h = 1e-5;
            let eval = |delta: f64| {
                let mut pert = net.clone();
                pert.layer_mut(0).affine_mut().unwrap().0.data_mut()[k] += delta;
                loss(&pert)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = gw.data()[k];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3) <= 1e-4,
                "weight {k}: {fd} vs {an}"
            );
        }
    }
}
