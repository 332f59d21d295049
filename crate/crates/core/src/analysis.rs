//! Conversion diagnostics: relative errors, error decomposition, activation
//! Hessians of dense chains, the weighted local-error bound, and energy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::{argmax_rows, Layer, Network};
use crate::calibration::{ann_entry_outputs, entry_input};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::snn::{RoundMode, SimOptions, Simulation, SpikingNetwork};
use crate::tensor::{gemm_acc, transpose, Tensor};
use crate::threshold::{clip_floor, clip_round, percentile, Threshold};

/// Largest summed activation width [`hessian_stack`] accepts.
pub const MAX_HESSIAN_WIDTH: usize = 64;

/// Largest feature count [`unroll_dense`] will expand a layer to.
pub const MAX_UNROLL_FEATURES: usize = 1 << 14;

/// `‖x − s̄‖²/‖x‖²`; `None` when `‖x‖ = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RelativeError {
    Scalar(Option<f64>),
    Channels(Vec<Option<f64>>),
}

impl RelativeError {
    /// The defined values (per channel or the single scalar).
    pub fn values(&self) -> Vec<f64> {
        match self {
            RelativeError::Scalar(v) => v.iter().copied().collect(),
            RelativeError::Channels(v) => v.iter().flatten().copied().collect(),
        }
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

/// Relative error of `snn` against `ann`, as one number or per channel
/// (axis 1, pooled over the batch and spatial positions).
pub fn relative_error(ann: &Tensor, snn: &Tensor, per_channel: bool) -> Result<RelativeError> {
    if ann.shape() != snn.shape() {
        return Err(Error::shape("relative_error", ann.shape(), snn.shape()));
    }
    if !per_channel {
        return Ok(RelativeError::Scalar(ratio(ann.sub(snn)?.sq_norm(), ann.sq_norm())));
    }
    let (channels, stride) = if ann.rank() >= 2 {
        (ann.channels(), ann.channel_stride())
    } else {
        (1, ann.len())
    };
    let mut num = vec![0.0; channels];
    let mut den = vec![0.0; channels];
    for (i, (a, s)) in ann.data().iter().zip(snn.data()).enumerate() {
        let c = (i / stride.max(1)) % channels;
        num[c] += (a - s) * (a - s);
        den[c] += a * a;
    }
    Ok(RelativeError::Channels(
        num.iter().zip(&den).map(|(n, d)| ratio(*n, *d)).collect(),
    ))
}

/// Summary statistics of a set of per-channel relative errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
    pub mean: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Spread> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        Some(Spread {
            p5: percentile(&mut v, 5.0),
            p50: percentile(&mut v, 50.0),
            p95: percentile(&mut v, 95.0),
            mean: values.iter().sum::<f64>() / values.len() as f64,
        })
    }
}

/// One layer's split of the conversion error.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerError {
    /// `x − s̄`.
    pub total: Tensor,
    /// Part caused by the differing inputs.
    pub propagated: Tensor,
    /// Part caused by the activation function.
    pub activation: Tensor,
}

/// `f(z_ann) − s̄_out` split at `f(z_snn)`, with `f` the ReLU or identity.
fn split_error(z_ann: &Tensor, z_snn: &Tensor, relu: bool, snn_out: &Tensor) -> Result<LayerError> {
    let (ann_out, snn_lin) = if relu {
        (z_ann.relu(), z_snn.relu())
    } else {
        (z_ann.clone(), z_snn.clone())
    };
    Ok(LayerError {
        total: ann_out.sub(snn_out)?,
        propagated: ann_out.sub(&snn_lin)?,
        activation: snn_lin.sub(snn_out)?,
    })
}

fn quantized(z: &Tensor, t: usize, v: &Threshold, mode: RoundMode) -> Result<Tensor> {
    match mode {
        RoundMode::Floor => clip_floor(z, t, v),
        RoundMode::Round => clip_round(z, t, v),
    }
}

/// Splits the error of one affine + ReLU layer given the ANN input `x`
/// and the SNN input `s̄`: `e_r = ReLU(Wx+b) − ReLU(Ws̄+b)` and
/// `e_c = ReLU(Ws̄+b) − Clip(Ws̄+b)`.
pub fn decompose_error(
    layer: &Layer,
    ann_input: &Tensor,
    snn_input: &Tensor,
    time_steps: usize,
    threshold: &Threshold,
    mode: RoundMode,
) -> Result<LayerError> {
    if !layer.is_affine() {
        return Err(Error::invalid(format!(
            "decompose_error needs an affine layer, got {}",
            layer.kind().name()
        )));
    }
    if ann_input.shape() != snn_input.shape() {
        return Err(Error::shape("decompose_error", ann_input.shape(), snn_input.shape()));
    }
    let z_ann = layer.forward(ann_input)?;
    let z_snn = layer.forward(snn_input)?;
    let q = quantized(&z_snn, time_steps, threshold, mode)?;
    split_error(&z_ann, &z_snn, true, &q)
}

/// Per-layer error split over a whole chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDecomposition {
    pub layers: Vec<LayerError>,
}

impl ErrorDecomposition {
    /// `Σ_ℓ 2^(n−ℓ+1)·‖e_c^(ℓ)‖²` over the `n` layers.
    pub fn weighted_local_error(&self) -> f64 {
        let n = self.layers.len();
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| 2f64.powi((n - i) as i32) * l.activation.sq_norm())
            .sum()
    }
}

/// One affine map of a dense chain, optionally followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStage {
    /// `out × in`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub relu: bool,
}

impl DenseStage {
    pub fn width(&self) -> usize {
        self.weight.shape()[0]
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let (out, inp) = (self.weight.shape()[0], self.weight.shape()[1]);
        let w = self.weight.data();
        (0..out)
            .map(|o| self.bias.data()[o] + (0..inp).map(|i| w[o * inp + i] * x[i]).sum::<f64>())
            .collect()
    }
}

/// Splits a network of `Linear` and `Relu` layers into dense stages.
pub fn dense_stages(net: &Network) -> Result<Vec<DenseStage>> {
    let mut stages: Vec<DenseStage> = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Linear { weight, bias } => stages.push(DenseStage {
                weight: weight.clone(),
                bias: bias.clone(),
                relu: false,
            }),
            Layer::Relu => match stages.last_mut() {
                Some(s) if !s.relu => s.relu = true,
                _ => return Err(Error::invalid("ReLU must follow a linear layer").at_layer(i)),
            },
            other => {
                return Err(Error::Unsupported(format!(
                    "{} layer in a dense chain; unroll the network with unroll_dense first",
                    other.kind().name()
                ))
                .at_layer(i))
            }
        }
    }
    if stages.is_empty() {
        return Err(Error::invalid("network has no linear layers"));
    }
    Ok(stages)
}

/// Matrix and offset of a layer that is affine in its input, found by
/// probing it with the zero vector and the unit vectors.
fn probe(layer: &Layer, in_shape: &[usize]) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    let d: usize = in_shape.iter().product();
    if d > MAX_UNROLL_FEATURES {
        return Err(Error::invalid(format!(
            "{d} features exceed the unroll limit {MAX_UNROLL_FEATURES}"
        )));
    }
    let mut shape = vec![d + 1];
    shape.extend_from_slice(in_shape);
    let mut basis = Tensor::zeros(&shape);
    for j in 0..d {
        basis.sample_mut(j + 1)[j] = 1.0;
    }
    let out = layer.forward(&basis)?;
    let o = out.sample_len();
    let offset = out.sample(0).to_vec();
    let mut m = vec![0.0; o * d];
    for j in 0..d {
        for (r, (v, b)) in out.sample(j + 1).iter().zip(&offset).enumerate() {
            m[r * d + j] = v - b;
        }
    }
    Ok((m, offset, o, d))
}

/// Rewrites a batch-norm-free network as an equivalent chain of `Linear`
/// and `Relu` layers. Convolutions become their dense matrices and pooling
/// or flattening layers are merged into the following linear map.
pub fn unroll_dense(net: &Network) -> Result<Network> {
    if net.has_batchnorm() {
        return Err(Error::invalid("fold batch norm before unrolling"));
    }
    let shapes = net.shapes()?;
    let mut layers = Vec::new();
    let mut pending: Option<(Vec<f64>, Vec<f64>, usize, usize)> = None;
    let flush = |pending: &mut Option<(Vec<f64>, Vec<f64>, usize, usize)>, layers: &mut Vec<Layer>| {
        if let Some((m, b, o, d)) = pending.take() {
            layers.push(Layer::Linear {
                weight: Tensor::new(vec![o, d], m).expect("matrix shape"),
                bias: Tensor::new(vec![o], b).expect("bias shape"),
            });
        }
    };
    for (i, layer) in net.layers().iter().enumerate() {
        if let Layer::Relu = layer {
            if pending.is_none() {
                return Err(Error::invalid("ReLU must follow an affine layer").at_layer(i));
            }
            flush(&mut pending, &mut layers);
            layers.push(Layer::Relu);
            continue;
        }
        let (m, b, o, d) = probe(layer, &shapes[i]).map_err(|e| e.at_layer(i))?;
        pending = Some(match pending.take() {
            None => (m, b, o, d),
            Some((pm, pb, po, pd)) => {
                debug_assert_eq!(po, d);
                let mut mm = vec![0.0; o * pd];
                gemm_acc(&m, &pm, &mut mm, o, d, pd);
                let mut mb = b;
                gemm_acc(&m, &pb, &mut mb, o, d, 1);
                (mm, mb, o, pd)
            }
        });
    }
    flush(&mut pending, &mut layers);
    let features: usize = net.input_shape().iter().product();
    Network::new(vec![features], layers)
}

/// Activation Hessians `H^(ℓ)` of `L(a) = ‖x^(n) − a‖²` with respect to each
/// stage's output, and the ReLU-derivative masks `B` of the ANN trace.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianStack {
    /// `w_ℓ × w_ℓ`, one per stage.
    pub hessians: Vec<Tensor>,
    /// Diagonal of `B` per stage (all ones for stages without ReLU).
    pub masks: Vec<Vec<f64>>,
}

impl HessianStack {
    /// `eᵀ H^(ℓ) e`.
    pub fn quadratic(&self, layer: usize, e: &[f64]) -> f64 {
        quadratic_form(&self.hessians[layer], e)
    }
}

fn quadratic_form(h: &Tensor, e: &[f64]) -> f64 {
    let w = e.len();
    let d = h.data();
    (0..w)
        .map(|i| e[i] * (0..w).map(|j| d[i * w + j] * e[j]).sum::<f64>())
        .sum()
}

fn sample_vector(net: &Network, sample: &Tensor) -> Result<Vec<f64>> {
    let features: usize = net.input_shape().iter().product();
    if sample.len() != features {
        return Err(Error::shape("sample", net.input_shape(), sample.shape()));
    }
    Ok(sample.data().to_vec())
}

fn check_width(stages: &[DenseStage]) -> Result<()> {
    let total: usize = stages.iter().map(DenseStage::width).sum();
    if total > MAX_HESSIAN_WIDTH {
        return Err(Error::invalid(format!(
            "total activation width {total} exceeds {MAX_HESSIAN_WIDTH}"
        )));
    }
    Ok(())
}

/// ANN pre-activations of every stage for one input.
fn ann_trace(stages: &[DenseStage], x: &[f64]) -> Vec<Vec<f64>> {
    let mut a = x.to_vec();
    let mut zs = Vec::with_capacity(stages.len());
    for s in stages {
        let z = s.affine(&a);
        a = if s.relu {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        zs.push(z);
    }
    zs
}

fn stack_from_trace(stages: &[DenseStage], zs: &[Vec<f64>]) -> HessianStack {
    let masks: Vec<Vec<f64>> = stages
        .iter()
        .zip(zs)
        .map(|(s, z)| z.iter().map(|v| if !s.relu || *v > 0.0 { 1.0 } else { 0.0 }).collect())
        .collect();
    let n = stages.len();
    let mut hessians = vec![Tensor::zeros(&[0]); n];
    let wn = stages[n - 1].width();
    let mut h = vec![0.0; wn * wn];
    for i in 0..wn {
        h[i * wn + i] = 2.0;
    }
    hessians[n - 1] = Tensor::new(vec![wn, wn], h.clone()).expect("square");
    for l in (0..n - 1).rev() {
        let next = &stages[l + 1];
        let (out, inp) = (next.width(), next.weight.shape()[1]);
        let mut bw = next.weight.data().to_vec();
        for r in 0..out {
            let b = masks[l + 1][r];
            bw[r * inp..(r + 1) * inp].iter_mut().for_each(|v| *v *= b);
        }
        let mut hb = vec![0.0; out * inp];
        gemm_acc(&h, &bw, &mut hb, out, out, inp);
        let bwt = transpose(&bw, out, inp);
        let mut hl = vec![0.0; inp * inp];
        gemm_acc(&bwt, &hb, &mut hl, inp, out, inp);
        for i in 0..inp {
            for j in 0..i {
                let m = 0.5 * (hl[i * inp + j] + hl[j * inp + i]);
                hl[i * inp + j] = m;
                hl[j * inp + i] = m;
            }
        }
        hessians[l] = Tensor::new(vec![inp, inp], hl.clone()).expect("square");
        h = hl;
    }
    HessianStack { hessians, masks }
}

/// Hessian stack of a dense chain at one input sample. The ReLU derivative
/// at exactly zero is taken as zero.
pub fn hessian_stack(net: &Network, sample: &Tensor) -> Result<HessianStack> {
    let stages = dense_stages(net)?;
    check_width(&stages)?;
    let x = sample_vector(net, sample)?;
    Ok(stack_from_trace(&stages, &ann_trace(&stages, &x)))
}

/// Outcome of one bound evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// `eᵀH^(n)e` with the error propagated to first order.
    pub lhs: f64,
    /// `Σ_ℓ 2^(n−ℓ+1)·e_c^(ℓ)ᵀ H^(ℓ) e_c^(ℓ)`.
    pub rhs: f64,
    pub holds: bool,
    /// `eᵀH^(n)e` with the exact output error.
    pub lhs_exact: f64,
    pub holds_exact: bool,
    /// Units whose ReLU is active in one pass and inactive in the other.
    pub crossings: usize,
}

const BOUND_SLACK: f64 = 1e-8;

/// Analytic ANN and SNN chains of a dense network for one input, split
/// into per-stage errors.
pub fn decompose_chain(
    net: &Network,
    sample: &Tensor,
    time_steps: usize,
    thresholds: &[Threshold],
    mode: RoundMode,
) -> Result<ErrorDecomposition> {
    let stages = dense_stages(net)?;
    let x = sample_vector(net, sample)?;
    Ok(chain_errors(&stages, &x, time_steps, thresholds, mode)?.0)
}

fn chain_errors(
    stages: &[DenseStage],
    x: &[f64],
    time_steps: usize,
    thresholds: &[Threshold],
    mode: RoundMode,
) -> Result<(ErrorDecomposition, usize)> {
    let spiking = stages.iter().filter(|s| s.relu).count();
    if thresholds.len() != spiking {
        return Err(Error::invalid(format!(
            "{} thresholds for {spiking} ReLU stages",
            thresholds.len()
        )));
    }
    let mut a = x.to_vec();
    let mut s = x.to_vec();
    let mut layers = Vec::with_capacity(stages.len());
    let mut crossings = 0;
    let mut site = 0;
    for st in stages {
        let w = st.width();
        let za = Tensor::new(vec![1, w], st.affine(&a))?;
        let zs = Tensor::new(vec![1, w], st.affine(&s))?;
        let err = if st.relu {
            thresholds[site].validate(w)?;
            let q = quantized(&zs, time_steps, &thresholds[site], mode)?;
            site += 1;
            crossings += za
                .data()
                .iter()
                .zip(zs.data())
                .filter(|(p, q)| (**p > 0.0) != (**q > 0.0))
                .count();
            a = za.relu().into_data();
            s = q.data().to_vec();
            split_error(&za, &zs, true, &q)?
        } else {
            a = za.data().to_vec();
            s = zs.data().to_vec();
            split_error(&za, &zs, false, &zs)?
        };
        layers.push(err);
    }
    Ok((ErrorDecomposition { layers }, crossings))
}

/// Checks `eᵀH^(n)e ≤ Σ_ℓ 2^(n−ℓ+1)·e_cᵀH^(ℓ)e_c` for one input. `e_c` comes
/// from the analytic clipped-quantizer chain; `holds` uses the error
/// propagated linearly through the ANN's ReLU masks, `holds_exact` the
/// exact output error.
pub fn check_bound(
    net: &Network,
    sample: &Tensor,
    time_steps: usize,
    thresholds: &[Threshold],
    mode: RoundMode,
) -> Result<BoundCheck> {
    let stages = dense_stages(net)?;
    check_width(&stages)?;
    let x = sample_vector(net, sample)?;
    let stack = stack_from_trace(&stages, &ann_trace(&stages, &x));
    let (dec, crossings) = chain_errors(&stages, &x, time_steps, thresholds, mode)?;
    let n = stages.len();
    let mut e: Vec<f64> = Vec::new();
    let mut rhs = 0.0;
    for (l, (st, err)) in stages.iter().zip(&dec.layers).enumerate() {
        let ec = err.activation.data();
        let mut next = if l == 0 { vec![0.0; st.width()] } else { st.affine(&e) };
        if l > 0 {
            for (v, b) in next.iter_mut().zip(st.bias.data()) {
                *v -= b;
            }
        }
        for (i, v) in next.iter_mut().enumerate() {
            *v = *v * stack.masks[l][i] + ec[i];
        }
        e = next;
        rhs += 2f64.powi((n - l) as i32) * stack.quadratic(l, ec);
    }
    let lhs = stack.quadratic(n - 1, &e);
    let lhs_exact = stack.quadratic(n - 1, dec.layers[n - 1].total.data());
    Ok(BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + BOUND_SLACK,
        lhs_exact,
        holds_exact: lhs_exact <= rhs + BOUND_SLACK,
        crossings,
    })
}

/// Parameters of a batch of random bound trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTrials {
    /// Largest layer width.
    pub width: usize,
    /// Largest number of layers (at least 2 are used).
    pub depth: usize,
    pub trials: usize,
    pub seed: u64,
    pub mode: RoundMode,
}

impl Default for BoundTrials {
    fn default() -> Self {
        Self {
            width: 8,
            depth: 4,
            trials: 100,
            seed: 0,
            mode: RoundMode::Round,
        }
    }
}

/// One random network and its bound check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTrial {
    pub trial: usize,
    pub widths: Vec<usize>,
    pub time_steps: usize,
    #[serde(flatten)]
    pub check: BoundCheck,
}

impl BoundTrials {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth < 2 {
            return Err(Error::invalid("bound trials need width ≥ 1 and depth ≥ 2"));
        }
        if self.width * self.depth > MAX_HESSIAN_WIDTH {
            return Err(Error::invalid(format!(
                "width {} × depth {} exceeds the Hessian limit {MAX_HESSIAN_WIDTH}",
                self.width, self.depth
            )));
        }
        Ok(())
    }

    /// Random all-ReLU dense net, input, step count and thresholds of trial `i`.
    pub fn instance(&self, i: usize) -> (Network, Tensor, usize, Vec<Threshold>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let depth = rng.gen_range(2..=self.depth);
        let widths: Vec<usize> = (0..=depth).map(|_| rng.gen_range(1..=self.width)).collect();
        let mut layers = Vec::new();
        for pair in widths.windows(2) {
            let normal = Normal::new(0.0, 1.0 / (pair[0] as f64).sqrt()).unwrap();
            let w: Vec<f64> = (0..pair[0] * pair[1]).map(|_| normal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..pair[1]).map(|_| rng.gen_range(-0.1..0.3)).collect();
            layers.push(Layer::Linear {
                weight: Tensor::new(vec![pair[1], pair[0]], w).unwrap(),
                bias: Tensor::new(vec![pair[1]], b).unwrap(),
            });
            layers.push(Layer::Relu);
        }
        let net = Network::new(vec![widths[0]], layers).unwrap();
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.gen_range(0.0..1.0)).collect();
        let sample = Tensor::new(vec![1, widths[0]], x).unwrap();
        let t = [2, 4, 8][rng.gen_range(0..3)];
        let stages = dense_stages(&net).unwrap();
        let zs = ann_trace(&stages, sample.data());
        let thresholds = zs
            .iter()
            .map(|z| {
                let peak = z.iter().copied().fold(0.0, f64::max);
                let base = if peak > 0.0 { peak } else { 1.0 };
                Threshold::Layer(base * rng.gen_range(0.5..1.5))
            })
            .collect();
        (net, sample, t, thresholds)
    }

    pub fn run(&self) -> Result<Vec<BoundTrial>> {
        self.validate()?;
        (0..self.trials)
            .into_par_iter()
            .map(|i| {
                let (net, sample, t, thresholds) = self.instance(i);
                let check = check_bound(&net, &sample, t, &thresholds, self.mode)?;
                let mut widths = vec![net.input_shape()[0]];
                widths.extend(dense_stages(&net)?.iter().map(DenseStage::width));
                Ok(BoundTrial {
                    trial: i,
                    widths,
                    time_steps: t,
                    check,
                })
            })
            .collect()
    }
}

/// Energy per operation, in arbitrary units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyCosts {
    pub add: f64,
    pub mult: f64,
}

impl Default for EnergyCosts {
    fn default() -> Self {
        Self { add: 0.9, mult: 4.6 }
    }
}

/// Per-sample operation counts and energies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub ann_macs: f64,
    pub snn_synaptic_ops: f64,
    pub snn_dense_macs: f64,
    pub ann_energy: f64,
    /// Accumulations triggered by spikes.
    pub snn_spiking_energy: f64,
    /// Direct-encoded first layer, charged at full MAC cost every step.
    pub snn_dense_energy: f64,
    pub snn_energy: f64,
    pub ratio: Option<f64>,
}

/// Energy of a simulation run of a network with the architecture of `net`,
/// against the ANN's dense MAC count, averaged per sample.
pub fn estimate_energy(sim: &Simulation, net: &Network, costs: EnergyCosts) -> Result<EnergyReport> {
    let shapes = net.shapes()?;
    let ann_macs: u64 = net
        .layers()
        .iter()
        .zip(&shapes)
        .map(|(l, s)| l.macs(s))
        .sum::<Result<u64>>()?;
    let n = sim.samples.max(1) as f64;
    let ops = sim.synaptic_ops.iter().sum::<u64>() as f64 / n;
    let dense = sim.dense_macs as f64 / n;
    let mac = costs.add + costs.mult;
    let ann_energy = ann_macs as f64 * mac;
    let snn_spiking_energy = ops * costs.add;
    let snn_dense_energy = dense * mac;
    let snn_energy = snn_spiking_energy + snn_dense_energy;
    Ok(EnergyReport {
        ann_macs: ann_macs as f64,
        snn_synaptic_ops: ops,
        snn_dense_macs: dense,
        ann_energy,
        snn_spiking_energy,
        snn_dense_energy,
        snn_energy,
        ratio: ratio(snn_energy, ann_energy),
    })
}

/// Top-1 accuracy of the SNN's output on a labelled dataset.
pub fn snn_accuracy(snn: &SpikingNetwork, data: &Dataset) -> Result<f64> {
    let labels = data.labels_required()?;
    if data.is_empty() {
        return Err(Error::Data("accuracy of an empty dataset".into()));
    }
    let sim = snn.simulate(&data.inputs, &SimOptions::default())?;
    Ok(output_accuracy(sim.output.as_ref().expect("full run"), labels))
}

/// Fraction of rows of `scores` whose argmax equals the label.
pub fn output_accuracy(scores: &Tensor, labels: &[u32]) -> f64 {
    let hits = argmax_rows(scores).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Diagnostics of one affine layer of a converted network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub spiking: bool,
    pub threshold: Option<Threshold>,
    pub firing_rate: Option<f64>,
    /// Relative error of the whole layer output.
    pub relative_error: Option<f64>,
    /// Spread of the per-channel relative errors.
    pub channel_error: Option<Spread>,
    /// Channels whose ANN output is identically zero.
    pub channels_not_applicable: usize,
    /// `‖e_r‖²` and `‖e_c‖²` per sample.
    pub propagated_error: f64,
    pub activation_error: f64,
    /// Neurons ending the run with a negative membrane potential.
    pub negative_potentials: usize,
}

/// Full diagnostic report of a converted network on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub time_steps: usize,
    pub samples: usize,
    pub layers: Vec<LayerDiagnostics>,
    pub energy: EnergyReport,
    pub ann_accuracy: Option<f64>,
    pub snn_accuracy: Option<f64>,
}

/// Compares `snn` with the folded ANN `base` it was converted from, layer
/// by layer. Errors are split against the ANN mapping of the SNN's input:
/// `e_r = f(Wx+b) − f(Ws̄+b)`, `e_c = f(Ws̄+b) − s̄_out`, with `f` the ReLU
/// (identity for the output layer) and `s̄_out` the simulated output.
pub fn diagnose(base: &Network, snn: &SpikingNetwork, data: &Dataset, costs: EnergyCosts) -> Result<Diagnostics> {
    if data.is_empty() {
        return Err(Error::Data("diagnose needs at least one sample".into()));
    }
    let inputs = &data.inputs;
    let sim = snn.simulate(inputs, &SimOptions::default())?;
    let ann_out = ann_entry_outputs(base, snn, inputs)?;
    let trace = base.forward(inputs)?;
    let n = inputs.batch_size() as f64;
    let affine = snn.affine_layers();
    let mut layers = Vec::with_capacity(affine.len());
    for (k, &li) in affine.iter().enumerate() {
        let spiking = k < snn.sites().len();
        let snn_out = if spiking {
            &sim.site_outputs[k]
        } else {
            sim.output.as_ref().expect("full run")
        };
        let per_channel = relative_error(&ann_out[k], snn_out, true)?;
        let values = per_channel.values();
        let na = match &per_channel {
            RelativeError::Channels(c) => c.iter().filter(|v| v.is_none()).count(),
            RelativeError::Scalar(_) => 0,
        };
        let overall = match relative_error(&ann_out[k], snn_out, false)? {
            RelativeError::Scalar(v) => v,
            RelativeError::Channels(_) => unreachable!(),
        };
        let layer = base.layer(li);
        let z_ann = trace.layer_output(li);
        let z_snn = layer.forward(&entry_input(snn, k, inputs, Some(&sim))?)?;
        let split = split_error(z_ann, &z_snn, spiking, snn_out)?;
        layers.push(LayerDiagnostics {
            layer: li,
            spiking,
            threshold: spiking.then(|| snn.threshold(k).clone()),
            firing_rate: spiking.then(|| sim.firing_rate(k)),
            relative_error: overall,
            channel_error: Spread::of(&values),
            channels_not_applicable: na,
            propagated_error: split.propagated.sq_norm() / n,
            activation_error: split.activation.sq_norm() / n,
            negative_potentials: if spiking {
                sim.final_potentials[k].data().iter().filter(|v| **v < 0.0).count()
            } else {
                0
            },
        });
    }
    let energy = estimate_energy(&sim, snn.network(), costs)?;
    let (ann_accuracy, snn_accuracy) = match &data.labels {
        Some(labels) => (
            Some(output_accuracy(trace.output(), labels)),
            Some(output_accuracy(sim.output.as_ref().expect("full run"), labels)),
        ),
        None => (None, None),
    };
    Ok(Diagnostics {
        time_steps: snn.time_steps(),
        samples: data.len(),
        layers,
        energy,
        ann_accuracy,
        snn_accuracy,
    })
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_else(|| "NA".into())
}

impl Diagnostics {
    /// Per-layer table followed, after a blank line, by the energy block.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "layer,spiking,threshold_max,firing_rate,rel_error,rel_p5,rel_p50,rel_p95,rel_mean,channels_na,e_r_sq,e_c_sq,negative_potentials\n",
        );
        for l in &self.layers {
            let s = l.channel_error;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{:e},{:e},{}\n",
                l.layer,
                l.spiking,
                csv_opt(l.threshold.as_ref().map(Threshold::max)),
                csv_opt(l.firing_rate),
                csv_opt(l.relative_error),
                csv_opt(s.map(|s| s.p5)),
                csv_opt(s.map(|s| s.p50)),
                csv_opt(s.map(|s| s.p95)),
                csv_opt(s.map(|s| s.mean)),
                l.channels_not_applicable,
                l.propagated_error,
                l.activation_error,
                l.negative_potentials,
            ));
        }
        let e = &self.energy;
        out.push_str("\nquantity,value\n");
        for (k, v) in [
            ("time_steps", Some(self.time_steps as f64)),
            ("samples", Some(self.samples as f64)),
            ("ann_macs", Some(e.ann_macs)),
            ("snn_synaptic_ops", Some(e.snn_synaptic_ops)),
            ("snn_dense_macs", Some(e.snn_dense_macs)),
            ("ann_energy", Some(e.ann_energy)),
            ("snn_energy", Some(e.snn_energy)),
            ("energy_ratio", e.ratio),
            ("ann_accuracy", self.ann_accuracy),
            ("snn_accuracy", self.snn_accuracy),
        ] {
            out.push_str(&format!("{k},{}\n", csv_opt(v)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn linear(w: &[&[f64]], b: &[f64]) -> Layer {
        Layer::Linear {
            weight: Tensor::matrix(w),
            bias: Tensor::vector(b.to_vec()),
        }
    }

    #[test]
    fn relative_error_examples() {
        let x = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(relative_error(&x, &x, false).unwrap(), RelativeError::Scalar(Some(0.0)));
        let zero = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(
            relative_error(&x, &zero, false).unwrap(),
            RelativeError::Scalar(Some(1.0))
        );
        let double = Tensor::vector(vec![6.0, 8.0]);
        assert_eq!(
            relative_error(&x, &double, false).unwrap(),
            RelativeError::Scalar(Some(1.0))
        );
        assert_eq!(relative_error(&zero, &x, false).unwrap(), RelativeError::Scalar(None));
    }

    #[test]
    fn relative_error_per_channel() {
        let x = Tensor::new(vec![2, 2, 1, 2], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let s = Tensor::new(vec![2, 2, 1, 2], vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            relative_error(&x, &s, true).unwrap(),
            RelativeError::Channels(vec![Some(0.25), None])
        );
    }

    #[test]
    fn one_dimensional_decomposition() {
        let layer = linear(&[&[1.0]], &[0.0]);
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let s = Tensor::new(vec![1, 1], vec![0.8]).unwrap();
        let d = decompose_error(&layer, &x, &s, 2, &Threshold::Layer(1.0), RoundMode::Round).unwrap();
        assert!((d.propagated.data()[0] - 0.2).abs() < 1e-12);
        assert!((d.activation.data()[0] + 0.2).abs() < 1e-12);
        assert!(d.total.data()[0].abs() < 1e-12);
    }

    #[test]
    fn equal_inputs_leave_only_activation_error() {
        let layer = linear(&[&[0.5, -0.3], &[1.2, 0.4]], &[0.1, 0.0]);
        let x = Tensor::new(vec![3, 2], vec![0.2, 0.9, 0.5, 0.1, 1.0, 0.7]).unwrap();
        let d = decompose_error(&layer, &x, &x, 4, &Threshold::Layer(1.0), RoundMode::Round).unwrap();
        assert!(d.propagated.data().iter().all(|v| *v == 0.0));
        assert_eq!(d.total, d.activation);
    }

    #[test]
    fn large_t_activation_error_is_rounding_bounded() {
        let layer = linear(&[&[0.5, -0.3], &[1.2, 0.4]], &[0.1, 0.0]);
        let x = Tensor::new(vec![3, 2], vec![0.2, 0.9, 0.5, 0.1, 1.0, 0.7]).unwrap();
        let (t, v) = (1000, 2.0);
        let d = decompose_error(&layer, &x, &x, t, &Threshold::Layer(v), RoundMode::Round).unwrap();
        let bound = v / (2.0 * t as f64);
        assert!(d.activation.data().iter().all(|e| e.abs() <= bound + 1e-15));
    }

    proptest! {
        #[test]
        fn decomposition_identity(
            w in prop::collection::vec(-2.0f64..2.0, 6),
            x in prop::collection::vec(0.0f64..1.5, 6),
            s in prop::collection::vec(0.0f64..1.5, 6),
            t in 1usize..32,
            v in 0.2f64..3.0,
        ) {
            let layer = Layer::Linear {
                weight: Tensor::new(vec![3, 2], w).unwrap(),
                bias: Tensor::vector(vec![0.1, -0.2, 0.0]),
            };
            let xs = Tensor::new(vec![3, 2], x).unwrap();
            let ss = Tensor::new(vec![3, 2], s).unwrap();
            let d = decompose_error(&layer, &xs, &ss, t, &Threshold::Layer(v), RoundMode::Round).unwrap();
            for ((e, r), c) in d.total.data().iter().zip(d.propagated.data()).zip(d.activation.data()) {
                prop_assert!((e - (r + c)).abs() <= 1e-12);
            }
        }
    }

    fn decomposition_from(ec: &[f64]) -> ErrorDecomposition {
        ErrorDecomposition {
            layers: ec
                .iter()
                .map(|v| LayerError {
                    total: Tensor::vector(vec![0.0]),
                    propagated: Tensor::vector(vec![0.0]),
                    activation: Tensor::vector(vec![*v]),
                })
                .collect(),
        }
    }

    #[test]
    fn weighted_local_error_examples() {
        assert_eq!(decomposition_from(&[0.0, 0.0]).weighted_local_error(), 0.0);
        assert_eq!(decomposition_from(&[1.0, 1.0]).weighted_local_error(), 6.0);
        let base = decomposition_from(&[0.3, -0.7, 1.1]).weighted_local_error();
        let doubled = decomposition_from(&[0.6, -1.4, 2.2]).weighted_local_error();
        assert!((doubled - 4.0 * base).abs() < 1e-12);
    }

    fn random_chain(rng: &mut ChaCha8Rng, widths: &[usize], final_relu: bool) -> Network {
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let w: Vec<f64> = (0..pair[0] * pair[1]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..pair[1]).map(|_| rng.gen_range(-0.2..0.4)).collect();
            layers.push(Layer::Linear {
                weight: Tensor::new(vec![pair[1], pair[0]], w).unwrap(),
                bias: Tensor::new(vec![pair[1]], b).unwrap(),
            });
            if final_relu || i + 2 < widths.len() {
                layers.push(Layer::Relu);
            }
        }
        Network::new(vec![widths[0]], layers).unwrap()
    }

    fn suffix_loss(stages: &[DenseStage], from: usize, a: &[f64], target: &[f64]) -> f64 {
        let mut x = a.to_vec();
        for s in &stages[from + 1..] {
            let z = s.affine(&x);
            x = if s.relu {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z
            };
        }
        x.iter().zip(target).map(|(p, q)| (q - p) * (q - p)).sum()
    }

    #[test]
    fn hessians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-3;
        let mut checked = 0;
        for _ in 0..60 {
            let final_relu = rng.gen_bool(0.5);
            let net = random_chain(&mut rng, &[3, 5, 4, 3], final_relu);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let stack = hessian_stack(&net, &Tensor::new(vec![1, 3], x.clone()).unwrap()).unwrap();
            let stages = dense_stages(&net).unwrap();
            if ann_trace(&stages, &x).iter().flatten().any(|z| z.abs() < 0.05) {
                continue;
            }
            checked += 1;
            let mut acts = Vec::new();
            let mut a = x.clone();
            for s in &stages {
                let z = s.affine(&a);
                a = if s.relu {
                    z.iter().map(|v| v.max(0.0)).collect()
                } else {
                    z
                };
                acts.push(a.clone());
            }
            let target = acts.last().unwrap().clone();
            for (l, act) in acts.iter().enumerate() {
                let w = act.len();
                let hl = stack.hessians[l].data();
                let scale = hl.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                for i in 0..w {
                    for j in 0..w {
                        let eval = |di: f64, dj: f64| {
                            let mut p = act.clone();
                            p[i] += di;
                            p[j] += dj;
                            suffix_loss(&stages, l, &p, &target)
                        };
                        let fd = (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h);
                        assert!(
                            (fd - hl[i * w + j]).abs() <= 1e-4 * scale,
                            "layer {l} ({i},{j}): {fd} vs {}",
                            hl[i * w + j]
                        );
                    }
                }
            }
        }
        assert!(checked >= 10, "only {checked} nets away from ReLU kinks");
    }

    #[test]
    fn output_hessian_is_twice_identity_and_single_layer_is_gram() {
        let net = Network::new(
            vec![2],
            vec![linear(&[&[1.0, 2.0], &[0.5, -1.0], &[0.0, 3.0]], &[0.0; 3])],
        )
        .unwrap();
        let stack = hessian_stack(&net, &Tensor::vector(vec![0.3, 0.4])).unwrap();
        let h = stack.hessians[0].data();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(h[i * 3 + j], if i == j { 2.0 } else { 0.0 });
            }
        }
        let net = Network::new(
            vec![2],
            vec![
                linear(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]),
                Layer::Relu,
                linear(&[&[1.0, 2.0], &[0.5, -1.0], &[0.0, 3.0]], &[0.0; 3]),
            ],
        )
        .unwrap();
        let stack = hessian_stack(&net, &Tensor::vector(vec![0.3, 0.4])).unwrap();
        let w = [[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]];
        let h = stack.hessians[0].data();
        for i in 0..2 {
            for j in 0..2 {
                let gram: f64 = (0..3).map(|r| w[r][i] * w[r][j]).sum();
                assert!((h[i * 2 + j] - 2.0 * gram).abs() < 1e-12);
            }
        }
    }

    fn masked_net(scale: f64) -> Network {
        Network::new(
            vec![2],
            vec![
                linear(&[&[1.0, 0.5], &[0.3, 1.0]], &[0.0, 0.0]),
                Layer::Relu,
                linear(&[&[1.0, 1.0], &[-scale, -scale], &[0.5, -0.5]], &[0.0, 0.0, 0.0]),
                Layer::Relu,
                linear(&[&[1.0, 0.2, 0.3], &[0.4, 1.0, -0.6]], &[0.0, 0.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn inactive_unit_drops_out_of_the_recursion() {
        let x = Tensor::vector(vec![0.5, 0.5]);
        let stack = hessian_stack(&masked_net(1.0), &x).unwrap();
        assert_eq!(stack.masks[1], vec![1.0, 0.0, 1.0]);
        let h = stack.hessians[1].data();
        let b = &stack.masks[1];
        for i in 0..3 {
            for j in 0..3 {
                let masked = b[i] * h[i * 3 + j] * b[j];
                if i == 1 || j == 1 {
                    assert_eq!(masked, 0.0);
                }
            }
        }
        let other = hessian_stack(&masked_net(1.7), &x).unwrap();
        assert_eq!(stack.hessians[0], other.hessians[0]);
    }

    #[test]
    fn hessians_are_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let net = random_chain(&mut rng, &[4, 6, 5, 3], true);
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let stack = hessian_stack(&net, &Tensor::vector(x)).unwrap();
            for h in &stack.hessians {
                let w = h.shape()[0];
                for i in 0..w {
                    for j in 0..w {
                        assert!((h.data()[i * w + j] - h.data()[j * w + i]).abs() <= 1e-8);
                    }
                }
                for _ in 0..10 {
                    let e: Vec<f64> = (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    assert!(quadratic_form(h, &e) >= -1e-8);
                }
            }
        }
    }

    #[test]
    fn width_guard_and_conv_rejection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wide = random_chain(&mut rng, &[4, 40, 30], true);
        assert!(hessian_stack(&wide, &Tensor::vector(vec![0.1; 4])).is_err());
        let conv = Network::new(
            vec![1, 3, 3],
            vec![Layer::Conv2d {
                weight: Tensor::full(&[1, 1, 2, 2], 0.5),
                bias: Tensor::zeros(&[1]),
                geometry: crate::tensor::ConvGeometry { stride: 1, padding: 0 },
            }],
        )
        .unwrap();
        let err = hessian_stack(&conv, &Tensor::full(&[1, 3, 3], 0.1)).unwrap_err();
        assert!(err.to_string().contains("unroll_dense"));
        let dense = unroll_dense(&conv).unwrap();
        assert!(hessian_stack(&dense, &Tensor::full(&[1, 9], 0.1)).is_ok());
    }

    #[test]
    fn unrolled_network_matches_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = |rng: &mut ChaCha8Rng, o: usize, i: usize, stride| Layer::Conv2d {
            weight: Tensor::new(
                vec![o, i, 3, 3],
                (0..o * i * 9).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            )
            .unwrap(),
            bias: Tensor::new(vec![o], (0..o).map(|_| rng.gen_range(-0.1..0.1)).collect()).unwrap(),
            geometry: crate::tensor::ConvGeometry { stride, padding: 1 },
        };
        let layers = vec![
            conv(&mut rng, 2, 1, 2),
            Layer::Relu,
            conv(&mut rng, 3, 2, 1),
            Layer::Relu,
            Layer::AvgPool2d { window: 2, stride: 2 },
            Layer::Flatten,
            linear(
                &[
                    &[0.3, -0.2, 0.5, 0.1, 0.0, 0.4, -0.3, 0.2, 0.6, 0.1, -0.1, 0.2],
                    &[0.1; 12],
                ],
                &[0.05, -0.05],
            ),
        ];
        let net = Network::new(vec![1, 8, 8], layers).unwrap();
        let dense = unroll_dense(&net).unwrap();
        assert!(dense
            .layers()
            .iter()
            .all(|l| matches!(l, Layer::Linear { .. } | Layer::Relu)));
        let x = Tensor::new(vec![3, 1, 8, 8], (0..192).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let flat = x.clone().reshape(vec![3, 64]).unwrap();
        let a = net.predict(&x).unwrap();
        let b = dense.predict(&flat).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn bound_with_zero_error_is_zero() {
        let net = Network::new(
            vec![2],
            vec![linear(&[&[0.5, 0.0], &[0.0, 0.25]], &[0.0, 0.0]), Layer::Relu],
        )
        .unwrap();
        let c = check_bound(
            &net,
            &Tensor::vector(vec![1.0, 1.0]),
            4,
            &[Threshold::Layer(1.0)],
            RoundMode::Round,
        )
        .unwrap();
        assert_eq!((c.lhs, c.rhs), (0.0, 0.0));
        assert!(c.holds && c.holds_exact);
    }

    #[test]
    fn single_spiking_layer_bound() {
        let net = Network::new(
            vec![2],
            vec![linear(&[&[0.7, 0.1], &[0.2, 0.6]], &[0.0, 0.0]), Layer::Relu],
        )
        .unwrap();
        let c = check_bound(
            &net,
            &Tensor::vector(vec![0.9, 0.4]),
            3,
            &[Threshold::Layer(1.0)],
            RoundMode::Round,
        )
        .unwrap();
        let dec = decompose_chain(
            &net,
            &Tensor::vector(vec![0.9, 0.4]),
            3,
            &[Threshold::Layer(1.0)],
            RoundMode::Round,
        )
        .unwrap();
        let ec = dec.layers[0].activation.sq_norm();
        assert!(ec > 0.0);
        assert!((c.rhs - 4.0 * ec).abs() < 1e-12);
        assert!((c.lhs - 2.0 * ec).abs() < 1e-12);
        assert!(c.holds);
    }

    #[test]
    fn random_trials_hold_and_exact_violations_need_crossings() {
        let trials = BoundTrials {
            trials: 300,
            ..Default::default()
        }
        .run()
        .unwrap();
        for t in &trials {
            assert!(t.check.holds, "trial {}: {} > {}", t.trial, t.check.lhs, t.check.rhs);
            if !t.check.holds_exact {
                assert!(t.check.crossings > 0);
            }
            if t.check.crossings == 0 {
                assert!((t.check.lhs - t.check.lhs_exact).abs() <= 1e-9 * (1.0 + t.check.lhs));
            }
        }
        let again = BoundTrials {
            trials: 300,
            ..Default::default()
        }
        .run()
        .unwrap();
        assert_eq!(trials, again);
    }

    #[test]
    fn energy_of_two_layer_toy() {
        let net = Network::new(
            vec![1],
            vec![
                linear(&[&[1.0], &[0.0]], &[0.0, 0.0]),
                Layer::Relu,
                linear(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]], &[0.0; 3]),
            ],
        )
        .unwrap();
        let snn = SpikingNetwork::convert(&net, 4, vec![Threshold::Layer(1.0)], RoundMode::Floor).unwrap();
        let sim = snn
            .simulate(&Tensor::new(vec![1, 1], vec![0.3]).unwrap(), &SimOptions::default())
            .unwrap();
        assert_eq!(sim.total_spikes(), 1.0);
        let e = estimate_energy(&sim, &net, EnergyCosts::default()).unwrap();
        assert_eq!(e.snn_synaptic_ops, 3.0);
        assert!((e.snn_spiking_energy - 2.7).abs() < 1e-12);
        assert_eq!(e.snn_dense_macs, 8.0);
        assert!((e.snn_dense_energy - 8.0 * 5.5).abs() < 1e-12);
        assert_eq!(e.ann_macs, 8.0);
        assert!((e.ann_energy - 44.0).abs() < 1e-12);
    }

    #[test]
    fn silent_network_costs_only_the_dense_layer() {
        let net = Network::new(
            vec![1],
            vec![
                linear(&[&[-1.0], &[-1.0]], &[0.0, 0.0]),
                Layer::Relu,
                linear(&[&[1.0, 1.0]], &[0.0]),
            ],
        )
        .unwrap();
        let snn = SpikingNetwork::convert(&net, 8, vec![Threshold::Layer(1.0)], RoundMode::Floor).unwrap();
        let sim = snn
            .simulate(
                &Tensor::new(vec![2, 1], vec![0.5, 0.9]).unwrap(),
                &SimOptions::default(),
            )
            .unwrap();
        let e = estimate_energy(&sim, &net, EnergyCosts::default()).unwrap();
        assert_eq!(e.snn_spiking_energy, 0.0);
    }

    #[test]
    fn all_fire_at_one_step_matches_mac_count() {
        let net = Network::new(
            vec![2],
            vec![
                linear(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]], &[0.0; 3]),
                Layer::Relu,
                linear(&[&[1.0, 1.0, 1.0], &[0.5, 0.5, 0.5]], &[0.0, 0.0]),
            ],
        )
        .unwrap();
        let snn = SpikingNetwork::convert(&net, 1, vec![Threshold::Layer(1.0)], RoundMode::Floor).unwrap();
        let sim = snn
            .simulate(
                &Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
                &SimOptions::default(),
            )
            .unwrap();
        assert_eq!(sim.total_spikes(), 3.0);
        let e = estimate_energy(&sim, &net, EnergyCosts::default()).unwrap();
        let spiking_macs = 6.0;
        assert_eq!(e.snn_synaptic_ops, spiking_macs);
        assert!((e.snn_spiking_energy / (spiking_macs * 5.5) - 0.9 / 5.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn energy_grows_with_spikes(scale in 0.0f64..3.0, extra in 0.0f64..1.0) {
            let net = Network::new(
                vec![1],
                vec![linear(&[&[1.0], &[0.5], &[2.0]], &[0.0; 3]), Layer::Relu, linear(&[&[1.0, 1.0, 1.0]], &[0.0])],
            ).unwrap();
            let snn = SpikingNetwork::convert(&net, 8, vec![Threshold::Layer(1.0)], RoundMode::Floor).unwrap();
            let run = |x: f64| {
                let sim = snn.simulate(&Tensor::new(vec![1, 1], vec![x]).unwrap(), &SimOptions::default()).unwrap();
                (sim.total_spikes(), estimate_energy(&sim, &net, EnergyCosts::default()).unwrap().snn_energy)
            };
            let (s1, e1) = run(scale);
            let (s2, e2) = run(scale + extra);
            prop_assert!(s2 >= s1);
            prop_assert!(e2 >= e1);
        }
    }

    #[test]
    fn diagnose_zero_inputs_are_not_applicable() {
        let net = Network::new(
            vec![2],
            vec![
                linear(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]),
                Layer::Relu,
                linear(&[&[1.0, 1.0]], &[0.0]),
            ],
        )
        .unwrap();
        let snn = SpikingNetwork::convert(&net, 8, vec![Threshold::Layer(1.0)], RoundMode::Floor).unwrap();
        let data = Dataset::new(Tensor::zeros(&[4, 2]), None).unwrap();
        let d = diagnose(&net, &snn, &data, EnergyCosts::default()).unwrap();
        assert!(d
            .layers
            .iter()
            .all(|l| l.relative_error.is_none() && l.channel_error.is_none()));
        assert_eq!(d.layers[0].channels_not_applicable, 2);
        assert!(d.to_csv().contains("NA"));
    }

    #[test]
    fn diagnose_splits_observed_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = random_chain(&mut rng, &[3, 6, 5, 2], false);
        let inputs = Tensor::new(vec![16, 3], (0..48).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let trace = net.forward(&inputs).unwrap();
        let th: Vec<Threshold> = [1, 3]
            .iter()
            .map(|&i| Threshold::Layer(trace.layer_output(i).max().unwrap().max(0.1)))
            .collect();
        let snn = SpikingNetwork::convert(&net, 1 << 16, th, RoundMode::Round).unwrap();
        let d = diagnose(&net, &snn, &Dataset::new(inputs, None).unwrap(), EnergyCosts::default()).unwrap();
        for l in &d.layers {
            assert!(l.relative_error.unwrap() < 1e-6, "{l:?}");
        }
    }
}
