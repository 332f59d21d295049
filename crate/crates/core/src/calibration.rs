//! Layer-wise post-conversion calibration.
//!
//! After batch-norm folding and threshold search, affine layers are
//! visited front to back. For each one the ANN output on the calibration
//! batch is compared with the time-averaged output of the spiking network
//! whose earlier layers are already calibrated. The mismatch is then
//! absorbed by the bias (light pipeline) or by the weights and the initial
//! membrane potential (advanced pipeline).

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::{Layer, Network};
use crate::error::{Error, Result};
use crate::snn::{RoundMode, SimOptions, Simulation, SpikingNetwork};
use crate::tensor::{self, channel_spatial_mean, Tensor};
use crate::threshold::{search_threshold, Threshold, ThresholdPolicy, ThresholdSearch};

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub const NAMES: &'static [&'static str] = &[$($text),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::invalid(format!(
                        "unknown {} '{other}' (valid: {})",
                        stringify!($name).to_lowercase(),
                        Self::NAMES.join(", ")
                    ))),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    None,
    Light,
    Advanced,
}

named_enum!(Pipeline { None => "none", Light => "light", Advanced => "advanced" });

/// How the initial potential is derived from the layer error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PotentialMode {
    /// `T·mean_batch(e)`, one value per neuron.
    Elementwise,
    /// `T·μ_c(e)` broadcast over each channel.
    ChannelMean,
}

named_enum!(PotentialMode { Elementwise => "elementwise", ChannelMean => "channel-mean" });

/// Order of the two advanced-pipeline steps inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvancedOrder {
    WeightsThenPotential,
    PotentialThenWeights,
}

named_enum!(AdvancedOrder {
    WeightsThenPotential => "weights-then-potential",
    PotentialThenWeights => "potential-then-weights",
});

/// Optimizer settings for weight calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightCalibration {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Mini-batch size; 0 uses the full calibration set every step.
    pub batch_size: usize,
}

impl Default for WeightCalibration {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 1e-5,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub pipeline: Pipeline,
    /// Samples used to measure errors for bias and potential corrections.
    pub bias_samples: usize,
    /// Samples used for threshold search and weight calibration.
    pub weight_samples: usize,
    pub weights: WeightCalibration,
    pub potential_mode: PotentialMode,
    pub order: AdvancedOrder,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::None,
            bias_samples: 128,
            weight_samples: 1024,
            weights: WeightCalibration::default(),
            potential_mode: PotentialMode::Elementwise,
            order: AdvancedOrder::WeightsThenPotential,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn with_pipeline(pipeline: Pipeline) -> Self {
        Self {
            pipeline,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bias_samples == 0 || self.weight_samples == 0 {
            return Err(Error::invalid("calibration sample counts must be at least 1"));
        }
        let w = &self.weights;
        if !(w.lr >= 0.0 && w.lr.is_finite()) || !(0.0..1.0).contains(&w.momentum) {
            return Err(Error::invalid(
                "weight calibration needs a finite lr >= 0 and momentum in [0, 1)",
            ));
        }
        Ok(())
    }
}

/// `b[c] + μ_c(e)`: the bias shifted by the channel mean of the error.
pub fn calibrate_bias(bias: &Tensor, error: &Tensor) -> Result<Tensor> {
    let mu = channel_spatial_mean(error)?;
    if mu.len() != bias.len() {
        return Err(Error::shape("calibrate_bias", bias.shape(), error.shape()));
    }
    bias.add(&mu)
}

/// Initial potential `T·e` for a batch of layer errors `N×…`; returns a
/// tensor of the per-sample shape.
pub fn calibrate_potential(error: &Tensor, time_steps: usize, mode: PotentialMode) -> Result<Tensor> {
    if error.rank() < 2 || error.batch_size() == 0 {
        return Err(Error::invalid(format!(
            "calibrate_potential expects a non-empty batch, got {:?}",
            error.shape()
        )));
    }
    let t = time_steps as f64;
    match mode {
        PotentialMode::Elementwise => Ok(error.batch_mean()?.scale(t)),
        PotentialMode::ChannelMean => {
            let mu = channel_spatial_mean(error)?;
            let stride = error.channel_stride();
            let data = (0..error.sample_len()).map(|i| t * mu.data()[i / stride]).collect();
            Tensor::new(error.sample_shape().to_vec(), data)
        }
    }
}

/// The expected-output model of one affine layer under constant-rate
/// input: `(V/T)·clip(floor((T·z + v0)/V), 0, T)` for spiking layers
/// (`z` includes any rounding shift), `z + v0/T` for the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuantizer {
    pub time_steps: usize,
    /// Per-neuron thresholds; `None` for the non-spiking output layer.
    pub thresholds: Option<Vec<f64>>,
    /// Per-neuron initial potential.
    pub potential: Option<Vec<f64>>,
}

impl LayerQuantizer {
    /// Output and straight-through derivative for a batch of `z`.
    pub fn apply(&self, z: &Tensor) -> (Tensor, Tensor) {
        let t = self.time_steps as f64;
        let per = z.sample_len().max(1);
        let mut q = z.clone();
        let mut d = Tensor::full(z.shape(), 1.0);
        for (i, (qv, dv)) in q.data_mut().iter_mut().zip(d.data_mut()).enumerate() {
            let v0 = self.potential.as_ref().map_or(0.0, |p| p[i % per]);
            match &self.thresholds {
                None => *qv += v0 / t,
                Some(th) => {
                    let v = th[i % per];
                    let k = ((t * *qv + v0) / v).floor();
                    if !(0.0..=t).contains(&k) {
                        *dv = 0.0;
                    }
                    *qv = v / t * k.clamp(0.0, t);
                }
            }
        }
        (q, d)
    }
}

/// Result of [`calibrate_weights`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightCalibrationLog {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    /// The final objective exceeded the initial one; parameters reverted.
    pub reverted: bool,
    /// Aborted by the divergence guard; parameters reverted.
    pub diverged: bool,
}

fn affine_forward(layer: &Layer, x: &Tensor) -> Result<Tensor> {
    layer.forward(x)
}

fn affine_param_grads(layer: &Layer, x: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    match layer {
        Layer::Linear { weight, .. } => {
            let (gw, gb, _) = tensor::linear_backward(x, weight, g)?;
            Ok((gw, gb))
        }
        Layer::Conv2d { weight, geometry, .. } => tensor::conv2d_param_grads(x, weight, g, *geometry),
        _ => Err(Error::invalid("weight calibration needs a linear or conv2d layer")),
    }
}

/// Mean over samples of `||target − q(layer(x))||²` and, on request, its
/// straight-through gradient with respect to weights and bias.
pub fn weight_objective(
    layer: &Layer,
    input: &Tensor,
    target: &Tensor,
    quant: &LayerQuantizer,
    with_grad: bool,
) -> Result<(f64, Option<(Tensor, Tensor)>)> {
    let z = affine_forward(layer, input)?;
    if z.shape() != target.shape() {
        return Err(Error::shape("weight calibration target", target.shape(), z.shape()));
    }
    let (q, ste) = quant.apply(&z);
    let diff = q.sub(target)?;
    let n = input.batch_size().max(1) as f64;
    let objective = diff.sq_norm() / n;
    if !with_grad {
        return Ok((objective, None));
    }
    let g = diff.zip_map(&ste, |d, s| 2.0 * d * s / n)?;
    Ok((objective, Some(affine_param_grads(layer, input, &g)?)))
}

/// Optimizes the weights and bias of `layer` so that the quantized output
/// on `input` matches `target`: momentum SGD with cosine step decay and
/// straight-through gradients. Returns the updated layer.
pub fn calibrate_weights(
    layer: &Layer,
    input: &Tensor,
    target: &Tensor,
    quant: &LayerQuantizer,
    cfg: &WeightCalibration,
    seed: u64,
) -> Result<(Layer, WeightCalibrationLog)> {
    if !layer.is_affine() {
        return Err(Error::invalid("weight calibration needs a linear or conv2d layer"));
    }
    let n = input.batch_size();
    if n == 0 {
        return Err(Error::invalid("weight calibration on an empty batch"));
    }
    let (initial, _) = weight_objective(layer, input, target, quant, false)?;
    let mut log = WeightCalibrationLog {
        initial_objective: initial,
        final_objective: initial,
        iterations: 0,
        reverted: false,
        diverged: false,
    };
    if cfg.iterations == 0 {
        return Ok((layer.clone(), log));
    }
    let mut current = layer.clone();
    let (w0, b0) = layer.affine().unwrap();
    let mut vel_w = Tensor::zeros(w0.shape());
    let mut vel_b = Tensor::zeros(b0.shape());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = cfg.batch_size == 0 || cfg.batch_size >= n;
    for it in 0..cfg.iterations {
        let (x, y) = if full {
            (input.clone(), target.clone())
        } else {
            let mut idx = index::sample(&mut rng, n, cfg.batch_size).into_vec();
            idx.sort_unstable();
            (input.select_samples(&idx), target.select_samples(&idx))
        };
        let (obj, grads) = weight_objective(&current, &x, &y, quant, true)?;
        if !obj.is_finite() || obj > 10.0 * initial.max(f64::MIN_POSITIVE) {
            log::warn!(
                "weight calibration diverged at iteration {it} (objective {obj:.4e}); keeping original parameters"
            );
            log.diverged = true;
            log.iterations = it;
            return Ok((layer.clone(), log));
        }
        let (gw, gb) = grads.unwrap();
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / cfg.iterations as f64).cos());
        let (w, b) = current.affine_mut().unwrap();
        for (p, (v, g)) in [(w, (&mut vel_w, &gw)), (b, (&mut vel_b, &gb))] {
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = cfg.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
    log.iterations = cfg.iterations;
    let (final_obj, _) = weight_objective(&current, input, target, quant, false)?;
    if final_obj > initial {
        log::warn!("weight calibration did not reduce the objective ({initial:.4e} -> {final_obj:.4e}); keeping original parameters");
        log.reverted = true;
        return Ok((layer.clone(), log));
    }
    log.final_objective = final_obj;
    Ok((current, log))
}

/// One line of the calibration log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerLog {
    /// Index of the affine layer in the network.
    pub layer: usize,
    pub spiking: bool,
    pub threshold: Option<Threshold>,
    /// Mean squared ANN−SNN output difference before and after this
    /// layer's calibration, on the bias batch.
    pub initial_mse: f64,
    pub final_mse: f64,
    pub bias_correction_norm: f64,
    pub potential_norm: f64,
    pub weight_change_norm: f64,
    pub weight_calibration: Option<WeightCalibrationLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub pipeline: Pipeline,
    pub time_steps: usize,
    pub layers: Vec<LayerLog>,
}

impl CalibrationReport {
    /// One JSON object per layer, newline-terminated.
    pub fn to_json_lines(&self) -> String {
        self.layers
            .iter()
            .map(|l| serde_json::to_string(l).expect("serializable log") + "\n")
            .collect()
    }
}

/// Tensor entering affine entry `k` of `snn` for a batch: the raw input for
/// `k = 0`, otherwise the previous site's average spike output pushed
/// through the pooling/flatten layers in between.
pub fn entry_input(snn: &SpikingNetwork, k: usize, inputs: &Tensor, sim: Option<&Simulation>) -> Result<Tensor> {
    let affine = snn.affine_layers()[k];
    let (start, mut x) = if k == 0 {
        (0, inputs.clone())
    } else {
        let sim = sim.ok_or_else(|| Error::invalid("entry_input needs a simulation for k > 0"))?;
        (snn.sites()[k - 1].relu + 1, sim.site_outputs[k - 1].clone())
    };
    for i in start..affine {
        x = snn.network().layer(i).forward(&x).map_err(|e| e.at_layer(i))?;
    }
    Ok(x)
}

/// ANN reference output of affine entry `k` (post-ReLU for sites).
pub fn ann_entry_outputs(base: &Network, snn: &SpikingNetwork, inputs: &Tensor) -> Result<Vec<Tensor>> {
    let trace = base.forward(inputs)?;
    let mut out: Vec<Tensor> = snn.sites().iter().map(|s| trace.layer_output(s.relu).clone()).collect();
    out.push(trace.output().clone());
    Ok(out)
}

fn snn_entry_output(snn: &SpikingNetwork, k: usize, inputs: &Tensor) -> Result<Tensor> {
    let stop = (k < snn.sites().len()).then_some(k);
    let sim = snn.simulate(
        inputs,
        &SimOptions {
            stop_after_site: stop,
            ..Default::default()
        },
    )?;
    Ok(match stop {
        Some(k) => sim.site_outputs[k].clone(),
        None => sim.output.expect("full simulation has an output"),
    })
}

fn quantizer_for(snn: &SpikingNetwork, k: usize) -> LayerQuantizer {
    let shape = snn.affine_shape(k);
    let neurons: usize = shape.iter().product();
    let thresholds = snn.sites().get(k).map(|site| {
        let per = neurons / site.channels();
        let v = snn.threshold(k).per_channel(site.channels());
        (0..neurons).map(|i| v[i / per]).collect()
    });
    LayerQuantizer {
        time_steps: snn.time_steps(),
        thresholds,
        potential: snn.potential(k).map(|p| p.data().to_vec()),
    }
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.sq_norm() / a.len().max(1) as f64)
}

/// Runs the configured pipeline over every affine layer of `snn`, front
/// to back. `base` is the folded ANN the SNN was converted from; `calib`
/// is the calibration set (its first `bias_samples` samples measure
/// errors, its first `weight_samples` drive weight calibration).
pub fn run_pipeline(
    base: &Network,
    snn: &SpikingNetwork,
    calib: &Tensor,
    cfg: &CalibrationConfig,
) -> Result<(SpikingNetwork, CalibrationReport)> {
    cfg.validate()?;
    if calib.batch_size() == 0 {
        return Err(Error::invalid("empty calibration set"));
    }
    let mut snn = snn.clone();
    let bias_batch = calib.take_samples(cfg.bias_samples);
    let weight_batch = calib.take_samples(cfg.weight_samples);
    let ann_bias = ann_entry_outputs(base, &snn, &bias_batch)?;
    let ann_weight = if cfg.pipeline == Pipeline::Advanced {
        Some(ann_entry_outputs(base, &snn, &weight_batch)?)
    } else {
        None
    };
    let t = snn.time_steps();
    let mut layers = Vec::new();

    for (k, &layer_idx) in snn.affine_layers().iter().enumerate() {
        let spiking = k < snn.sites().len();
        let at = |e: Error| e.at_layer(layer_idx);
        let target = &ann_bias[k];
        let error_now =
            |snn: &SpikingNetwork| -> Result<Tensor> { target.sub(&snn_entry_output(snn, k, &bias_batch)?) };
        let e0 = error_now(&snn).map_err(at)?;
        let initial_mse = e0.sq_norm() / e0.len().max(1) as f64;
        let mut log = LayerLog {
            layer: layer_idx,
            spiking,
            threshold: spiking.then(|| snn.threshold(k).clone()),
            initial_mse,
            final_mse: initial_mse,
            bias_correction_norm: 0.0,
            potential_norm: 0.0,
            weight_change_norm: 0.0,
            weight_calibration: None,
        };

        match cfg.pipeline {
            Pipeline::None => {}
            Pipeline::Light => {
                let delta = channel_spatial_mean(&e0).map_err(at)?;
                snn.add_bias(k, delta.data());
                log.bias_correction_norm = delta.sq_norm().sqrt();
            }
            Pipeline::Advanced => {
                let potential = |snn: &mut SpikingNetwork, e: &Tensor| -> Result<f64> {
                    let v0 = calibrate_potential(e, t, cfg.potential_mode)?;
                    let norm = v0.sq_norm().sqrt();
                    let merged = match snn.potential(k) {
                        Some(old) => old.add(&v0)?,
                        None => v0,
                    };
                    snn.set_potential(k, Some(merged))?;
                    Ok(norm)
                };
                if cfg.order == AdvancedOrder::PotentialThenWeights {
                    log.potential_norm = potential(&mut snn, &e0).map_err(at)?;
                }
                let prefix = if k == 0 {
                    None
                } else {
                    Some(
                        snn.simulate(
                            &weight_batch,
                            &SimOptions {
                                stop_after_site: Some(k - 1),
                                ..Default::default()
                            },
                        )
                        .map_err(at)?,
                    )
                };
                let input = entry_input(&snn, k, &weight_batch, prefix.as_ref()).map_err(at)?;
                let quant = quantizer_for(&snn, k);
                let seed = cfg.seed ^ ((layer_idx as u64 + 1) << 32);
                let old = snn.network().layer(layer_idx).clone();
                let (new, wlog) = calibrate_weights(
                    &old,
                    &input,
                    &ann_weight.as_ref().unwrap()[k],
                    &quant,
                    &cfg.weights,
                    seed,
                )
                .map_err(at)?;
                let (ow, ob) = old.affine().unwrap();
                let (nw, nb) = new.affine().unwrap();
                log.weight_change_norm = (nw.sub(ow)?.sq_norm() + nb.sub(ob)?.sq_norm()).sqrt();
                *snn.network_mut().layer_mut(layer_idx) = new;
                log.weight_calibration = Some(wlog);
                if cfg.order == AdvancedOrder::WeightsThenPotential {
                    let e1 = error_now(&snn).map_err(at)?;
                    log.potential_norm = potential(&mut snn, &e1).map_err(at)?;
                }
            }
        }
        if cfg.pipeline != Pipeline::None {
            log.final_mse = mse(target, &snn_entry_output(&snn, k, &bias_batch).map_err(at)?)?;
        }
        log::info!(
            "layer {layer_idx}: mse {:.4e} -> {:.4e}",
            log.initial_mse,
            log.final_mse
        );
        layers.push(log);
    }
    Ok((
        snn,
        CalibrationReport {
            pipeline: cfg.pipeline,
            time_steps: t,
            layers,
        },
    ))
}

/// Output of [`convert`].
#[derive(Debug, Clone)]
pub struct Conversion {
    /// The batch-norm-folded ANN.
    pub folded: Network,
    pub snn: SpikingNetwork,
    pub thresholds: Vec<ThresholdSearch>,
    pub report: CalibrationReport,
}

/// Folds batch norm, searches thresholds on the ANN pre-activations of the
/// first `weight_samples` calibration samples, converts and calibrates.
pub fn convert(
    net: &Network,
    calib: &Tensor,
    time_steps: usize,
    policy: &ThresholdPolicy,
    round_mode: RoundMode,
    cfg: &CalibrationConfig,
) -> Result<Conversion> {
    cfg.validate()?;
    let folded = net.fold_bn()?;
    let (sites, _) = crate::snn::spiking_sites(&folded)?;
    let set = calib.take_samples(cfg.weight_samples);
    if set.batch_size() == 0 {
        return Err(Error::invalid("empty calibration set"));
    }
    let trace = folded.forward(&set)?;
    let thresholds: Vec<ThresholdSearch> = sites
        .iter()
        .map(|s| search_threshold(trace.layer_output(s.affine), time_steps, policy).map_err(|e| e.at_layer(s.affine)))
        .collect::<Result<_>>()?;
    let snn = SpikingNetwork::convert(
        &folded,
        time_steps,
        thresholds.iter().map(|t| t.threshold.clone()).collect(),
        round_mode,
    )?;
    let (snn, report) = run_pipeline(&folded, &snn, calib, cfg)?;
    Ok(Conversion {
        folded,
        snn,
        thresholds,
        report,
    })
}
