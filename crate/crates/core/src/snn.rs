//! Integrate-and-fire simulation of a converted network.
//!
//! Every affine layer followed by a ReLU becomes a layer of IF neurons
//! ("spiking site") with soft reset. The first affine layer receives the
//! analog input at every step; the final affine layer never spikes and
//! reports its time-averaged membrane input. Pooling and flattening act
//! linearly on the spikes of each step.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::{Layer, Network};
use crate::error::{Error, Result};
use crate::tensor::{avgpool_plane, pool_extent, ConvDims, Tensor};
use crate::threshold::Threshold;

/// How the ANN activation is approximated: plain floor, or rounding via a
/// bias shift of `V/(2T)` on every spiking layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundMode {
    Floor,
    Round,
}

impl RoundMode {
    pub fn name(self) -> &'static str {
        match self {
            RoundMode::Floor => "floor",
            RoundMode::Round => "round",
        }
    }
}

impl fmt::Display for RoundMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoundMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "floor" => Ok(RoundMode::Floor),
            "round" => Ok(RoundMode::Round),
            other => Err(Error::invalid(format!(
                "unknown round mode '{other}' (valid: floor, round)"
            ))),
        }
    }
}

/// A layer of IF neurons: the affine layer at `affine` and its ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Site {
    pub affine: usize,
    pub relu: usize,
    /// Per-sample shape of the affine output.
    pub shape: Vec<usize>,
}

impl Site {
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn neurons(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Checks that `net` is a convertible chain and returns its spiking sites
/// plus the index of the output layer.
pub fn spiking_sites(net: &Network) -> Result<(Vec<Site>, usize)> {
    if net.has_batchnorm() {
        return Err(Error::Unsupported(
            "batchnorm layers must be folded before conversion".into(),
        ));
    }
    let shapes = net.shapes()?;
    let affine = net.affine_indices();
    let Some(&output) = affine.last() else {
        return Err(Error::Unsupported("network has no linear or conv2d layer".into()));
    };
    if output + 1 != net.len() {
        return Err(Error::Unsupported(
            "the last layer must be linear or conv2d (the non-spiking output layer)".into(),
        )
        .at_layer(net.len() - 1));
    }
    for (i, layer) in net.layers().iter().enumerate() {
        if matches!(layer, Layer::Relu) && (i == 0 || !net.layer(i - 1).is_affine()) {
            return Err(Error::Unsupported("relu must directly follow a linear or conv2d layer".into()).at_layer(i));
        }
    }
    let mut sites = Vec::new();
    for &a in &affine[..affine.len() - 1] {
        if !matches!(net.layers().get(a + 1), Some(Layer::Relu)) {
            return Err(
                Error::Unsupported("every hidden linear or conv2d layer must be followed by relu".into()).at_layer(a),
            );
        }
        sites.push(Site {
            affine: a,
            relu: a + 1,
            shape: shapes[a + 1].clone(),
        });
    }
    Ok((sites, output))
}

/// A converted network ready for simulation.
///
/// The wrapped network holds the effective parameters: folded weights,
/// biases including the rounding shift and any calibration update.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikingNetwork {
    net: Network,
    time_steps: usize,
    round_mode: RoundMode,
    sites: Vec<Site>,
    output_layer: usize,
    thresholds: Vec<Threshold>,
    /// One entry per affine layer: the sites in order, then the output.
    potentials: Vec<Option<Tensor>>,
}

impl SpikingNetwork {
    /// Converts a batch-norm-free ANN; with [`RoundMode::Round`] every
    /// spiking layer's bias is shifted by `V/(2T)`.
    pub fn convert(
        folded: &Network,
        time_steps: usize,
        thresholds: Vec<Threshold>,
        round_mode: RoundMode,
    ) -> Result<Self> {
        let n_sites = spiking_sites(folded)?.0.len();
        let mut snn = Self::from_parts(
            folded.clone(),
            time_steps,
            round_mode,
            thresholds,
            vec![None; n_sites + 1],
        )?;
        for k in 0..n_sites {
            let shift = snn.round_shift(k);
            snn.add_bias(k, &shift);
        }
        Ok(snn)
    }

    /// Assembles a network whose biases are already effective.
    pub fn from_parts(
        net: Network,
        time_steps: usize,
        round_mode: RoundMode,
        thresholds: Vec<Threshold>,
        potentials: Vec<Option<Tensor>>,
    ) -> Result<Self> {
        if time_steps == 0 {
            return Err(Error::invalid("time steps must be at least 1"));
        }
        let (sites, output_layer) = spiking_sites(&net)?;
        if thresholds.len() != sites.len() {
            return Err(Error::invalid(format!(
                "{} thresholds for {} spiking layers",
                thresholds.len(),
                sites.len()
            )));
        }
        for (site, th) in sites.iter().zip(&thresholds) {
            th.validate(site.channels()).map_err(|e| e.at_layer(site.affine))?;
        }
        if potentials.len() != sites.len() + 1 {
            return Err(Error::invalid(format!(
                "{} initial-potential entries for {} affine layers",
                potentials.len(),
                sites.len() + 1
            )));
        }
        let mut snn = Self {
            net,
            time_steps,
            round_mode,
            sites,
            output_layer,
            thresholds,
            potentials: vec![None; potentials.len()],
        };
        for (k, p) in potentials.into_iter().enumerate() {
            snn.set_potential(k, p)?;
        }
        Ok(snn)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Mutable access to the effective network. Callers must keep shapes.
    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn round_mode(&self) -> RoundMode {
        self.round_mode
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn output_layer(&self) -> usize {
        self.output_layer
    }

    /// Affine layer indices: the sites in order, then the output layer.
    pub fn affine_layers(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.sites.iter().map(|s| s.affine).collect();
        v.push(self.output_layer);
        v
    }

    /// Per-sample output shape of affine entry `k` (see [`Self::affine_layers`]).
    pub fn affine_shape(&self, k: usize) -> Vec<usize> {
        match self.sites.get(k) {
            Some(site) => site.shape.clone(),
            None => self.net.output_shape(),
        }
    }

    pub fn thresholds(&self) -> &[Threshold] {
        &self.thresholds
    }

    pub fn threshold(&self, site: usize) -> &Threshold {
        &self.thresholds[site]
    }

    pub fn potentials(&self) -> &[Option<Tensor>] {
        &self.potentials
    }

    pub fn potential(&self, k: usize) -> Option<&Tensor> {
        self.potentials[k].as_ref()
    }

    /// Sets the initial membrane potential of affine entry `k`; it must
    /// have that layer's per-sample output shape.
    pub fn set_potential(&mut self, k: usize, v0: Option<Tensor>) -> Result<()> {
        if k >= self.potentials.len() {
            return Err(Error::invalid(format!("no affine layer entry {k}")));
        }
        if let Some(t) = &v0 {
            let shape = self.affine_shape(k);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("initial potential", t.shape(), &shape));
            }
            if !t.is_finite() {
                return Err(Error::Numeric("non-finite initial potential".into()));
            }
        }
        self.potentials[k] = v0;
        Ok(())
    }

    /// Per-channel bias shift `V/(2T)` that the rounding mode adds to site `k`.
    pub fn round_shift(&self, site: usize) -> Vec<f64> {
        let channels = self.sites[site].channels();
        match self.round_mode {
            RoundMode::Floor => vec![0.0; channels],
            RoundMode::Round => self.thresholds[site]
                .per_channel(channels)
                .into_iter()
                .map(|v| v / (2.0 * self.time_steps as f64))
                .collect(),
        }
    }

    /// Adds a per-channel delta to the bias of affine entry `k`.
    pub fn add_bias(&mut self, k: usize, delta: &[f64]) {
        let layer = self.affine_layers()[k];
        let (_, bias) = self.net.layer_mut(layer).affine_mut().expect("affine layer");
        for (b, d) in bias.data_mut().iter_mut().zip(delta) {
            *b += d;
        }
    }

    /// The ANN this network corresponds to: its parameters with the rounding
    /// shift removed again.
    pub fn source_network(&self) -> Network {
        let mut out = self.clone();
        for k in 0..self.sites.len() {
            let shift: Vec<f64> = self.round_shift(k).iter().map(|v| -v).collect();
            out.add_bias(k, &shift);
        }
        out.net
    }

    /// Same network at a different number of time steps; the rounding
    /// shift is re-derived, potentials are kept as they are.
    pub fn with_time_steps(&self, time_steps: usize) -> Result<Self> {
        if time_steps == 0 {
            return Err(Error::invalid("time steps must be at least 1"));
        }
        let mut out = self.clone();
        for k in 0..self.sites.len() {
            let old = self.round_shift(k);
            out.time_steps = time_steps;
            let new = out.round_shift(k);
            let delta: Vec<f64> = new.iter().zip(&old).map(|(n, o)| n - o).collect();
            out.add_bias(k, &delta);
        }
        out.time_steps = time_steps;
        Ok(out)
    }

    /// Equivalent network with unit thresholds: each site's weights, bias
    /// and potential are divided by its threshold and the consumer's
    /// matching input weights multiplied by it. Spike counts are unchanged.
    pub fn normalize_weights(&self) -> Result<Self> {
        let mut out = self.clone();
        let shapes = self.net.shapes()?;
        let affine = self.affine_layers();
        for (k, site) in self.sites.iter().enumerate() {
            let channels = site.channels();
            let v = self.thresholds[k].per_channel(channels);
            {
                let (w, b) = out.net.layer_mut(site.affine).affine_mut().expect("affine");
                let per_out = w.len() / channels;
                for c in 0..channels {
                    w.data_mut()[c * per_out..(c + 1) * per_out]
                        .iter_mut()
                        .for_each(|x| *x /= v[c]);
                    b.data_mut()[c] /= v[c];
                }
            }
            if let Some(p) = out.potentials[k].as_mut() {
                let stride = p.len() / channels;
                for (i, x) in p.data_mut().iter_mut().enumerate() {
                    *x /= v[i / stride];
                }
            }
            let next = affine[k + 1];
            let in_len: usize = shapes[next].iter().product();
            let per_channel = in_len / channels;
            let (w, _) = out.net.layer_mut(next).affine_mut().expect("affine");
            match w.rank() {
                4 => {
                    let (o, ci) = (w.shape()[0], w.shape()[1]);
                    let taps = w.shape()[2] * w.shape()[3];
                    for oo in 0..o {
                        for c in 0..ci {
                            let base = (oo * ci + c) * taps;
                            w.data_mut()[base..base + taps].iter_mut().for_each(|x| *x *= v[c]);
                        }
                    }
                }
                _ => {
                    let cols = w.shape()[1];
                    for (i, x) in w.data_mut().iter_mut().enumerate() {
                        *x *= v[(i % cols) / per_channel];
                    }
                }
            }
            out.thresholds[k] = match &self.thresholds[k] {
                Threshold::Layer(_) => Threshold::Layer(1.0),
                Threshold::Channel(c) => Threshold::Channel(vec![1.0; c.len()]),
            };
        }
        Ok(out)
    }

    /// Runs the IF dynamics for every sample of `inputs` (`N×…`).
    pub fn simulate(&self, inputs: &Tensor, opts: &SimOptions) -> Result<Simulation> {
        if inputs.rank() == 0 || inputs.sample_shape() != self.net.input_shape() {
            return Err(Error::shape("snn input", inputs.shape(), self.net.input_shape()));
        }
        let last_site = match opts.stop_after_site {
            Some(k) if k >= self.sites.len() => {
                return Err(Error::invalid(format!("no spiking layer {k}")));
            }
            Some(k) => Some(k),
            None => None,
        };
        let plan = Plan::build(self, last_site)?;
        let n = inputs.batch_size();
        let per_sample: Vec<SampleRun> = (0..n)
            .into_par_iter()
            .map(|s| plan.run(self, inputs.sample(s), opts.record_raster))
            .collect::<Result<_>>()?;
        Ok(plan.collect(self, per_sample, n))
    }
}

/// What [`SpikingNetwork::simulate`] records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// Keep the per-step spikes of every site.
    pub record_raster: bool,
    /// Stop after this site; no output is produced.
    pub stop_after_site: Option<usize>,
}

/// Everything recorded by one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub time_steps: usize,
    pub samples: usize,
    /// `(v0 + Σ_t input)/T` of the output layer, `N×…`; absent when the
    /// run stopped early.
    pub output: Option<Tensor>,
    /// Spike counts per simulated site, `N×…`.
    pub spike_counts: Vec<Tensor>,
    /// Average output `m·V/T` per simulated site, `N×…`.
    pub site_outputs: Vec<Tensor>,
    /// Membrane potentials after the last step, per simulated site.
    pub final_potentials: Vec<Tensor>,
    /// Per-step spike indicators per site, `N×T×…`.
    pub rasters: Option<Vec<Tensor>>,
    /// Event-driven synaptic additions per affine entry (sites, then
    /// output), summed over samples and steps. The first layer is dense
    /// and counted in [`Self::dense_macs`] instead.
    pub synaptic_ops: Vec<u64>,
    /// Multiply-accumulates of the first layer, summed over samples and steps.
    pub dense_macs: u64,
}

impl Simulation {
    /// Mean firing rate (spikes per neuron per step) of site `k`.
    pub fn firing_rate(&self, k: usize) -> f64 {
        let counts = &self.spike_counts[k];
        counts.sum() / (counts.len().max(1) * self.time_steps) as f64
    }

    /// Total spikes emitted by all recorded sites.
    pub fn total_spikes(&self) -> f64 {
        self.spike_counts.iter().map(Tensor::sum).sum()
    }
}

/// Fan-out lists: input `j` drives `targets[offsets[j]..offsets[j+1]]`.
#[derive(Debug)]
struct Synapses {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<f64>,
}

impl Synapses {
    fn build(layer: &Layer, in_shape: &[usize]) -> Result<Self> {
        let mut offsets = vec![0];
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        match layer {
            Layer::Linear { weight, .. } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                for j in 0..inp {
                    for o in 0..out {
                        targets.push(o as u32);
                        weights.push(weight.data()[o * inp + j]);
                    }
                    offsets.push(targets.len());
                }
            }
            Layer::Conv2d { weight, geometry, .. } => {
                let d = ConvDims::new(in_shape, weight.shape(), *geometry)?;
                let (s, p) = (d.geo.stride, d.geo.padding);
                let hits = |i: usize, k: usize, out: usize| {
                    (0..k).filter_map(move |t| {
                        let q = i + p;
                        (q >= t && (q - t) % s == 0 && (q - t) / s < out).then(|| (t, (q - t) / s))
                    })
                };
                for ci in 0..d.c {
                    for iy in 0..d.h {
                        for ix in 0..d.w {
                            for o in 0..d.o {
                                for (ky, oy) in hits(iy, d.kh, d.ho) {
                                    for (kx, ox) in hits(ix, d.kw, d.wo) {
                                        targets.push(((o * d.ho + oy) * d.wo + ox) as u32);
                                        weights.push(weight.data()[((o * d.c + ci) * d.kh + ky) * d.kw + kx]);
                                    }
                                }
                            }
                            offsets.push(targets.len());
                        }
                    }
                }
            }
            _ => unreachable!("synapses of a non-affine layer"),
        }
        Ok(Self {
            offsets,
            targets,
            weights,
        })
    }
}

/// Per-stage wiring: the passive layers before an affine layer, the
/// affine layer and its neurons.
#[derive(Debug)]
struct Stage {
    passive: Vec<(usize, Vec<usize>)>,
    affine: usize,
    synapses: Option<Synapses>,
    bias: Vec<f64>,
    /// Per-neuron threshold; empty for the output layer.
    threshold: Vec<f64>,
    v0: Option<Vec<f64>>,
    neurons: usize,
    first_macs: u64,
}

#[derive(Debug)]
struct Plan {
    stages: Vec<Stage>,
    site_shapes: Vec<Vec<usize>>,
    has_output: bool,
}

struct SampleRun {
    counts: Vec<Vec<u32>>,
    potentials: Vec<Vec<f64>>,
    raster: Vec<Vec<u8>>,
    output: Vec<f64>,
    ops: Vec<u64>,
}

fn expand_channels(values: &[f64], neurons: usize) -> Vec<f64> {
    let per = neurons / values.len();
    (0..neurons).map(|i| values[i / per]).collect()
}

/// Applies a flatten or average-pool layer to one sample.
fn passive_forward(layer: &Layer, x: &[f64], in_shape: &[usize]) -> Result<Vec<f64>> {
    match layer {
        Layer::Flatten => Ok(x.to_vec()),
        Layer::AvgPool2d { window, stride } => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let ho = pool_extent(h, *window, *stride)?;
            let wo = pool_extent(w, *window, *stride)?;
            let mut out = vec![0.0; c * ho * wo];
            for (ch, plane) in x.chunks(h * w).enumerate() {
                avgpool_plane(
                    plane,
                    &mut out[ch * ho * wo..(ch + 1) * ho * wo],
                    h,
                    w,
                    ho,
                    wo,
                    *window,
                    *stride,
                );
            }
            Ok(out)
        }
        other => Err(Error::Unsupported(format!("{} between spiking layers", other.kind()))),
    }
}

impl Plan {
    fn build(snn: &SpikingNetwork, last_site: Option<usize>) -> Result<Self> {
        let net = &snn.net;
        let shapes = net.shapes()?;
        let affine = snn.affine_layers();
        let count = last_site.map_or(affine.len(), |k| k + 1);
        let mut stages = Vec::with_capacity(count);
        let mut prev_end = 0;
        for (k, &a) in affine.iter().enumerate().take(count) {
            let passive: Vec<(usize, Vec<usize>)> = (prev_end..a).map(|i| (i, shapes[i].clone())).collect();
            let layer = net.layer(a);
            let neurons: usize = shapes[a + 1].iter().product();
            let (_, bias) = layer.affine().expect("affine layer");
            let bias = expand_channels(bias.data(), neurons);
            let threshold = if k < snn.sites.len() {
                expand_channels(&snn.thresholds[k].per_channel(snn.sites[k].channels()), neurons)
            } else {
                Vec::new()
            };
            let (synapses, first_macs) = if k == 0 {
                (None, layer.macs(&shapes[a])?)
            } else {
                (Some(Synapses::build(layer, &shapes[a])?), 0)
            };
            stages.push(Stage {
                passive,
                affine: a,
                synapses,
                bias,
                threshold,
                v0: snn.potentials[k].as_ref().map(|t| t.data().to_vec()),
                neurons,
                first_macs,
            });
            prev_end = a + 2;
        }
        Ok(Self {
            site_shapes: snn.sites.iter().take(count).map(|s| s.shape.clone()).collect(),
            has_output: last_site.is_none(),
            stages,
        })
    }

    fn run(&self, snn: &SpikingNetwork, sample: &[f64], record: bool) -> Result<SampleRun> {
        let t_steps = snn.time_steps;
        let net = &snn.net;
        // constant analog input: the first-layer current is computed once
        let first = &self.stages[0];
        let mut x = sample.to_vec();
        for (i, shape) in &first.passive {
            x = passive_forward(net.layer(*i), &x, shape)?;
        }
        let mut in_shape = vec![1];
        in_shape.extend(net.shapes()?[first.affine].iter().copied());
        let current0 = net.layer(first.affine).forward(&Tensor::new(in_shape, x)?)?.into_data();

        let n_sites = self.site_shapes.len();
        let mut v: Vec<Vec<f64>> = self
            .stages
            .iter()
            .map(|s| s.v0.clone().unwrap_or_else(|| vec![0.0; s.neurons]))
            .collect();
        let mut counts: Vec<Vec<u32>> = self.stages[..n_sites].iter().map(|s| vec![0; s.neurons]).collect();
        let mut raster: Vec<Vec<u8>> = if record {
            self.stages[..n_sites]
                .iter()
                .map(|s| Vec::with_capacity(s.neurons * t_steps))
                .collect()
        } else {
            Vec::new()
        };
        let mut ops = vec![0u64; self.stages.len()];
        let mut spikes: Vec<usize> = Vec::new();
        let mut current: Vec<f64> = Vec::new();
        let mut dense: Vec<f64> = Vec::new();
        let mut events: Vec<(usize, f64)> = Vec::new();

        for _ in 0..t_steps {
            for (k, stage) in self.stages.iter().enumerate() {
                if k == 0 {
                    current.clear();
                    current.extend_from_slice(&current0);
                } else {
                    let prev = &self.stages[k - 1];
                    events.clear();
                    if stage
                        .passive
                        .iter()
                        .any(|(i, _)| matches!(net.layer(*i), Layer::AvgPool2d { .. }))
                    {
                        dense.clear();
                        dense.resize(prev.neurons, 0.0);
                        for &j in &spikes {
                            dense[j] = prev.threshold[j];
                        }
                        let mut x = std::mem::take(&mut dense);
                        for (i, shape) in &stage.passive {
                            x = passive_forward(net.layer(*i), &x, shape)?;
                        }
                        events.extend(x.iter().enumerate().filter(|(_, a)| **a != 0.0).map(|(j, a)| (j, *a)));
                        dense = x;
                    } else {
                        events.extend(spikes.iter().map(|&j| (j, prev.threshold[j])));
                    }
                    current.clear();
                    current.extend_from_slice(&stage.bias);
                    let syn = stage.synapses.as_ref().expect("event-driven stage");
                    for &(j, a) in &events {
                        let r = syn.offsets[j]..syn.offsets[j + 1];
                        ops[k] += r.len() as u64;
                        for (&t, &w) in syn.targets[r.clone()].iter().zip(&syn.weights[r]) {
                            current[t as usize] += a * w;
                        }
                    }
                }
                let vk = &mut v[k];
                if k < n_sites {
                    spikes.clear();
                    for (i, (vi, c)) in vk.iter_mut().zip(&current).enumerate() {
                        *vi += c;
                        if *vi >= stage.threshold[i] {
                            *vi -= stage.threshold[i];
                            spikes.push(i);
                        }
                    }
                    for &i in &spikes {
                        counts[k][i] += 1;
                    }
                    if record {
                        let start = raster[k].len();
                        raster[k].resize(start + stage.neurons, 0);
                        for &i in &spikes {
                            raster[k][start + i] = 1;
                        }
                    }
                } else {
                    vk.iter_mut().zip(&current).for_each(|(vi, c)| *vi += c);
                }
            }
        }
        let output = if self.has_output {
            v.pop().unwrap().into_iter().map(|x| x / t_steps as f64).collect()
        } else {
            Vec::new()
        };
        Ok(SampleRun {
            counts,
            potentials: v,
            raster,
            output,
            ops,
        })
    }

    fn collect(&self, snn: &SpikingNetwork, runs: Vec<SampleRun>, n: usize) -> Simulation {
        let t = snn.time_steps;
        let batched = |shape: &[usize], lead: &[usize], data: Vec<f64>| {
            let mut s = lead.to_vec();
            s.extend_from_slice(shape);
            Tensor::new(s, data).expect("consistent simulation shapes")
        };
        let n_sites = self.site_shapes.len();
        let mut spike_counts = Vec::with_capacity(n_sites);
        let mut site_outputs = Vec::with_capacity(n_sites);
        let mut final_potentials = Vec::with_capacity(n_sites);
        let mut rasters = Vec::new();
        for k in 0..n_sites {
            let shape = &self.site_shapes[k];
            let counts: Vec<f64> = runs
                .iter()
                .flat_map(|r| r.counts[k].iter().map(|&c| c as f64))
                .collect();
            let thr = &self.stages[k].threshold;
            let avg = counts
                .iter()
                .enumerate()
                .map(|(i, c)| c * thr[i % thr.len()] / t as f64)
                .collect();
            spike_counts.push(batched(shape, &[n], counts));
            site_outputs.push(batched(shape, &[n], avg));
            let pot = runs.iter().flat_map(|r| r.potentials[k].iter().copied()).collect();
            final_potentials.push(batched(shape, &[n], pot));
            if !runs.is_empty() && !runs[0].raster.is_empty() {
                let data = runs
                    .iter()
                    .flat_map(|r| r.raster[k].iter().map(|&b| b as f64))
                    .collect();
                rasters.push(batched(shape, &[n, t], data));
            }
        }
        let output = self.has_output.then(|| {
            let data = runs.iter().flat_map(|r| r.output.iter().copied()).collect();
            batched(&snn.net.output_shape(), &[n], data)
        });
        let mut synaptic_ops = vec![0u64; self.stages.len()];
        for r in &runs {
            for (acc, o) in synaptic_ops.iter_mut().zip(&r.ops) {
                *acc += o;
            }
        }
        Simulation {
            time_steps: t,
            samples: n,
            output,
            spike_counts,
            site_outputs,
            final_potentials,
            rasters: (!rasters.is_empty()).then_some(rasters),
            synaptic_ops,
            dense_macs: self.stages[0].first_macs * (n * t) as u64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvGeometry;
    use crate::threshold::clip_round_with_potential;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_neuron(t: usize, mode: RoundMode) -> SpikingNetwork {
        let net = Network::new(
            vec![1],
            vec![
                Layer::Linear {
                    weight: Tensor::matrix(&[&[1.0]]),
                    bias: Tensor::vector(vec![0.0]),
                },
                Layer::Relu,
                Layer::Linear {
                    weight: Tensor::matrix(&[&[1.0]]),
                    bias: Tensor::vector(vec![0.0]),
                },
            ],
        )
        .unwrap();
        SpikingNetwork::convert(&net, t, vec![Threshold::Layer(1.0)], mode).unwrap()
    }

    #[test]
    fn single_neuron_counts() {
        let snn = one_neuron(4, RoundMode::Floor);
        let opts = SimOptions {
            record_raster: true,
            ..Default::default()
        };
        let sim = snn.simulate(&Tensor::matrix(&[&[0.7], &[2.0]]), &opts).unwrap();
        assert_eq!(sim.spike_counts[0].data(), &[2.0, 4.0]);
        assert_eq!(sim.site_outputs[0].data(), &[0.5, 1.0]);
        assert_eq!(sim.output.unwrap().data(), &[0.5, 1.0]);
        // 0.7, 1.4→0.4, 1.1→0.1, 0.8: spikes at steps 2 and 3
        assert_eq!(&sim.rasters.unwrap()[0].data()[..4], &[0.0, 1.0, 1.0, 0.0]);
        assert!((sim.final_potentials[0].data()[0] - 0.8).abs() < 1e-12);
        assert_eq!(sim.dense_macs, 8);
        assert_eq!(sim.synaptic_ops, vec![0, 6]);
    }

    #[test]
    fn round_mode_shifts_bias() {
        let snn = one_neuron(4, RoundMode::Round);
        let sim = snn
            .simulate(&Tensor::matrix(&[&[0.7]]), &SimOptions::default())
            .unwrap();
        assert_eq!(sim.spike_counts[0].data(), &[3.0]);
        let back = snn.with_time_steps(8).unwrap().with_time_steps(4).unwrap();
        let bias = |n: &SpikingNetwork| n.network().layer(0).affine().unwrap().1.data()[0];
        assert!((bias(&back) - bias(&snn)).abs() < 1e-15);
        assert!((bias(&snn) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn topology_is_validated() {
        let lin = |o, i| Layer::Linear {
            weight: Tensor::zeros(&[o, i]),
            bias: Tensor::zeros(&[o]),
        };
        let no_relu = Network::new(vec![2], vec![lin(2, 2), lin(1, 2)]).unwrap();
        assert!(matches!(spiking_sites(&no_relu), Err(Error::Layer { index: 0, .. })));
        let trailing = Network::new(vec![2], vec![lin(2, 2), Layer::Relu]).unwrap();
        assert!(spiking_sites(&trailing).is_err());
        let double = Network::new(vec![2], vec![lin(2, 2), Layer::Relu, Layer::Relu, lin(1, 2)]).unwrap();
        assert!(spiking_sites(&double).is_err());
        let ok = Network::new(vec![2], vec![lin(2, 2), Layer::Relu, lin(1, 2)]).unwrap();
        assert_eq!(spiking_sites(&ok).unwrap().0.len(), 1);
        assert!(SpikingNetwork::convert(&ok, 0, vec![Threshold::Layer(1.0)], RoundMode::Floor).is_err());
        assert!(SpikingNetwork::convert(&ok, 4, vec![], RoundMode::Floor).is_err());
    }

    #[test]
    fn single_layer_matches_clipped_quantizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (i, o) = (rng.gen_range(1..5), rng.gen_range(1..6));
            let w: Vec<f64> = (0..i * o).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..o).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let net = Network::new(
                vec![i],
                vec![
                    Layer::Linear {
                        weight: Tensor::new(vec![o, i], w).unwrap(),
                        bias: Tensor::vector(b),
                    },
                    Layer::Relu,
                    Layer::Linear {
                        weight: Tensor::zeros(&[1, o]),
                        bias: Tensor::zeros(&[1]),
                    },
                ],
            )
            .unwrap();
            let t = rng.gen_range(1..40);
            let th = Threshold::Channel((0..o).map(|_| rng.gen_range(0.3..2.0)).collect());
            let mut snn = SpikingNetwork::convert(&net, t, vec![th.clone()], RoundMode::Round).unwrap();
            let v0 = Tensor::new(vec![o], (0..o).map(|c| rng.gen_range(0.0..0.9) * th.get(c)).collect()).unwrap();
            snn.set_potential(0, Some(v0.clone())).unwrap();
            let x = Tensor::new(vec![3, i], (0..3 * i).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let z = net.forward_prefix(&x, 1).unwrap();
            let expected = clip_round_with_potential(&z, t, &th, &v0).unwrap();
            let sim = snn.simulate(&x, &SimOptions::default()).unwrap();
            assert!(sim.site_outputs[0].max_abs_diff(&expected).unwrap() < 1e-9);
        }
    }

    fn random_cnn(rng: &mut ChaCha8Rng) -> Network {
        let mut r = |shape: &[usize], s: f64| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-s..s)).collect()).unwrap()
        };
        Network::new(
            vec![1, 6, 6],
            vec![
                Layer::Conv2d {
                    weight: r(&[3, 1, 3, 3], 0.8),
                    bias: r(&[3], 0.2),
                    geometry: ConvGeometry { stride: 1, padding: 1 },
                },
                Layer::Relu,
                Layer::Conv2d {
                    weight: r(&[4, 3, 3, 3], 0.5),
                    bias: r(&[4], 0.2),
                    geometry: ConvGeometry { stride: 2, padding: 1 },
                },
                Layer::Relu,
                Layer::AvgPool2d { window: 2, stride: 1 },
                Layer::Flatten,
                Layer::Linear {
                    weight: r(&[5, 16], 0.5),
                    bias: r(&[5], 0.2),
                },
                Layer::Relu,
                Layer::Linear {
                    weight: r(&[3, 5], 0.5),
                    bias: r(&[3], 0.1),
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn event_driven_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = random_cnn(&mut rng);
        let th = vec![
            Threshold::Channel(vec![0.6, 0.9, 1.1]),
            Threshold::Layer(0.7),
            Threshold::Layer(0.5),
        ];
        let snn = SpikingNetwork::convert(&net, 6, th.clone(), RoundMode::Round).unwrap();
        let x = Tensor::new(vec![2, 1, 6, 6], (0..72).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let sim = snn.simulate(&x, &SimOptions::default()).unwrap();

        // dense step-by-step reference using layer forwards on spike tensors
        let eff = snn.network();
        let mut v: Vec<Tensor> = Vec::new();
        let mut counts: Vec<Tensor> = Vec::new();
        let mut out = Tensor::zeros(&[2, 3]);
        for _ in 0..6 {
            let mut cur = x.clone();
            let mut site = 0;
            for (i, layer) in eff.layers().iter().enumerate() {
                if matches!(layer, Layer::Relu) {
                    let c = cur.channels();
                    let stride = cur.channel_stride();
                    if v.len() <= site {
                        v.push(Tensor::zeros(cur.shape()));
                        counts.push(Tensor::zeros(cur.shape()));
                    }
                    let mut s = Tensor::zeros(cur.shape());
                    for idx in 0..cur.len() {
                        let vth = th[site].get((idx / stride) % c);
                        let p = &mut v[site].data_mut()[idx];
                        *p += cur.data()[idx];
                        if *p >= vth {
                            *p -= vth;
                            s.data_mut()[idx] = vth;
                            counts[site].data_mut()[idx] += 1.0;
                        }
                    }
                    cur = s;
                    site += 1;
                } else {
                    cur = layer.forward(&cur).unwrap();
                    if i + 1 == eff.len() {
                        out = out.add(&cur).unwrap();
                    }
                }
            }
        }
        for k in 0..3 {
            assert_eq!(sim.spike_counts[k], counts[k]);
        }
        assert!(sim.output.unwrap().max_abs_diff(&out.scale(1.0 / 6.0)).unwrap() < 1e-12);
    }

    #[test]
    fn unit_threshold_normalization_preserves_spikes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = random_cnn(&mut rng);
        let th = vec![
            Threshold::Channel(vec![0.6, 0.9, 1.1]),
            Threshold::Layer(0.7),
            Threshold::Layer(0.5),
        ];
        let mut snn = SpikingNetwork::convert(&net, 8, th, RoundMode::Round).unwrap();
        snn.set_potential(0, Some(Tensor::full(&[3, 6, 6], 0.1))).unwrap();
        let unit = snn.normalize_weights().unwrap();
        assert!(unit.thresholds().iter().all(|t| t.max() == 1.0));
        let x = Tensor::new(vec![3, 1, 6, 6], (0..108).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let a = snn.simulate(&x, &SimOptions::default()).unwrap();
        let b = unit.simulate(&x, &SimOptions::default()).unwrap();
        assert_eq!(a.spike_counts, b.spike_counts);
        assert!(a.output.unwrap().max_abs_diff(&b.output.unwrap()).unwrap() < 1e-9);
    }

    #[test]
    fn early_stop_matches_full_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = random_cnn(&mut rng);
        let th = vec![Threshold::Layer(0.8); 3];
        let snn = SpikingNetwork::convert(&net, 5, th, RoundMode::Floor).unwrap();
        let x = Tensor::new(vec![2, 1, 6, 6], (0..72).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let full = snn.simulate(&x, &SimOptions::default()).unwrap();
        let part = snn
            .simulate(
                &x,
                &SimOptions {
                    stop_after_site: Some(1),
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(part.output.is_none());
        assert_eq!(part.spike_counts[..], full.spike_counts[..2]);
    }
}
