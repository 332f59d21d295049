//! Clipped quantizer activations (the expected output of an IF layer under
//! constant-rate input) and firing-threshold search.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A firing threshold: one value per layer, or one per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Threshold {
    Layer(f64),
    Channel(Vec<f64>),
}

impl Threshold {
    pub fn is_channel_wise(&self) -> bool {
        matches!(self, Threshold::Channel(_))
    }

    /// Threshold of channel `c`.
    #[inline]
    pub fn get(&self, c: usize) -> f64 {
        match self {
            Threshold::Layer(v) => *v,
            Threshold::Channel(v) => v[c],
        }
    }

    /// Expands to one value per channel.
    pub fn per_channel(&self, channels: usize) -> Vec<f64> {
        (0..channels).map(|c| self.get(c)).collect()
    }

    pub fn max(&self) -> f64 {
        match self {
            Threshold::Layer(v) => *v,
            Threshold::Channel(v) => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if let Threshold::Channel(v) = self {
            if v.len() != channels {
                return Err(Error::invalid(format!(
                    "{} channel thresholds for {channels} channels",
                    v.len()
                )));
            }
        }
        let ok = match self {
            Threshold::Layer(v) => *v > 0.0 && v.is_finite(),
            Threshold::Channel(v) => v.iter().all(|x| *x > 0.0 && x.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("firing thresholds must be strictly positive and finite"))
        }
    }

    fn check_for(&self, z: &Tensor) -> Result<()> {
        let channels = if self.is_channel_wise() {
            if z.rank() < 2 {
                return Err(Error::invalid(format!(
                    "channel-wise threshold needs a batched tensor, got {:?}",
                    z.shape()
                )));
            }
            z.channels()
        } else {
            1
        };
        self.validate(channels)
    }
}

fn check_steps(t: usize) -> Result<()> {
    if t == 0 {
        Err(Error::invalid("time steps must be at least 1"))
    } else {
        Ok(())
    }
}

/// `(V/T)·clip(floor(T·z/V + offset), 0, T)` for one element.
#[inline]
pub fn quantize(z: f64, t: usize, v: f64, offset: f64) -> f64 {
    let tf = t as f64;
    (v / tf) * (tf * z / v + offset).floor().clamp(0.0, tf)
}

/// Applies `f(z, V_channel, element_index)` over a batch with channel axis 1.
fn map_channels(z: &Tensor, v: &Threshold, f: impl Fn(f64, f64, usize) -> f64) -> Tensor {
    let mut out = z.clone();
    let stride = z.channel_stride();
    let channels = if z.rank() >= 2 { z.channels() } else { 1 };
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        let c = if v.is_channel_wise() {
            (i / stride) % channels
        } else {
            0
        };
        *x = f(*x, v.get(c), i);
    }
    out
}

/// Expected IF output under constant-rate input with floor quantization.
pub fn clip_floor(z: &Tensor, t: usize, v: &Threshold) -> Result<Tensor> {
    check_steps(t)?;
    v.check_for(z)?;
    Ok(map_channels(z, v, |x, vc, _| quantize(x, t, vc, 0.0)))
}

/// As [`clip_floor`] with rounding (`floor(·+1/2)`).
pub fn clip_round(z: &Tensor, t: usize, v: &Threshold) -> Result<Tensor> {
    check_steps(t)?;
    v.check_for(z)?;
    Ok(map_channels(z, v, |x, vc, _| quantize(x, t, vc, 0.5)))
}

/// [`clip_round`] with a non-zero initial membrane potential `v0`.
///
/// `v0` may match `z` exactly, match its per-sample shape (broadcast over
/// the batch), or hold one value per channel.
pub fn clip_round_with_potential(z: &Tensor, t: usize, v: &Threshold, v0: &Tensor) -> Result<Tensor> {
    check_steps(t)?;
    v.check_for(z)?;
    let sample_len = z.sample_len().max(1);
    let stride = z.channel_stride();
    let channels = z.channels();
    let lookup: Box<dyn Fn(usize) -> f64> = if v0.shape() == z.shape() {
        Box::new(|i| v0.data()[i])
    } else if v0.shape() == z.sample_shape() {
        Box::new(move |i| v0.data()[i % sample_len])
    } else if v0.shape() == [channels] {
        Box::new(move |i| v0.data()[(i / stride) % channels])
    } else {
        return Err(Error::shape("clip_round_with_potential", z.shape(), v0.shape()));
    };
    Ok(map_channels(z, v, |x, vc, i| quantize(x, t, vc, 0.5 + lookup(i) / vc)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    MaxAct,
    Percentile,
    Mmse,
    MmseChannel,
}

impl ThresholdMode {
    pub fn name(self) -> &'static str {
        match self {
            ThresholdMode::MaxAct => "max-act",
            ThresholdMode::Percentile => "percentile",
            ThresholdMode::Mmse => "mmse",
            ThresholdMode::MmseChannel => "mmse-channel",
        }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-act" => Ok(ThresholdMode::MaxAct),
            "percentile" => Ok(ThresholdMode::Percentile),
            "mmse" => Ok(ThresholdMode::Mmse),
            "mmse-channel" => Ok(ThresholdMode::MmseChannel),
            other => Err(Error::invalid(format!(
                "unknown threshold mode '{other}' (valid: max-act, percentile, mmse, mmse-channel)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub mode: ThresholdMode,
    /// Grid size for the MMSE search.
    pub grid: usize,
    /// Percentile in `(0, 100]` for [`ThresholdMode::Percentile`].
    pub percentile: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self {
            mode: ThresholdMode::Mmse,
            grid: 100,
            percentile: 99.99,
        }
    }
}

impl ThresholdPolicy {
    pub fn with_mode(mode: ThresholdMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::invalid("threshold grid size must be at least 2"));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::invalid("percentile must lie in (0, 100]"));
        }
        Ok(())
    }
}

/// Result of [`search_threshold`].
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSearch {
    pub threshold: Threshold,
    /// Mean squared `ClipRound − ReLU` error over all elements at the
    /// chosen threshold.
    pub mse: f64,
    /// Channels (or `[0]` for a layer-wise search) whose activations were
    /// never positive; their threshold defaults to 1.0.
    pub degenerate: Vec<usize>,
}

const DEGENERATE_THRESHOLD: f64 = 1.0;

/// Sum of squared `ClipRound − ReLU` errors; non-positive inputs
/// contribute nothing and must already be filtered out.
fn sse_positive(pos: &[f64], t: usize, v: f64) -> f64 {
    pos.iter()
        .map(|&a| {
            let d = quantize(a, t, v, 0.5) - a;
            d * d
        })
        .sum()
}

/// Mean squared `ClipRound(a) − ReLU(a)` over all elements for a threshold.
pub fn rounding_mse(activations: &Tensor, t: usize, v: &Threshold) -> Result<f64> {
    let q = clip_round(activations, t, v)?;
    let r = activations.relu();
    Ok(q.sub(&r)?.sq_norm() / activations.len().max(1) as f64)
}

/// Grid search over `(j/N)·max(a)`, `j = 1..=N`; ties go to the smallest `j`.
fn mmse_grid(pos: &[f64], t: usize, grid: usize) -> Option<(f64, f64)> {
    let max = pos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return None;
    }
    let mut best: Option<(f64, f64)> = None;
    for j in 1..=grid {
        let v = j as f64 / grid as f64 * max;
        let sse = sse_positive(pos, t, v);
        if best.map_or(true, |(_, b)| sse < b) {
            best = Some((v, sse));
        }
    }
    best
}

/// Linear-interpolated percentile of `values` (sorted in place).
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    if values.is_empty() {
        return f64::NAN;
    }
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Determines the firing threshold for one layer from its ANN
/// pre-activations (`N×C×…` or `N×F`).
pub fn search_threshold(activations: &Tensor, t: usize, policy: &ThresholdPolicy) -> Result<ThresholdSearch> {
    check_steps(t)?;
    policy.validate()?;
    if activations.is_empty() {
        return Err(Error::invalid("threshold search over an empty activation set"));
    }
    let mut degenerate = Vec::new();
    let mut positive_or_default = |v: f64, idx: usize| {
        if v > 0.0 && v.is_finite() {
            v
        } else {
            degenerate.push(idx);
            DEGENERATE_THRESHOLD
        }
    };
    let threshold = match policy.mode {
        ThresholdMode::MaxAct => Threshold::Layer(positive_or_default(activations.max().unwrap(), 0)),
        ThresholdMode::Percentile => {
            let mut vals = activations.data().to_vec();
            Threshold::Layer(positive_or_default(percentile(&mut vals, policy.percentile), 0))
        }
        ThresholdMode::Mmse => {
            let pos: Vec<f64> = activations.data().iter().copied().filter(|&a| a > 0.0).collect();
            let v = mmse_grid(&pos, t, policy.grid).map_or(0.0, |(v, _)| v);
            Threshold::Layer(positive_or_default(v, 0))
        }
        ThresholdMode::MmseChannel => {
            if activations.rank() < 2 {
                return Err(Error::invalid(
                    "mmse-channel needs a batched tensor with a channel axis",
                ));
            }
            let channels = activations.channels();
            let stride = activations.channel_stride();
            let mut per: Vec<Vec<f64>> = vec![Vec::new(); channels];
            for sample in activations.data().chunks(channels * stride) {
                for (c, plane) in sample.chunks(stride).enumerate() {
                    per[c].extend(plane.iter().copied().filter(|&a| a > 0.0));
                }
            }
            let values = per
                .iter()
                .enumerate()
                .map(|(c, pos)| {
                    let v = mmse_grid(pos, t, policy.grid).map_or(0.0, |(v, _)| v);
                    positive_or_default(v, c)
                })
                .collect();
            Threshold::Channel(values)
        }
    };
    if !degenerate.is_empty() {
        log::warn!(
            "threshold search: {} degenerate channel(s) without positive activations; using {DEGENERATE_THRESHOLD}",
            degenerate.len()
        );
    }
    let mse = rounding_mse(activations, t, &threshold)?;
    Ok(ThresholdSearch {
        threshold,
        mse,
        degenerate,
    })
}
