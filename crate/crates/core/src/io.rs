//! On-disk containers: `.scm` models, `.sct` datasets and `.scs` spiking
//! sidecars.
//!
//! Every container is `magic (4 bytes) | manifest length (u32 LE) |
//! manifest (UTF-8 JSON) | blob`. Model and dataset blobs hold 32-bit
//! little-endian floats (labels as u32 LE); sidecar blobs hold 64-bit
//! little-endian floats. The manifest records the blob length and its
//! SHA-256, which doubles as the container's content digest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ann::{BatchNorm, Layer, Network};
use crate::calibration::CalibrationConfig;
use crate::data::Dataset;
use crate::error::{Error, FormatError, Result};
use crate::snn::{RoundMode, SpikingNetwork};
use crate::tensor::{ConvGeometry, Tensor};
use crate::threshold::{Threshold, ThresholdPolicy};

pub const FORMAT_VERSION: u32 = 1;
pub const MODEL_MAGIC: &[u8; 4] = b"SCM\0";
pub const DATASET_MAGIC: &[u8; 4] = b"SCT\0";
pub const SIDECAR_MAGIC: &[u8; 4] = b"SCS\0";

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn encode(magic: &[u8; 4], manifest: &impl Serialize, blob: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(blob);
    out
}

#[derive(Deserialize)]
struct Versioned {
    format_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobInfo {
    blob_bytes: usize,
    blob_sha256: String,
}

impl BlobInfo {
    fn of(blob: &[u8]) -> Self {
        Self {
            blob_bytes: blob.len(),
            blob_sha256: sha256_hex(blob),
        }
    }
}

/// Splits a container into its parsed manifest and its verified blob.
fn decode<'a, M: DeserializeOwned>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<(M, BlobInfo, &'a [u8])> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated {
            what: "header",
            expected: 8,
            found: bytes.len(),
        }
        .into());
    }
    if &bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into(),
            found: String::from_utf8_lossy(&bytes[..4]).into(),
        }
        .into());
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let rest = &bytes[8..];
    if rest.len() < len {
        return Err(FormatError::Truncated {
            what: "manifest",
            expected: len,
            found: rest.len(),
        }
        .into());
    }
    let (json, blob) = rest.split_at(len);
    let version: Versioned = serde_json::from_slice(json)?;
    if version.format_version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version.format_version,
        }
        .into());
    }
    let info: BlobInfo = serde_json::from_slice(json)?;
    if blob.len() < info.blob_bytes {
        return Err(FormatError::Truncated {
            what: "blob",
            expected: info.blob_bytes,
            found: blob.len(),
        }
        .into());
    }
    if blob.len() > info.blob_bytes {
        return Err(FormatError::Manifest(format!(
            "{} trailing bytes after the blob",
            blob.len() - info.blob_bytes
        ))
        .into());
    }
    let found = sha256_hex(blob);
    if found != info.blob_sha256 {
        return Err(FormatError::DigestMismatch {
            expected: info.blob_sha256,
            found,
        }
        .into());
    }
    Ok((serde_json::from_slice(json)?, info, blob))
}

/// Location of one tensor in a blob; offsets and lengths in bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

struct BlobWriter {
    bytes: Vec<u8>,
    width: usize,
}

impl BlobWriter {
    fn new(width: usize) -> Self {
        Self {
            bytes: Vec::new(),
            width,
        }
    }

    fn push(&mut self, t: &Tensor) -> Result<TensorEntry> {
        if !t.is_finite() {
            return Err(Error::Numeric("cannot store non-finite values".into()));
        }
        let offset = self.bytes.len();
        for v in t.data() {
            if self.width == 4 {
                self.bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            } else {
                self.bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(TensorEntry {
            shape: t.shape().to_vec(),
            offset,
            length: self.bytes.len() - offset,
        })
    }
}

fn read_tensor(blob: &[u8], e: &TensorEntry, width: usize, what: &str) -> std::result::Result<Tensor, String> {
    let n: usize = e.shape.iter().product();
    if e.length != n * width {
        return Err(format!(
            "{what}: {} bytes declared for {n} elements of shape {:?}",
            e.length, e.shape
        ));
    }
    let end = e.offset.checked_add(e.length).filter(|end| *end <= blob.len());
    let Some(end) = end else {
        return Err(format!(
            "{what}: bytes {}..{} lie outside the {}-byte blob",
            e.offset,
            e.offset.saturating_add(e.length),
            blob.len()
        ));
    };
    let data = blob[e.offset..end]
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                f32::from_le_bytes(c.try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(c.try_into().unwrap())
            }
        })
        .collect();
    Tensor::new(e.shape.clone(), data).map_err(|err| format!("{what}: {err}"))
}

fn check_disjoint<'a>(entries: impl Iterator<Item = (usize, &'a TensorEntry)>) -> Result<()> {
    let mut ranges: Vec<(usize, usize, usize)> = entries.map(|(i, e)| (e.offset, e.offset + e.length, i)).collect();
    ranges.sort_unstable();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(FormatError::LayerEntry {
                index: w[1].2,
                message: format!("tensor at byte {} overlaps the previous tensor", w[1].0),
            }
            .into());
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerDescriptor {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerDescriptor>,
    #[serde(flatten)]
    blob: BlobInfo,
}

/// Serializes a network to container bytes.
pub fn model_to_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut blob = BlobWriter::new(4);
    let mut layers = Vec::with_capacity(net.len());
    for (i, layer) in net.layers().iter().enumerate() {
        let mut d = LayerDescriptor {
            kind: layer.kind().name().to_string(),
            stride: None,
            padding: None,
            window: None,
            tensors: BTreeMap::new(),
        };
        let mut put = |name: &str, t: &Tensor| -> Result<()> {
            d.tensors.insert(name.into(), blob.push(t).map_err(|e| e.at_layer(i))?);
            Ok(())
        };
        match layer {
            Layer::Linear { weight, bias } => {
                put("weight", weight)?;
                put("bias", bias)?;
            }
            Layer::Conv2d { weight, bias, geometry } => {
                put("weight", weight)?;
                put("bias", bias)?;
                d.stride = Some(geometry.stride);
                d.padding = Some(geometry.padding);
            }
            Layer::BatchNorm(bn) => {
                put("mean", &bn.mean)?;
                put("std", &bn.std)?;
                put("gamma", &bn.gamma)?;
                put("beta", &bn.beta)?;
            }
            Layer::AvgPool2d { window, stride } => {
                d.window = Some(*window);
                d.stride = Some(*stride);
            }
            Layer::Relu | Layer::Flatten => {}
        }
        layers.push(d);
    }
    let blob = blob.bytes;
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        input_shape: net.input_shape().to_vec(),
        layers,
        blob: BlobInfo::of(&blob),
    };
    Ok(encode(MODEL_MAGIC, &manifest, &blob))
}

fn layer_from(i: usize, d: &LayerDescriptor, blob: &[u8]) -> Result<Layer> {
    let entry_err = |message: String| Error::from(FormatError::LayerEntry { index: i, message });
    let tensor = |name: &str| -> Result<Tensor> {
        let e = d
            .tensors
            .get(name)
            .ok_or_else(|| entry_err(format!("{} layer lacks tensor '{name}'", d.kind)))?;
        read_tensor(blob, e, 4, name).map_err(entry_err)
    };
    let field = |name: &str, v: Option<usize>| v.ok_or_else(|| entry_err(format!("{} layer lacks '{name}'", d.kind)));
    Ok(match d.kind.as_str() {
        "linear" => Layer::Linear {
            weight: tensor("weight")?,
            bias: tensor("bias")?,
        },
        "conv2d" => Layer::Conv2d {
            weight: tensor("weight")?,
            bias: tensor("bias")?,
            geometry: ConvGeometry {
                stride: field("stride", d.stride)?,
                padding: field("padding", d.padding)?,
            },
        },
        "batchnorm" => Layer::BatchNorm(BatchNorm {
            mean: tensor("mean")?,
            std: tensor("std")?,
            gamma: tensor("gamma")?,
            beta: tensor("beta")?,
        }),
        "avgpool2d" => Layer::AvgPool2d {
            window: field("window", d.window)?,
            stride: field("stride", d.stride)?,
        },
        "relu" => Layer::Relu,
        "flatten" => Layer::Flatten,
        other => return Err(entry_err(format!("unknown layer kind '{other}'"))),
    })
}

/// Parses container bytes, returning the network and its content digest.
pub fn model_from_bytes(bytes: &[u8]) -> Result<(Network, String)> {
    let (m, info, blob): (ModelManifest, _, _) = decode(MODEL_MAGIC, bytes)?;
    check_disjoint(
        m.layers
            .iter()
            .enumerate()
            .flat_map(|(i, d)| d.tensors.values().map(move |e| (i, e))),
    )?;
    let layers = m
        .layers
        .iter()
        .enumerate()
        .map(|(i, d)| layer_from(i, d, blob))
        .collect::<Result<Vec<_>>>()?;
    Ok((Network::new(m.input_shape, layers)?, info.blob_sha256))
}

pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    write_atomic(path, &model_to_bytes(net)?)
}

pub fn load_model(path: &Path) -> Result<Network> {
    Ok(load_model_with_digest(path)?.0)
}

pub fn load_model_with_digest(path: &Path) -> Result<(Network, String)> {
    model_from_bytes(&read_file(path)?)
}

/// The network as it reads back from a container: every parameter rounded
/// to 32 bits.
pub fn stored_precision(net: &Network) -> Result<Network> {
    Ok(model_from_bytes(&model_to_bytes(net)?)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    samples: usize,
    sample_shape: Vec<usize>,
    labels: bool,
    #[serde(flatten)]
    blob: BlobInfo,
}

pub fn dataset_to_bytes(data: &Dataset) -> Result<Vec<u8>> {
    let mut blob = BlobWriter::new(4);
    blob.push(&data.inputs)?;
    let mut blob = blob.bytes;
    if let Some(labels) = &data.labels {
        for l in labels {
            blob.extend_from_slice(&l.to_le_bytes());
        }
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        samples: data.len(),
        sample_shape: data.sample_shape().to_vec(),
        labels: data.labels.is_some(),
        blob: BlobInfo::of(&blob),
    };
    Ok(encode(DATASET_MAGIC, &manifest, &blob))
}

/// Parses dataset bytes, keeping at most `limit` samples; also returns the
/// content digest of the whole container.
pub fn dataset_from_bytes(bytes: &[u8], limit: Option<usize>) -> Result<(Dataset, String)> {
    let (m, info, blob): (DatasetManifest, _, _) = decode(DATASET_MAGIC, bytes)?;
    let elems: usize = m.sample_shape.iter().product();
    let expected = m.samples * elems * 4 + if m.labels { m.samples * 4 } else { 0 };
    if blob.len() != expected {
        return Err(FormatError::Manifest(format!(
            "{} samples of shape {:?} need {expected} blob bytes, found {}",
            m.samples,
            m.sample_shape,
            blob.len()
        ))
        .into());
    }
    let n = match limit {
        Some(l) if l > m.samples => {
            log::warn!("requested {l} samples but the dataset holds {}; using all", m.samples);
            m.samples
        }
        Some(l) => l,
        None => m.samples,
    };
    let mut shape = vec![n];
    shape.extend_from_slice(&m.sample_shape);
    let inputs = read_tensor(
        blob,
        &TensorEntry {
            shape,
            offset: 0,
            length: n * elems * 4,
        },
        4,
        "samples",
    )
    .map_err(FormatError::Manifest)?;
    let labels = m.labels.then(|| {
        let start = m.samples * elems * 4;
        blob[start..start + n * 4]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    });
    Ok((Dataset::new(inputs, labels)?, info.blob_sha256))
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &dataset_to_bytes(data)?)
}

/// The first `limit` samples (all when `None`) in stored order.
pub fn load_dataset(path: &Path, limit: Option<usize>) -> Result<Dataset> {
    Ok(load_dataset_with_digest(path, limit)?.0)
}

pub fn load_dataset_with_digest(path: &Path, limit: Option<usize>) -> Result<(Dataset, String)> {
    dataset_from_bytes(&read_file(path)?, limit)
}

/// How a sidecar was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub calibration_sha256: String,
    pub calibration_samples: usize,
    pub threshold_policy: ThresholdPolicy,
    pub calibration: CalibrationConfig,
    /// Digest of the model the conversion started from; differs from the
    /// sidecar's model when weight calibration wrote a new container.
    pub source_model_sha256: String,
}

/// Everything beyond the ANN container needed to run the spiking network
/// at one number of time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    pub model_sha256: String,
    pub time_steps: usize,
    pub round_mode: RoundMode,
    /// One per spiking layer.
    pub thresholds: Vec<Threshold>,
    /// Initial membrane potentials per affine layer (spiking layers, then
    /// the output layer).
    pub potentials: Vec<Option<Tensor>>,
    /// Per-channel bias change per affine layer on top of the conversion's
    /// rounding shift.
    pub bias_delta: Vec<Option<Tensor>>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SidecarManifest {
    format_version: u32,
    model_sha256: String,
    time_steps: usize,
    round_mode: RoundMode,
    thresholds: Vec<Threshold>,
    potentials: Vec<Option<TensorEntry>>,
    bias_delta: Vec<Option<TensorEntry>>,
    provenance: Provenance,
    #[serde(flatten)]
    blob: BlobInfo,
}

fn affine_bias(net: &Network, layer: usize) -> Vec<f64> {
    net.layer(layer).affine().expect("affine layer").1.data().to_vec()
}

impl Sidecar {
    /// Describes `snn` relative to `model` (the container it will be
    /// loaded against, possibly with batch norm) whose digest is
    /// `model_sha256`.
    pub fn describe(snn: &SpikingNetwork, model: &Network, model_sha256: &str, provenance: Provenance) -> Result<Self> {
        let reference = SpikingNetwork::convert(
            &model.fold_bn()?,
            snn.time_steps(),
            snn.thresholds().to_vec(),
            snn.round_mode(),
        )?;
        if reference.affine_layers() != snn.affine_layers() {
            return Err(Error::invalid("spiking network does not match the model's layer chain"));
        }
        let bias_delta = snn
            .affine_layers()
            .iter()
            .map(|&l| {
                let delta: Vec<f64> = affine_bias(snn.network(), l)
                    .iter()
                    .zip(affine_bias(reference.network(), l))
                    .map(|(a, b)| a - b)
                    .collect();
                delta.iter().any(|d| *d != 0.0).then(|| Tensor::vector(delta))
            })
            .collect();
        Ok(Self {
            model_sha256: model_sha256.to_string(),
            time_steps: snn.time_steps(),
            round_mode: snn.round_mode(),
            thresholds: snn.thresholds().to_vec(),
            potentials: snn.potentials().to_vec(),
            bias_delta,
            provenance,
        })
    }

    /// Rebuilds the spiking network on `model`, refusing a model whose
    /// digest differs from the one recorded.
    pub fn apply(&self, model: &Network, model_sha256: &str) -> Result<SpikingNetwork> {
        if model_sha256 != self.model_sha256 {
            return Err(FormatError::DigestMismatch {
                expected: self.model_sha256.clone(),
                found: model_sha256.to_string(),
            }
            .into());
        }
        let mut snn = SpikingNetwork::convert(
            &model.fold_bn()?,
            self.time_steps,
            self.thresholds.clone(),
            self.round_mode,
        )?;
        let entries = snn.affine_layers().len();
        if self.potentials.len() != entries || self.bias_delta.len() != entries {
            return Err(FormatError::Manifest(format!(
                "sidecar describes {} potentials and {} bias deltas for {entries} affine layers",
                self.potentials.len(),
                self.bias_delta.len()
            ))
            .into());
        }
        for (k, delta) in self.bias_delta.iter().enumerate() {
            if let Some(d) = delta {
                let channels = affine_bias(snn.network(), snn.affine_layers()[k]).len();
                if d.len() != channels {
                    return Err(Error::shape("bias delta", &[channels], d.shape()).at_layer(snn.affine_layers()[k]));
                }
                snn.add_bias(k, d.data());
            }
        }
        for (k, p) in self.potentials.iter().enumerate() {
            let layer = snn.affine_layers()[k];
            snn.set_potential(k, p.clone()).map_err(|e| e.at_layer(layer))?;
        }
        Ok(snn)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = BlobWriter::new(8);
        let mut put = |v: &[Option<Tensor>]| -> Result<Vec<Option<TensorEntry>>> {
            v.iter().map(|t| t.as_ref().map(|t| blob.push(t)).transpose()).collect()
        };
        let potentials = put(&self.potentials)?;
        let bias_delta = put(&self.bias_delta)?;
        let blob = blob.bytes;
        let manifest = SidecarManifest {
            format_version: FORMAT_VERSION,
            model_sha256: self.model_sha256.clone(),
            time_steps: self.time_steps,
            round_mode: self.round_mode,
            thresholds: self.thresholds.clone(),
            potentials,
            bias_delta,
            provenance: self.provenance.clone(),
            blob: BlobInfo::of(&blob),
        };
        Ok(encode(SIDECAR_MAGIC, &manifest, &blob))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (m, _, blob): (SidecarManifest, _, _) = decode(SIDECAR_MAGIC, bytes)?;
        let entries: Vec<(usize, &TensorEntry)> = m
            .potentials
            .iter()
            .chain(&m.bias_delta)
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|e| (i % m.potentials.len().max(1), e)))
            .collect();
        check_disjoint(entries.into_iter())?;
        let get = |v: &[Option<TensorEntry>], what: &str| -> Result<Vec<Option<Tensor>>> {
            v.iter()
                .enumerate()
                .map(|(k, e)| {
                    e.as_ref()
                        .map(|e| {
                            read_tensor(blob, e, 8, what)
                                .map_err(|message| FormatError::LayerEntry { index: k, message }.into())
                        })
                        .transpose()
                })
                .collect()
        };
        Ok(Self {
            potentials: get(&m.potentials, "potential")?,
            bias_delta: get(&m.bias_delta, "bias delta")?,
            model_sha256: m.model_sha256,
            time_steps: m.time_steps,
            round_mode: m.round_mode,
            thresholds: m.thresholds,
            provenance: m.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Loads a model and a sidecar and rebuilds the spiking network, checking
/// that the sidecar was made for this model.
pub fn load_spiking(model: &Path, sidecar: &Path) -> Result<(Network, SpikingNetwork, Sidecar)> {
    let (net, digest) = load_model_with_digest(model)?;
    let side = Sidecar::load(sidecar)?;
    let snn = side.apply(&net, &digest)?;
    Ok((net, snn, side))
}
