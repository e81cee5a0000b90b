//! Model files: a JSON manifest plus a sidecar blob of little-endian `f32`
//! weights, concatenated in manifest order. Every blob reference records its
//! name, shape and byte offset into the sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layer::Layer;
use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_FORMAT: &str = "smoothtaylor-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        weight: BlobRef,
        bias: BlobRef,
    },
    Conv2d {
        weight: BlobRef,
        bias: BlobRef,
        stride: [usize; 2],
        padding: [usize; 2],
    },
    Relu,
    Softplus,
    Square,
    Maxpool2d {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    Avgpool2d {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    Flatten,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub input_shape: Vec<usize>,
    /// Sidecar path, relative to the manifest's directory.
    pub weights_file: String,
    pub layers: Vec<LayerSpec>,
}

/// Serializes `model`, returning the manifest and the weight blob.
pub fn encode_model(model: &Model, weights_file: &str) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut push = |name: String, t: &Tensor| {
        let r = BlobRef {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        };
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        r
    };
    let layers = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| match layer {
            Layer::Dense { weight, bias } => LayerSpec::Dense {
                weight: push(format!("layer{i}.weight"), weight),
                bias: push(format!("layer{i}.bias"), bias),
            },
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => LayerSpec::Conv2d {
                weight: push(format!("layer{i}.weight"), weight),
                bias: push(format!("layer{i}.bias"), bias),
                stride: *stride,
                padding: *padding,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::Softplus => LayerSpec::Softplus,
            Layer::Square => LayerSpec::Square,
            Layer::MaxPool2d { kernel, stride } => LayerSpec::Maxpool2d {
                kernel: *kernel,
                stride: *stride,
            },
            Layer::AvgPool2d { kernel, stride } => LayerSpec::Avgpool2d {
                kernel: *kernel,
                stride: *stride,
            },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Softmax => LayerSpec::Softmax,
        })
        .collect();
    let manifest = Manifest {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        input_shape: model.input_shape().to_vec(),
        weights_file: weights_file.into(),
        layers,
    };
    (manifest, blob)
}

/// Rebuilds a model from a manifest and its weight blob. `origin` only
/// labels error messages.
pub fn decode_model(manifest: &Manifest, blob: &[u8], origin: &Path) -> Result<Model> {
    if manifest.format != MODEL_FORMAT {
        return Err(Error::format(
            origin,
            format!("unknown model format {:?}", manifest.format),
        ));
    }
    if manifest.version != MODEL_VERSION {
        return Err(Error::format(
            origin,
            format!("unsupported model version {}", manifest.version),
        ));
    }
    let fetch = |r: &BlobRef| -> Result<Tensor> {
        let n: usize = r.shape.iter().product();
        let start = usize::try_from(r.offset).map_err(|_| Error::format(origin, "offset overflow"))?;
        let bytes = start
            .checked_add(4 * n)
            .and_then(|end| blob.get(start..end))
            .ok_or_else(|| Error::format(origin, format!("blob {} exceeds the weight file", r.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(r.shape.clone(), data).map_err(|e| Error::format(origin, format!("blob {}: {e}", r.name)))
    };
    let layers = manifest
        .layers
        .iter()
        .map(|spec| {
            Ok(match spec {
                LayerSpec::Dense { weight, bias } => Layer::Dense {
                    weight: fetch(weight)?,
                    bias: fetch(bias)?,
                },
                LayerSpec::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => Layer::Conv2d {
                    weight: fetch(weight)?,
                    bias: fetch(bias)?,
                    stride: *stride,
                    padding: *padding,
                },
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Softplus => Layer::Softplus,
                LayerSpec::Square => Layer::Square,
                LayerSpec::Maxpool2d { kernel, stride } => Layer::MaxPool2d {
                    kernel: *kernel,
                    stride: *stride,
                },
                LayerSpec::Avgpool2d { kernel, stride } => Layer::AvgPool2d {
                    kernel: *kernel,
                    stride: *stride,
                },
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Softmax => Layer::Softmax,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Model::new(manifest.input_shape.clone(), layers)
}

fn sidecar_path(manifest_path: &Path, weights_file: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(weights_file)
}

pub fn load_model(manifest_path: &Path) -> Result<Model> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
    let blob_path = sidecar_path(manifest_path, &manifest.weights_file);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    decode_model(&manifest, &blob, manifest_path)
}

/// Writes `<stem>.json` style manifest at `manifest_path` and the weights next
/// to it as `<stem>.bin`.
pub fn save_model(model: &Model, manifest_path: &Path) -> Result<()> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::format(manifest_path, "manifest path has no file name"))?;
    let weights_file = format!("{stem}.bin");
    let (manifest, blob) = encode_model(model, &weights_file);
    let blob_path = sidecar_path(manifest_path, &weights_file);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))
}
