//! Binary model container.
//!
//! A model file is one line of JSON followed by a little-endian payload:
//!
//! ```text
//! {"format":"forest2fcn-model","format_version":1,...,"payload_bytes":N,"payload_crc32":C}\n
//! <N bytes: f32 LE values>
//! ```
//!
//! The header names every network and layer; each weight and bias array is
//! a `(offset, count)` slice of the payload counted in `f32` values. Sparse
//! layers list their coordinates in the header, their weights in the
//! payload. The CRC-32 covers the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_version, read_bytes, write_bytes, ToolError, FORMAT_VERSION};
use crate::convnet::{
    fuse, Activation, Conv2d, ConvEntry, Dense, DenseEntry, Layer, Network, Shape, SparseConv2d, SparseDense,
};
use crate::netmap::MapConstants;

pub const MODEL_FORMAT: &str = "forest2fcn-model";

/// Layout of every tensor in the payload, stated in the header.
pub const FLATTEN_ORDER: &str =
    "tensors row-major (y, x, channel); conv weights [ky][kx][in][out]; dense weights [out][in]";

pub const FEATURES: &str = "features";
pub const RF_HEAD: &str = "rf_head";
pub const FCN: &str = "fcn";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMetadata {
    pub patch_size: usize,
    /// Stride of the feature network, which is also the stride of the fused one.
    pub total_stride: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
    /// Mapping constants the head was compiled with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<MapConstants>,
    /// Free-form record of how the model was produced.
    #[serde(default)]
    pub parameters: BTreeMap<String, String>,
}

/// Named networks plus shared metadata, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub metadata: ModelMetadata,
    pub networks: BTreeMap<String, Network>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Segment {
    offset: usize,
    count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerHeader {
    Conv {
        name: String,
        kernel_h: usize,
        kernel_w: usize,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        padding: usize,
        weights: Segment,
        bias: Segment,
    },
    SparseConv {
        name: String,
        kernel_h: usize,
        kernel_w: usize,
        in_ch: usize,
        out_ch: usize,
        /// `[out, ky, kx, channel]` per entry.
        coords: Vec<[u32; 4]>,
        weights: Segment,
        bias: Segment,
    },
    Dense {
        name: String,
        in_dim: usize,
        out_dim: usize,
        weights: Segment,
        bias: Segment,
    },
    SparseDense {
        name: String,
        in_dim: usize,
        out_dim: usize,
        /// `[out, input]` per entry.
        coords: Vec<[u32; 2]>,
        weights: Segment,
        bias: Segment,
    },
    Activation {
        name: String,
        function: Activation,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkHeader {
    patch_size: usize,
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    format_version: u32,
    flatten_order: String,
    metadata: ModelMetadata,
    networks: BTreeMap<String, NetworkHeader>,
    payload_bytes: usize,
    payload_crc32: u32,
}

struct PayloadWriter {
    values: Vec<f32>,
}

impl PayloadWriter {
    fn push(&mut self, v: &[f32]) -> Segment {
        let s = Segment {
            offset: self.values.len(),
            count: v.len(),
        };
        self.values.extend_from_slice(v);
        s
    }
}

fn layer_header(name: String, layer: &Layer, w: &mut PayloadWriter) -> LayerHeader {
    match layer {
        Layer::Conv(c) => LayerHeader::Conv {
            name,
            kernel_h: c.kernel_h,
            kernel_w: c.kernel_w,
            in_ch: c.in_ch,
            out_ch: c.out_ch,
            stride: c.stride,
            padding: c.padding,
            weights: w.push(&c.weights),
            bias: w.push(&c.bias),
        },
        Layer::SparseConv(c) => LayerHeader::SparseConv {
            name,
            kernel_h: c.kernel_h,
            kernel_w: c.kernel_w,
            in_ch: c.in_ch,
            out_ch: c.out_ch,
            coords: c.entries.iter().map(|e| [e.out, e.ky, e.kx, e.ch]).collect(),
            weights: w.push(&c.entries.iter().map(|e| e.weight).collect::<Vec<_>>()),
            bias: w.push(&c.bias),
        },
        Layer::Dense(d) => LayerHeader::Dense {
            name,
            in_dim: d.in_dim,
            out_dim: d.out_dim,
            weights: w.push(&d.weights),
            bias: w.push(&d.bias),
        },
        Layer::SparseDense(d) => LayerHeader::SparseDense {
            name,
            in_dim: d.in_dim,
            out_dim: d.out_dim,
            coords: d.entries.iter().map(|e| [e.out, e.input]).collect(),
            weights: w.push(&d.entries.iter().map(|e| e.weight).collect::<Vec<_>>()),
            bias: w.push(&d.bias),
        },
        Layer::Activation(a) => LayerHeader::Activation { name, function: *a },
    }
}

/// Serializes `model` into the container format.
pub fn encode_model(model: &ModelFile) -> Vec<u8> {
    let mut w = PayloadWriter { values: Vec::new() };
    let networks = model
        .networks
        .iter()
        .map(|(net_name, net)| {
            let layers = net
                .layers()
                .iter()
                .enumerate()
                .map(|(i, l)| layer_header(format!("{net_name}.{i}.{}", l.kind_name()), l, &mut w))
                .collect();
            (
                net_name.clone(),
                NetworkHeader {
                    patch_size: net.patch_size(),
                    layers,
                },
            )
        })
        .collect();
    let payload: Vec<u8> = w.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = Header {
        format: MODEL_FORMAT.into(),
        format_version: FORMAT_VERSION,
        flatten_order: FLATTEN_ORDER.into(),
        metadata: model.metadata.clone(),
        networks,
        payload_bytes: payload.len(),
        payload_crc32: crc32fast::hash(&payload),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(&payload);
    out
}

struct PayloadReader<'a> {
    values: &'a [f32],
    path: &'a Path,
}

impl PayloadReader<'_> {
    fn get(&self, s: Segment, expected: usize, what: &str) -> Result<Vec<f32>, ToolError> {
        if s.count != expected {
            return Err(ToolError::format(
                self.path,
                format!("{what} holds {} values, layer shape needs {expected}", s.count),
            ));
        }
        self.values
            .get(s.offset..s.offset + s.count)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| ToolError::format(self.path, format!("{what} lies outside the payload")))
    }
}

fn build_layer(h: &LayerHeader, r: &PayloadReader) -> Result<Layer, ToolError> {
    Ok(match h {
        LayerHeader::Conv {
            name,
            kernel_h,
            kernel_w,
            in_ch,
            out_ch,
            stride,
            padding,
            weights,
            bias,
        } => Layer::Conv(Conv2d {
            kernel_h: *kernel_h,
            kernel_w: *kernel_w,
            in_ch: *in_ch,
            out_ch: *out_ch,
            stride: *stride,
            padding: *padding,
            weights: r.get(*weights, kernel_h * kernel_w * in_ch * out_ch, &format!("{name} weights"))?,
            bias: r.get(*bias, *out_ch, &format!("{name} bias"))?,
        }),
        LayerHeader::SparseConv {
            name,
            kernel_h,
            kernel_w,
            in_ch,
            out_ch,
            coords,
            weights,
            bias,
        } => {
            let w = r.get(*weights, coords.len(), &format!("{name} weights"))?;
            Layer::SparseConv(SparseConv2d {
                kernel_h: *kernel_h,
                kernel_w: *kernel_w,
                in_ch: *in_ch,
                out_ch: *out_ch,
                entries: coords
                    .iter()
                    .zip(w)
                    .map(|(c, weight)| ConvEntry {
                        out: c[0],
                        ky: c[1],
                        kx: c[2],
                        ch: c[3],
                        weight,
                    })
                    .collect(),
                bias: r.get(*bias, *out_ch, &format!("{name} bias"))?,
            })
        }
        LayerHeader::Dense {
            name,
            in_dim,
            out_dim,
            weights,
            bias,
        } => Layer::Dense(Dense {
            in_dim: *in_dim,
            out_dim: *out_dim,
            weights: r.get(*weights, in_dim * out_dim, &format!("{name} weights"))?,
            bias: r.get(*bias, *out_dim, &format!("{name} bias"))?,
        }),
        LayerHeader::SparseDense {
            name,
            in_dim,
            out_dim,
            coords,
            weights,
            bias,
        } => {
            let w = r.get(*weights, coords.len(), &format!("{name} weights"))?;
            Layer::SparseDense(SparseDense {
                in_dim: *in_dim,
                out_dim: *out_dim,
                entries: coords
                    .iter()
                    .zip(w)
                    .map(|(c, weight)| DenseEntry {
                        out: c[0],
                        input: c[1],
                        weight,
                    })
                    .collect(),
                bias: r.get(*bias, *out_dim, &format!("{name} bias"))?,
            })
        }
        LayerHeader::Activation { function, .. } => Layer::Activation(*function),
    })
}

/// Parses the container format; `path` is only used in error messages.
pub fn decode_model(bytes: &[u8], path: &Path) -> Result<ModelFile, ToolError> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ToolError::format(path, "no header line"))?;
    let header_text =
        std::str::from_utf8(&bytes[..newline]).map_err(|_| ToolError::format(path, "header is not UTF-8"))?;
    let value: serde_json::Value =
        serde_json::from_str(header_text).map_err(|e| ToolError::format(path, format!("header: {e}")))?;
    if value.get("format").and_then(|v| v.as_str()) != Some(MODEL_FORMAT) {
        return Err(ToolError::format(path, format!("not a {MODEL_FORMAT} file")));
    }
    check_version(path, value.get("format_version").and_then(|v| v.as_u64()))?;
    let header: Header =
        serde_json::from_value(value).map_err(|e| ToolError::format(path, format!("header: {e}")))?;
    let payload = &bytes[newline + 1..];
    let checksum = |detail: String| ToolError::Checksum {
        path: path.display().to_string(),
        detail,
    };
    if payload.len() != header.payload_bytes {
        return Err(checksum(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let crc = crc32fast::hash(payload);
    if crc != header.payload_crc32 {
        return Err(checksum(format!("crc32 {crc:08x}, header declares {:08x}", header.payload_crc32)));
    }
    if !payload.len().is_multiple_of(4) {
        return Err(ToolError::format(path, "payload length is not a multiple of 4"));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let reader = PayloadReader { values: &values, path };
    let mut networks = BTreeMap::new();
    for (name, nh) in &header.networks {
        let layers = nh
            .layers
            .iter()
            .map(|l| build_layer(l, &reader))
            .collect::<Result<Vec<_>, _>>()?;
        let net = Network::new(layers, nh.patch_size).map_err(|e| ToolError::format(path, format!("{name}: {e}")))?;
        networks.insert(name.clone(), net);
    }
    Ok(ModelFile {
        metadata: header.metadata,
        networks,
    })
}

pub fn save_model(path: &Path, model: &ModelFile) -> Result<(), ToolError> {
    write_bytes(path, &encode_model(model))
}

pub fn load_model(path: &Path) -> Result<ModelFile, ToolError> {
    decode_model(&read_bytes(path)?, path)
}

impl ModelFile {
    pub fn single(name: &str, net: Network, metadata: ModelMetadata) -> Self {
        let mut networks = BTreeMap::new();
        networks.insert(name.to_string(), net);
        ModelFile { metadata, networks }
    }

    /// Takes the network stored under `name`.
    pub fn take(&mut self, name: &str, path: &Path) -> Result<Network, ToolError> {
        self.networks
            .remove(name)
            .ok_or_else(|| ToolError::format(path, format!("model has no {name:?} network")))
    }
}

/// Feature extractor, compiled forest head and their fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub features: Network,
    pub rf_head: Network,
    pub fcn: Network,
    pub metadata: ModelMetadata,
}

impl ModelBundle {
    /// Fuses `features` and `rf_head`; the metadata's patch size and stride
    /// are filled in from the feature network.
    pub fn assemble(features: Network, rf_head: Network, mut metadata: ModelMetadata) -> Result<Self, ToolError> {
        let fcn = fuse(&features, &rf_head)?;
        metadata.patch_size = features.patch_size();
        metadata.total_stride = features.total_stride();
        let classes = fcn.output_shape(Shape::new(metadata.patch_size, metadata.patch_size, 3))?.channels;
        if !metadata.class_names.is_empty() && metadata.class_names.len() != classes {
            return Err(ToolError::Dimension(format!(
                "head produces {classes} classes but {} class names are recorded",
                metadata.class_names.len()
            )));
        }
        Ok(ModelBundle {
            features,
            rf_head,
            fcn,
            metadata,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.fcn
            .output_shape(Shape::new(self.metadata.patch_size, self.metadata.patch_size, 3))
            .map(|s| s.channels)
            .unwrap_or(0)
    }

    pub fn to_model_file(&self) -> ModelFile {
        let mut networks = BTreeMap::new();
        networks.insert(FEATURES.to_string(), self.features.clone());
        networks.insert(RF_HEAD.to_string(), self.rf_head.clone());
        networks.insert(FCN.to_string(), self.fcn.clone());
        ModelFile {
            metadata: self.metadata.clone(),
            networks,
        }
    }

    /// Checks that the stored fused network is exactly the fusion of the parts.
    pub fn from_model_file(mut file: ModelFile, path: &Path) -> Result<Self, ToolError> {
        let features = file.take(FEATURES, path)?;
        let rf_head = file.take(RF_HEAD, path)?;
        let fcn = file.take(FCN, path)?;
        let rebuilt = fuse(&features, &rf_head).map_err(|e| ToolError::format(path, e))?;
        if rebuilt != fcn {
            return Err(ToolError::format(path, "fcn network is not the fusion of features and rf_head"));
        }
        let m = &file.metadata;
        if m.patch_size != features.patch_size() || m.total_stride != features.total_stride() {
            return Err(ToolError::format(path, "metadata patch size or stride disagrees with the networks"));
        }
        Ok(ModelBundle {
            features,
            rf_head,
            fcn,
            metadata: file.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ToolError> {
        save_model(path, &self.to_model_file())
    }

    pub fn load(path: &Path) -> Result<Self, ToolError> {
        Self::from_model_file(load_model(path)?, path)
    }
}
