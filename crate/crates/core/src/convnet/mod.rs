//! Forward-only inference for layer stacks, plus the dense-to-convolution
//! rewrite that turns a patch classifier into a fully convolutional one.

mod convert;
mod layer;
mod tensor;

pub use convert::{dense_to_conv, fuse};
pub use layer::{conv_extent, Activation, Conv2d, ConvEntry, Dense, DenseEntry, Layer, SparseConv2d, SparseDense};
pub use tensor::{Shape, Tensor};

use rand::Rng;
use thiserror::Error;

/// Edge length of the square training patch.
pub const PATCH_SIZE: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("layer {layer} ({kind}): {detail}")]
    ShapeMismatch {
        layer: usize,
        kind: &'static str,
        detail: String,
    },
    #[error("layer {layer} ({kind}) is malformed: {detail}")]
    InvalidLayer {
        layer: usize,
        kind: &'static str,
        detail: String,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// An ordered layer stack together with the patch size it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    patch_size: usize,
}

impl Network {
    pub fn new(layers: Vec<Layer>, patch_size: usize) -> Result<Self, NetError> {
        for (i, l) in layers.iter().enumerate() {
            l.validate().map_err(|detail| NetError::InvalidLayer {
                layer: i,
                kind: l.kind_name(),
                detail,
            })?;
        }
        Ok(Network { layers, patch_size })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Product of all layer strides.
    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(Layer::stride).product()
    }

    /// Shape produced for `input`, following each layer's shape rule.
    pub fn output_shape(&self, input: Shape) -> Result<Shape, NetError> {
        let mut shape = input;
        for (i, l) in self.layers.iter().enumerate() {
            shape = l.output_shape(shape).map_err(|detail| NetError::ShapeMismatch {
                layer: i,
                kind: l.kind_name(),
                detail,
            })?;
        }
        Ok(shape)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NetError> {
        let mut current: Option<Tensor> = None;
        for (i, l) in self.layers.iter().enumerate() {
            let x = current.as_ref().unwrap_or(input);
            let out_shape = l.output_shape(x.shape()).map_err(|detail| NetError::ShapeMismatch {
                layer: i,
                kind: l.kind_name(),
                detail,
            })?;
            current = Some(l.apply(x, out_shape));
        }
        Ok(current.unwrap_or_else(|| input.clone()))
    }

    /// Number of stored parameters (sparse layers count their entries).
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.weights.len() + c.bias.len(),
                Layer::SparseConv(c) => c.entries.len() + c.bias.len(),
                Layer::Dense(d) => d.weights.len() + d.bias.len(),
                Layer::SparseDense(d) => d.entries.len() + d.bias.len(),
                Layer::Activation(_) => 0,
            })
            .sum()
    }
}

/// Channel widths of the three convolution groups of the feature extractor.
pub const FEATURE_CHANNELS: [usize; 3] = [32, 64, 128];

fn random_conv<R: Rng>(rng: &mut R, kernel: usize, in_ch: usize, out_ch: usize, stride: usize) -> Layer {
    let fan_in = kernel * kernel * in_ch;
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    Layer::Conv(Conv2d {
        kernel_h: kernel,
        kernel_w: kernel,
        in_ch,
        out_ch,
        stride,
        padding: 0,
        weights: (0..out_ch * fan_in).map(|_| rng.random_range(-bound..bound)).collect(),
        bias: (0..out_ch).map(|_| rng.random_range(-0.05f32..0.05)).collect(),
    })
}

/// Feature extractor layout with random weights, in three groups:
///
/// - conv1: 1×1 conv, relu, 3×3 conv, relu, 3×3 conv stride 2, relu (`channels[0]`)
/// - conv2: 3×3 conv stride 2, relu (`channels[1]`)
/// - conv3: 1×1 conv, relu (`channels[2]`), the last relu being "relu3"
///
/// All convolutions are unpadded so a patch's features do not depend on what
/// lies outside it. Total stride is 4, a 32×32 patch yields a 6×6×`channels[2]`
/// block and a 1080×1920 frame a 268×478 map.
pub fn feature_extractor<R: Rng>(rng: &mut R, channels: [usize; 3], in_channels: usize) -> Network {
    let [c1, c2, c3] = channels;
    let relu = || Layer::Activation(Activation::Relu);
    let layers = vec![
        random_conv(rng, 1, in_channels, c1, 1),
        relu(),
        random_conv(rng, 3, c1, c1, 1),
        relu(),
        random_conv(rng, 3, c1, c1, 2),
        relu(),
        random_conv(rng, 3, c1, c2, 2),
        relu(),
        random_conv(rng, 1, c2, c3, 1),
        relu(),
    ];
    Network::new(layers, PATCH_SIZE).expect("feature extractor layers are well formed")
}
