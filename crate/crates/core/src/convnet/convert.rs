use super::layer::{Conv2d, ConvEntry, Layer, SparseConv2d};
use super::tensor::Shape;
use super::{NetError, Network};

/// Rewrites the dense layers of `net` as convolutions. The first dense layer
/// becomes a K×K convolution over a `feature_block = (K, K, C_f)` input whose
/// kernel is the weight matrix un-flattened in (row, column, channel) order;
/// every later dense layer becomes a 1×1 convolution. Sparse layers stay
/// sparse. Non-dense layers are kept as they are.
pub fn dense_to_conv(net: &Network, feature_block: Shape) -> Result<Network, NetError> {
    if feature_block.height == 0 || feature_block.width == 0 || feature_block.channels == 0 {
        return Err(NetError::DimensionMismatch(format!("degenerate feature block {feature_block}")));
    }
    let mut layers = Vec::with_capacity(net.layers().len());
    // Block shape seen by the next dense layer, once the first has been converted.
    let mut block: Option<Shape> = None;
    for (i, layer) in net.layers().iter().enumerate() {
        if !layer.is_dense() {
            layers.push(layer.clone());
            continue;
        }
        let (kh, kw, in_ch) = match block {
            None => (feature_block.height, feature_block.width, feature_block.channels),
            Some(s) => (1, 1, s.channels),
        };
        let converted = match layer {
            Layer::Dense(d) => {
                if d.in_dim != kh * kw * in_ch {
                    return Err(dense_mismatch(i, d.in_dim, kh, kw, in_ch));
                }
                Layer::Conv(Conv2d {
                    kernel_h: kh,
                    kernel_w: kw,
                    in_ch,
                    out_ch: d.out_dim,
                    stride: 1,
                    padding: 0,
                    weights: transpose(&d.weights, d.out_dim, d.in_dim),
                    bias: d.bias.clone(),
                })
            }
            Layer::SparseDense(d) => {
                if d.in_dim != kh * kw * in_ch {
                    return Err(dense_mismatch(i, d.in_dim, kh, kw, in_ch));
                }
                let entries = d
                    .entries
                    .iter()
                    .map(|e| {
                        let idx = e.input as usize;
                        ConvEntry {
                            out: e.out,
                            ky: (idx / (kw * in_ch)) as u32,
                            kx: ((idx / in_ch) % kw) as u32,
                            ch: (idx % in_ch) as u32,
                            weight: e.weight,
                        }
                    })
                    .collect();
                Layer::SparseConv(SparseConv2d {
                    kernel_h: kh,
                    kernel_w: kw,
                    in_ch,
                    out_ch: d.out_dim,
                    entries,
                    bias: d.bias.clone(),
                })
            }
            _ => unreachable!("is_dense covers both dense kinds"),
        };
        let out_ch = match &converted {
            Layer::Conv(c) => c.out_ch,
            Layer::SparseConv(c) => c.out_ch,
            _ => unreachable!(),
        };
        block = Some(Shape::new(1, 1, out_ch));
        layers.push(converted);
    }
    Network::new(layers, net.patch_size())
}

/// `[rows][cols]` to `[cols][rows]`.
fn transpose(w: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; w.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = w[r * cols + c];
        }
    }
    out
}

fn dense_mismatch(layer: usize, in_dim: usize, kh: usize, kw: usize, ch: usize) -> NetError {
    NetError::DimensionMismatch(format!(
        "dense layer {layer} takes {in_dim} inputs but the feature block is {kh}x{kw}x{ch} = {}",
        kh * kw * ch
    ))
}

/// Appends the dense classifier `head` to `feature_net` as convolutions. The
/// head must take exactly the feature block one patch produces.
pub fn fuse(feature_net: &Network, head: &Network) -> Result<Network, NetError> {
    let patch = feature_net.patch_size();
    let in_ch = first_input_channels(feature_net).unwrap_or(3);
    let block = feature_net
        .output_shape(Shape::new(patch, patch, in_ch))
        .map_err(|e| NetError::DimensionMismatch(format!("feature network rejects a {patch}x{patch} patch: {e}")))?;
    if in_ch != 3 {
        return Err(NetError::DimensionMismatch(format!(
            "feature network takes {in_ch} input channels, color images have 3"
        )));
    }
    let first_dense = head
        .layers()
        .iter()
        .find(|l| l.is_dense())
        .ok_or_else(|| NetError::DimensionMismatch("head has no dense layer".into()))?;
    let head_in = match first_dense {
        Layer::Dense(d) => d.in_dim,
        Layer::SparseDense(d) => d.in_dim,
        _ => unreachable!(),
    };
    if head_in != block.len() {
        return Err(NetError::DimensionMismatch(format!(
            "head expects {head_in} features, feature network yields {block} = {}",
            block.len()
        )));
    }
    let converted = dense_to_conv(head, block)?;
    let mut layers = feature_net.layers().to_vec();
    layers.extend(converted.layers().iter().cloned());
    Network::new(layers, patch)
}

fn first_input_channels(net: &Network) -> Option<usize> {
    net.layers().iter().find_map(|l| match l {
        Layer::Conv(c) => Some(c.in_ch),
        Layer::SparseConv(c) => Some(c.in_ch),
        _ => None,
    })
}
