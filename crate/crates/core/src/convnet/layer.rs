use serde::{Deserialize, Serialize};

use super::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    /// −1 below zero, +1 at or above zero.
    Sign,
    /// 1 strictly above zero, otherwise 0.
    Step,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::Sign => {
                if v >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Activation::Step => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. Weights are laid out
/// `[ky][kx][in][out]`; the `(ky, kx, in)` tap order matches the flattening
/// order of a dense layer over a channel-last window.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// One nonzero weight of a sparse convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvEntry {
    pub out: u32,
    pub ky: u32,
    pub kx: u32,
    pub ch: u32,
    pub weight: f32,
}

/// Stride-1, unpadded convolution stored as a coordinate list sorted by
/// output channel. Each output sums its entries in list order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConv2d {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub entries: Vec<ConvEntry>,
    pub bias: Vec<f32>,
}

/// Fully connected layer over the flattened input, weights `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseEntry {
    pub out: u32,
    pub input: u32,
    pub weight: f32,
}

/// Fully connected layer stored as a coordinate list sorted by output.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub entries: Vec<DenseEntry>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    SparseConv(SparseConv2d),
    Dense(Dense),
    SparseDense(SparseDense),
    Activation(Activation),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::SparseConv(_) => "sparse_conv",
            Layer::Dense(_) => "dense",
            Layer::SparseDense(_) => "sparse_dense",
            Layer::Activation(_) => "activation",
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            Layer::Conv(c) => c.stride,
            _ => 1,
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::SparseDense(_))
    }

    /// Checks the layer's own parameter counts and orderings.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Layer::Conv(c) => {
                if c.kernel_h == 0 || c.kernel_w == 0 || c.in_ch == 0 || c.out_ch == 0 {
                    return Err("convolution dimensions must be positive".into());
                }
                if c.stride == 0 {
                    return Err("stride must be at least 1".into());
                }
                let n = c.out_ch * c.kernel_h * c.kernel_w * c.in_ch;
                if c.weights.len() != n {
                    return Err(format!("expected {n} weights, found {}", c.weights.len()));
                }
                if c.bias.len() != c.out_ch {
                    return Err(format!("expected {} biases, found {}", c.out_ch, c.bias.len()));
                }
            }
            Layer::SparseConv(c) => {
                if c.kernel_h == 0 || c.kernel_w == 0 || c.in_ch == 0 || c.out_ch == 0 {
                    return Err("convolution dimensions must be positive".into());
                }
                if c.bias.len() != c.out_ch {
                    return Err(format!("expected {} biases, found {}", c.out_ch, c.bias.len()));
                }
                let mut prev = 0u32;
                for e in &c.entries {
                    if e.out as usize >= c.out_ch
                        || e.ky as usize >= c.kernel_h
                        || e.kx as usize >= c.kernel_w
                        || e.ch as usize >= c.in_ch
                    {
                        return Err(format!("sparse entry {e:?} outside the kernel"));
                    }
                    if e.out < prev {
                        return Err("sparse entries must be sorted by output".into());
                    }
                    prev = e.out;
                }
            }
            Layer::Dense(d) => {
                if d.in_dim == 0 || d.out_dim == 0 {
                    return Err("dense dimensions must be positive".into());
                }
                if d.weights.len() != d.in_dim * d.out_dim {
                    return Err(format!(
                        "expected {} weights, found {}",
                        d.in_dim * d.out_dim,
                        d.weights.len()
                    ));
                }
                if d.bias.len() != d.out_dim {
                    return Err(format!("expected {} biases, found {}", d.out_dim, d.bias.len()));
                }
            }
            Layer::SparseDense(d) => {
                if d.in_dim == 0 || d.out_dim == 0 {
                    return Err("dense dimensions must be positive".into());
                }
                if d.bias.len() != d.out_dim {
                    return Err(format!("expected {} biases, found {}", d.out_dim, d.bias.len()));
                }
                let mut prev = 0u32;
                for e in &d.entries {
                    if e.out as usize >= d.out_dim || e.input as usize >= d.in_dim {
                        return Err(format!("sparse entry {e:?} outside {}x{}", d.out_dim, d.in_dim));
                    }
                    if e.out < prev {
                        return Err("sparse entries must be sorted by output".into());
                    }
                    prev = e.out;
                }
            }
            Layer::Activation(_) => {}
        }
        Ok(())
    }

    /// Output shape for a given input shape, or a description of the mismatch.
    pub fn output_shape(&self, input: Shape) -> Result<Shape, String> {
        match self {
            Layer::Conv(c) => {
                if input.channels != c.in_ch {
                    return Err(format!("expects {} input channels, got {}", c.in_ch, input.channels));
                }
                let h = conv_extent(input.height, c.kernel_h, c.stride, c.padding)
                    .ok_or_else(|| format!("input {input} smaller than kernel {}x{}", c.kernel_h, c.kernel_w))?;
                let w = conv_extent(input.width, c.kernel_w, c.stride, c.padding)
                    .ok_or_else(|| format!("input {input} smaller than kernel {}x{}", c.kernel_h, c.kernel_w))?;
                Ok(Shape::new(h, w, c.out_ch))
            }
            Layer::SparseConv(c) => {
                if input.channels != c.in_ch {
                    return Err(format!("expects {} input channels, got {}", c.in_ch, input.channels));
                }
                let h = conv_extent(input.height, c.kernel_h, 1, 0)
                    .ok_or_else(|| format!("input {input} smaller than kernel {}x{}", c.kernel_h, c.kernel_w))?;
                let w = conv_extent(input.width, c.kernel_w, 1, 0)
                    .ok_or_else(|| format!("input {input} smaller than kernel {}x{}", c.kernel_h, c.kernel_w))?;
                Ok(Shape::new(h, w, c.out_ch))
            }
            Layer::Dense(Dense { in_dim, out_dim, .. }) | Layer::SparseDense(SparseDense { in_dim, out_dim, .. }) => {
                if input.len() != *in_dim {
                    return Err(format!("expects {in_dim} flattened inputs, got {} ({input})", input.len()));
                }
                Ok(Shape::new(1, 1, *out_dim))
            }
            Layer::Activation(_) => Ok(input),
        }
    }

    /// Applies the layer. The caller has checked the shape with `output_shape`.
    pub(crate) fn apply(&self, input: &Tensor, out_shape: Shape) -> Tensor {
        match self {
            Layer::Conv(c) => conv_forward(c, input, out_shape),
            Layer::SparseConv(c) => sparse_conv_forward(c, input, out_shape),
            Layer::Dense(d) => {
                let x = input.data();
                let data = (0..d.out_dim)
                    .map(|o| {
                        let row = &d.weights[o * d.in_dim..(o + 1) * d.in_dim];
                        row.iter().zip(x).fold(d.bias[o], |acc, (w, v)| acc + w * v)
                    })
                    .collect();
                Tensor::from_vec(out_shape, data).expect("dense output shape")
            }
            Layer::SparseDense(d) => {
                let x = input.data();
                let mut data = d.bias.clone();
                for e in &d.entries {
                    data[e.out as usize] += e.weight * x[e.input as usize];
                }
                Tensor::from_vec(out_shape, data).expect("sparse dense output shape")
            }
            Layer::Activation(a) => {
                let mut out = input.clone();
                out.data_mut().iter_mut().for_each(|v| *v = a.apply(*v));
                out
            }
        }
    }
}

/// `⌊(n + 2·pad − k)/stride⌋ + 1`, or `None` when the kernel does not fit.
pub fn conv_extent(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output positions computed together so each weight row is loaded once per block.
const POSITION_BLOCK: usize = 8;

fn conv_forward(c: &Conv2d, input: &Tensor, out_shape: Shape) -> Tensor {
    let padded;
    let x = if c.padding > 0 {
        padded = pad_input(input, c.padding);
        &padded
    } else {
        input
    };
    let (iw, ic, oc) = (x.width(), c.in_ch, c.out_ch);
    let (kh, kw) = (c.kernel_h, c.kernel_w);
    let wt = &c.weights;
    let data = x.data();
    let mut out = vec![0.0f32; out_shape.len()];
    let mut acc = vec![0.0f32; POSITION_BLOCK * oc];
    for oy in 0..out_shape.height {
        let mut ox = 0;
        while ox < out_shape.width {
            let n = POSITION_BLOCK.min(out_shape.width - ox);
            for p in 0..n {
                acc[p * oc..(p + 1) * oc].copy_from_slice(&c.bias);
            }
            for ky in 0..kh {
                let row = (oy * c.stride + ky) * iw;
                for kx in 0..kw {
                    for ci in 0..ic {
                        let w = &wt[((ky * kw + kx) * ic + ci) * oc..][..oc];
                        for p in 0..n {
                            let v = data[(row + (ox + p) * c.stride + kx) * ic + ci];
                            let a = &mut acc[p * oc..(p + 1) * oc];
                            for (a, w) in a.iter_mut().zip(w) {
                                *a += v * w;
                            }
                        }
                    }
                }
            }
            let base = (oy * out_shape.width + ox) * oc;
            out[base..base + n * oc].copy_from_slice(&acc[..n * oc]);
            ox += n;
        }
    }
    Tensor::from_vec(out_shape, out).expect("conv output shape")
}

fn pad_input(input: &Tensor, pad: usize) -> Tensor {
    let s = input.shape();
    let shape = Shape::new(s.height + 2 * pad, s.width + 2 * pad, s.channels);
    let mut out = Tensor::zeros(shape);
    let rowlen = s.width * s.channels;
    for y in 0..s.height {
        let src = input.index(y, 0, 0);
        let dst = out.index(y + pad, pad, 0);
        out.data_mut()[dst..dst + rowlen].copy_from_slice(&input.data()[src..src + rowlen]);
    }
    out
}

fn sparse_conv_forward(c: &SparseConv2d, input: &Tensor, out_shape: Shape) -> Tensor {
    let x = input.data();
    let iw = input.width();
    let ic = c.in_ch;
    // Entry offsets relative to the window's top-left element.
    let offsets: Vec<usize> = c
        .entries
        .iter()
        .map(|e| (e.ky as usize * iw + e.kx as usize) * ic + e.ch as usize)
        .collect();
    let mut out = Vec::with_capacity(out_shape.len());
    for oy in 0..out_shape.height {
        for ox in 0..out_shape.width {
            let base = (oy * iw + ox) * ic;
            let start = out.len();
            out.extend_from_slice(&c.bias);
            let cell = &mut out[start..];
            for (e, off) in c.entries.iter().zip(&offsets) {
                cell[e.out as usize] += e.weight * x[base + off];
            }
        }
    }
    Tensor::from_vec(out_shape, out).expect("sparse conv output shape")
}
