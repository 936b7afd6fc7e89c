//! Compilation of a forest into a two-hidden-layer network.
//!
//! Layer 1 holds one tanh neuron per split node computing
//! `c01·x[f] − c01·θ`; layer 2 holds one sigmoid neuron per leaf, wired with
//! `±c12` to the split neurons on the leaf's path (negative for a left turn)
//! and biased by `−c12·(|P(l)| − 1)`; the linear output layer carries
//! `c23·y^l` for every leaf. Neurons are ordered tree by tree, nodes in
//! preorder.
//!
//! The compiled form keeps `f64` weights so that hard mode reproduces the
//! forest exactly; [`CompiledRFNet::to_network`] produces the `f32` layer
//! stack that gets fused into the detector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convnet::{Activation, Dense, DenseEntry, Layer, NetError, Network, Shape, SparseDense, Tensor};
use crate::forest::{DecisionTree, Direction, Forest, Node};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("mapping constants must be positive and finite (c01 = {c01}, c12 = {c12}, c23 = {c23})")]
    InvalidConstants { c01: f64, c12: f64, c23: f64 },
    #[error("input has {found} features, network expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

impl From<MapError> for NetError {
    fn from(e: MapError) -> Self {
        NetError::DimensionMismatch(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapConstants {
    pub c01: f64,
    pub c12: f64,
    /// Output scale for a single tree; forests always use `1/T`.
    pub c23: f64,
    /// Replace tanh/sigmoid by exact sign/step functions.
    pub hard_mode: bool,
}

impl Default for MapConstants {
    fn default() -> Self {
        MapConstants {
            c01: 1e4,
            c12: 1e4,
            c23: 1.0,
            hard_mode: false,
        }
    }
}

impl MapConstants {
    pub fn soft(c01: f64, c12: f64) -> Self {
        MapConstants {
            c01,
            c12,
            ..Default::default()
        }
    }

    pub fn hard() -> Self {
        MapConstants {
            hard_mode: true,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), MapError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.c01) && ok(self.c12) && ok(self.c23) {
            Ok(())
        } else {
            Err(MapError::InvalidConstants {
                c01: self.c01,
                c12: self.c12,
                c23: self.c23,
            })
        }
    }
}

/// Coordinate-list layer; entries are grouped by output neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `(output, input, weight)`
    pub entries: Vec<(usize, usize, f64)>,
    pub bias: Vec<f64>,
}

impl SparseLayer {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for &(o, i, w) in &self.entries {
            out[o] += w * x[i];
        }
        out
    }

    /// Nonzero count per output neuron.
    pub fn fan_in(&self) -> Vec<usize> {
        let mut n = vec![0; self.out_dim];
        for &(o, _, w) in &self.entries {
            if w != 0.0 {
                n[o] += 1;
            }
        }
        n
    }

    fn to_layer(&self) -> Layer {
        Layer::SparseDense(SparseDense {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            entries: self
                .entries
                .iter()
                .map(|&(o, i, w)| DenseEntry {
                    out: o as u32,
                    input: i as u32,
                    weight: w as f32,
                })
                .collect(),
            bias: self.bias.iter().map(|&b| b as f32).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `[out][in]`.
    pub weights: Vec<f64>,
}

/// Activations of every layer for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub split_pre: Vec<f64>,
    pub split_act: Vec<f64>,
    pub leaf_pre: Vec<f64>,
    pub leaf_act: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledRFNet {
    pub layer1: SparseLayer,
    pub layer2: SparseLayer,
    pub layer3: DenseLayer,
    pub constants: MapConstants,
    pub n_trees: usize,
    /// Per tree, the range of layer-2 neurons it owns.
    pub tree_leaf_ranges: Vec<std::ops::Range<usize>>,
}

impl CompiledRFNet {
    pub fn input_dim(&self) -> usize {
        self.layer1.in_dim
    }

    pub fn n_classes(&self) -> usize {
        self.layer3.out_dim
    }

    pub fn trace(&self, x: &[f64]) -> Result<Trace, MapError> {
        if x.len() != self.input_dim() {
            return Err(MapError::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let hard = self.constants.hard_mode;
        let split_pre = self.layer1.apply(x);
        let split_act: Vec<f64> = split_pre
            .iter()
            .map(|&v| {
                if hard {
                    if v >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                } else {
                    v.tanh()
                }
            })
            .collect();
        let leaf_pre = self.layer2.apply(&split_act);
        let leaf_act: Vec<f64> = leaf_pre
            .iter()
            .map(|&v| {
                if hard {
                    if v > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    1.0 / (1.0 + (-v).exp())
                }
            })
            .collect();
        let l3 = &self.layer3;
        let output = (0..l3.out_dim)
            .map(|c| {
                let row = &l3.weights[c * l3.in_dim..(c + 1) * l3.in_dim];
                row.iter().zip(&leaf_act).map(|(w, a)| w * a).sum()
            })
            .collect();
        Ok(Trace {
            split_pre,
            split_act,
            leaf_pre,
            leaf_act,
            output,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, MapError> {
        Ok(self.trace(x)?.output)
    }

    pub fn forward_f32(&self, x: &[f32]) -> Result<Vec<f64>, MapError> {
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        self.forward(&x)
    }

    /// The same network as an `f32` layer stack for the inference engine.
    pub fn to_network(&self, patch_size: usize) -> Result<Network, NetError> {
        let (a1, a2) = if self.constants.hard_mode {
            (Activation::Sign, Activation::Step)
        } else {
            (Activation::Tanh, Activation::Sigmoid)
        };
        let l3 = &self.layer3;
        let layers = vec![
            self.layer1.to_layer(),
            Layer::Activation(a1),
            self.layer2.to_layer(),
            Layer::Activation(a2),
            Layer::Dense(Dense {
                in_dim: l3.in_dim,
                out_dim: l3.out_dim,
                weights: l3.weights.iter().map(|&w| w as f32).collect(),
                bias: vec![0.0; l3.out_dim],
            }),
        ];
        Network::new(layers, patch_size)
    }

    /// Number of stored weights and biases.
    pub fn parameter_count(&self) -> usize {
        self.layer1.entries.len()
            + self.layer1.bias.len()
            + self.layer2.entries.len()
            + self.layer2.bias.len()
            + self.layer3.weights.len()
    }
}

struct TreeParts {
    l1_entries: Vec<(usize, usize, f64)>,
    l1_bias: Vec<f64>,
    l2_entries: Vec<(usize, usize, f64)>,
    l2_bias: Vec<f64>,
    /// Votes per leaf neuron, leaves in preorder.
    leaf_votes: Vec<Vec<f64>>,
}

fn compile_tree(tree: &DecisionTree, constants: &MapConstants, split_offset: usize, leaf_offset: usize) -> TreeParts {
    let splits = tree.split_order();
    let mut split_neuron = vec![usize::MAX; tree.nodes().len()];
    let mut l1_entries = Vec::with_capacity(splits.len());
    let mut l1_bias = Vec::with_capacity(splits.len());
    for (k, &node) in splits.iter().enumerate() {
        let Node::Split(s) = &tree.nodes()[node] else { unreachable!() };
        split_neuron[node] = split_offset + k;
        l1_entries.push((split_offset + k, s.feature, constants.c01));
        l1_bias.push(-constants.c01 * s.threshold as f64);
    }
    let paths = tree.leaf_paths();
    let mut l2_entries = Vec::new();
    let mut l2_bias = Vec::with_capacity(paths.len());
    let mut leaf_votes = Vec::with_capacity(paths.len());
    for (k, path) in paths.iter().enumerate() {
        for step in &path.steps {
            let w = match step.direction {
                Direction::Left => -constants.c12,
                Direction::Right => constants.c12,
            };
            l2_entries.push((leaf_offset + k, split_neuron[step.node], w));
        }
        l2_bias.push(-constants.c12 * (path.steps.len() as f64 - 1.0));
        let Node::Leaf(leaf) = &tree.nodes()[path.leaf] else { unreachable!() };
        leaf_votes.push(leaf.votes.clone());
    }
    TreeParts {
        l1_entries,
        l1_bias,
        l2_entries,
        l2_bias,
        leaf_votes,
    }
}

fn assemble(
    parts: Vec<TreeParts>,
    input_dim: usize,
    n_classes: usize,
    c23: f64,
    constants: MapConstants,
) -> CompiledRFNet {
    let n_splits: usize = parts.iter().map(|p| p.l1_bias.len()).sum();
    let n_leaves: usize = parts.iter().map(|p| p.l2_bias.len()).sum();
    let mut layer1 = SparseLayer {
        in_dim: input_dim,
        out_dim: n_splits,
        entries: Vec::with_capacity(n_splits),
        bias: Vec::with_capacity(n_splits),
    };
    let mut layer2 = SparseLayer {
        in_dim: n_splits,
        out_dim: n_leaves,
        entries: Vec::new(),
        bias: Vec::with_capacity(n_leaves),
    };
    let mut weights = vec![0.0; n_classes * n_leaves];
    let mut ranges = Vec::with_capacity(parts.len());
    let mut leaf = 0;
    for p in parts {
        layer1.entries.extend(p.l1_entries);
        layer1.bias.extend(p.l1_bias);
        layer2.entries.extend(p.l2_entries);
        layer2.bias.extend(p.l2_bias);
        let start = leaf;
        for votes in p.leaf_votes {
            for (c, v) in votes.iter().enumerate() {
                weights[c * n_leaves + leaf] = c23 * v;
            }
            leaf += 1;
        }
        ranges.push(start..leaf);
    }
    CompiledRFNet {
        layer1,
        layer2,
        layer3: DenseLayer {
            in_dim: n_leaves,
            out_dim: n_classes,
            weights,
        },
        constants: MapConstants { c23, ..constants },
        n_trees: ranges.len(),
        tree_leaf_ranges: ranges,
    }
}

/// Compiles one tree using `constants.c23` as the output scale.
pub fn map_tree(
    tree: &DecisionTree,
    n_classes: usize,
    input_dim: usize,
    constants: &MapConstants,
) -> Result<CompiledRFNet, MapError> {
    constants.validate()?;
    let parts = compile_tree(tree, constants, 0, 0);
    Ok(assemble(vec![parts], input_dim, n_classes, constants.c23, *constants))
}

/// Compiles every tree and concatenates the hidden layers; the output layer
/// is shared and scaled by `1/T` so it averages the trees.
pub fn map_forest(forest: &Forest, constants: &MapConstants) -> Result<CompiledRFNet, MapError> {
    let c23 = 1.0 / forest.n_trees() as f64;
    MapConstants { c23, ..*constants }.validate()?;
    let mut parts = Vec::with_capacity(forest.n_trees());
    let (mut splits, mut leaves) = (0, 0);
    for tree in forest.trees() {
        let p = compile_tree(tree, constants, splits, leaves);
        splits += p.l1_bias.len();
        leaves += p.l2_bias.len();
        parts.push(p);
    }
    Ok(assemble(parts, forest.input_dim(), forest.n_classes(), c23, *constants))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub hard_mode: bool,
    pub margin_eps: f64,
    /// Largest distribution gap that counts towards `n_exact`.
    pub exact_tolerance: f64,
    pub n_tested: usize,
    /// Samples dropped for lying within `margin_eps` of a threshold on their path.
    pub n_skipped: usize,
    pub n_agree: usize,
    /// Samples whose full distribution matched within `exact_tolerance`.
    pub n_exact: usize,
    pub max_prob_gap: f64,
}

impl EquivalenceReport {
    pub fn agreement(&self) -> f64 {
        if self.n_tested == 0 {
            1.0
        } else {
            self.n_agree as f64 / self.n_tested as f64
        }
    }
}

/// Distribution tolerance used for hard-mode comparisons.
pub const EXACT_TOLERANCE: f64 = 1e-12;

/// Gap below the top probability within which classes count as tied.
const TIE_TOLERANCE: f64 = 1e-9;

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the forest and the compiled network on every sample that lies at
/// least `margin_eps` from each threshold on its routing paths. The network's
/// argmax agrees with the forest when it picks one of the forest's top classes
/// (classes within 1e-9 of the maximum are tied).
pub fn verify_equivalence(
    forest: &Forest,
    net: &CompiledRFNet,
    samples: &[Vec<f32>],
    margin_eps: f64,
) -> Result<EquivalenceReport, MapError> {
    compare(forest, net.constants.hard_mode, samples, margin_eps, EXACT_TOLERANCE, |x| {
        net.forward_f32(x)
    })
}

/// Tolerance for full-distribution agreement of the `f32` engine network.
pub const ENGINE_TOLERANCE: f64 = 1e-6;

/// [`verify_equivalence`] for the `f32` layer stack produced by
/// [`CompiledRFNet::to_network`]; distributions count as exact within
/// [`ENGINE_TOLERANCE`].
pub fn verify_network_equivalence(
    forest: &Forest,
    net: &Network,
    hard_mode: bool,
    samples: &[Vec<f32>],
    margin_eps: f64,
) -> Result<EquivalenceReport, NetError> {
    compare(forest, hard_mode, samples, margin_eps, ENGINE_TOLERANCE, |x| {
        let input = Tensor::from_vec(Shape::new(1, 1, x.len()), x.to_vec())?;
        Ok(net.forward(&input)?.data().iter().map(|&v| v as f64).collect())
    })
}

fn compare<E: From<MapError>>(
    forest: &Forest,
    hard_mode: bool,
    samples: &[Vec<f32>],
    margin_eps: f64,
    exact_tolerance: f64,
    run: impl Fn(&[f32]) -> Result<Vec<f64>, E>,
) -> Result<EquivalenceReport, E> {
    let mut report = EquivalenceReport {
        hard_mode,
        margin_eps,
        exact_tolerance,
        n_tested: 0,
        n_skipped: 0,
        n_agree: 0,
        n_exact: 0,
        max_prob_gap: 0.0,
    };
    for x in samples {
        if x.len() != forest.input_dim() {
            return Err(MapError::DimensionMismatch {
                expected: forest.input_dim(),
                found: x.len(),
            }
            .into());
        }
        if forest.path_margin(x).is_some_and(|m| m < margin_eps) {
            report.n_skipped += 1;
            continue;
        }
        let expected = forest.predict(x).expect("length checked above");
        let got = run(x)?;
        report.n_tested += 1;
        let gap = expected
            .iter()
            .zip(&got)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        report.max_prob_gap = report.max_prob_gap.max(gap);
        if gap <= exact_tolerance {
            report.n_exact += 1;
        }
        let top = expected.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if expected[argmax(&got)] >= top - TIE_TOLERANCE {
            report.n_agree += 1;
        }
    }
    Ok(report)
}
