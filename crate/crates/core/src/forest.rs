//! Random forests with axis-aligned splits and normalized class-vote leaves.
//!
//! Trees are stored as a preorder arena: node 0 is the root, and the left
//! subtree of every split node immediately follows it. The compiled network
//! orders its neurons by this preorder, so keeping the arena in preorder is
//! what makes compilation deterministic.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when checking that leaf votes are normalized.
pub const VOTE_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForestError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("sample {index} has {found} features, expected {expected}")]
    InconsistentDim {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("label {label} of sample {index} is outside [0, {n_classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        n_classes: usize,
    },
    #[error("input has {found} features, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("invalid forest: {0}")]
    InvalidForest(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

/// Routing direction out of a split node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitNode {
    pub feature: usize,
    pub threshold: f32,
    pub left: usize,
    pub right: usize,
}

impl SplitNode {
    /// `x[f] < θ` routes left, `x[f] ≥ θ` routes right.
    #[inline]
    pub fn route(&self, x: &[f32]) -> Direction {
        if x[self.feature] < self.threshold {
            Direction::Left
        } else {
            Direction::Right
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafNode {
    pub votes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split(SplitNode),
    Leaf(LeafNode),
}

/// One step on a root-to-leaf path: the split node and the branch taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    pub node: usize,
    pub direction: Direction,
}

/// The unique root path of a leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafPath {
    pub leaf: usize,
    pub steps: Vec<PathStep>,
}

/// A node in the flat preorder encoding used by the forest document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreorderNode {
    Split { feature: usize, threshold: f32 },
    Leaf { votes: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    /// Builds a tree from an arena rooted at node 0 and checks its structure.
    pub fn from_nodes(nodes: Vec<Node>, n_classes: usize, input_dim: usize) -> Result<Self, ForestError> {
        let tree = DecisionTree { nodes };
        tree.validate(n_classes, input_dim)?;
        Ok(tree)
    }

    /// Rebuilds a tree from its preorder node list.
    pub fn from_preorder(
        list: &[PreorderNode],
        n_classes: usize,
        input_dim: usize,
    ) -> Result<Self, ForestError> {
        fn build(list: &[PreorderNode], pos: &mut usize, nodes: &mut Vec<Node>) -> Result<usize, ForestError> {
            let item = list
                .get(*pos)
                .ok_or_else(|| ForestError::InvalidTree("preorder list ends inside a subtree".into()))?;
            *pos += 1;
            let idx = nodes.len();
            match item {
                PreorderNode::Leaf { votes } => {
                    nodes.push(Node::Leaf(LeafNode { votes: votes.clone() }));
                }
                PreorderNode::Split { feature, threshold } => {
                    nodes.push(Node::Split(SplitNode {
                        feature: *feature,
                        threshold: *threshold,
                        left: usize::MAX,
                        right: usize::MAX,
                    }));
                    let left = build(list, pos, nodes)?;
                    let right = build(list, pos, nodes)?;
                    if let Node::Split(s) = &mut nodes[idx] {
                        s.left = left;
                        s.right = right;
                    }
                }
            }
            Ok(idx)
        }
        let mut nodes = Vec::with_capacity(list.len());
        let mut pos = 0;
        build(list, &mut pos, &mut nodes)?;
        if pos != list.len() {
            return Err(ForestError::InvalidTree(format!(
                "{} trailing nodes after the root subtree",
                list.len() - pos
            )));
        }
        Self::from_nodes(nodes, n_classes, input_dim)
    }

    /// Preorder node list; the inverse of [`DecisionTree::from_preorder`].
    pub fn to_preorder(&self) -> Vec<PreorderNode> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            match &self.nodes[i] {
                Node::Leaf(l) => out.push(PreorderNode::Leaf { votes: l.votes.clone() }),
                Node::Split(s) => {
                    out.push(PreorderNode::Split {
                        feature: s.feature,
                        threshold: s.threshold,
                    });
                    stack.push(s.right);
                    stack.push(s.left);
                }
            }
        }
        out
    }

    fn validate(&self, n_classes: usize, input_dim: usize) -> Result<(), ForestError> {
        if self.nodes.is_empty() {
            return Err(ForestError::InvalidTree("no nodes".into()));
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            match &self.nodes[i] {
                Node::Leaf(l) => {
                    if l.votes.len() != n_classes {
                        return Err(ForestError::InvalidTree(format!(
                            "leaf {i} has {} votes, expected {n_classes}",
                            l.votes.len()
                        )));
                    }
                    if l.votes.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                        return Err(ForestError::InvalidTree(format!("leaf {i} has a negative or non-finite vote")));
                    }
                    let sum: f64 = l.votes.iter().sum();
                    if (sum - 1.0).abs() > VOTE_SUM_TOLERANCE {
                        return Err(ForestError::InvalidTree(format!("leaf {i} votes sum to {sum}")));
                    }
                }
                Node::Split(s) => {
                    if s.feature >= input_dim {
                        return Err(ForestError::InvalidTree(format!(
                            "split {i} uses feature {} of {input_dim}",
                            s.feature
                        )));
                    }
                    if !s.threshold.is_finite() {
                        return Err(ForestError::InvalidTree(format!("split {i} has a non-finite threshold")));
                    }
                    for child in [s.left, s.right] {
                        if child >= self.nodes.len() {
                            return Err(ForestError::InvalidTree(format!("split {i} points at missing node {child}")));
                        }
                        if seen[child] {
                            return Err(ForestError::InvalidTree(format!("node {child} is reachable twice")));
                        }
                        seen[child] = true;
                        stack.push(child);
                    }
                }
            }
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return Err(ForestError::InvalidTree(format!("node {orphan} is unreachable")));
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_splits(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Split(_))).count()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.len() - self.n_splits()
    }

    /// Longest root-to-leaf path, counted in split nodes.
    pub fn depth(&self) -> usize {
        self.leaf_paths().iter().map(|p| p.steps.len()).max().unwrap_or(0)
    }

    /// Index of the leaf `x` is routed to. Assumes `x` has been length-checked.
    pub fn leaf_index(&self, x: &[f32]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(_) => return i,
                Node::Split(s) => {
                    i = match s.route(x) {
                        Direction::Left => s.left,
                        Direction::Right => s.right,
                    }
                }
            }
        }
    }

    /// The split nodes visited while routing `x`, root first.
    pub fn route_path(&self, x: &[f32]) -> Vec<usize> {
        let mut path = Vec::new();
        let mut i = 0;
        while let Node::Split(s) = &self.nodes[i] {
            path.push(i);
            i = match s.route(x) {
                Direction::Left => s.left,
                Direction::Right => s.right,
            };
        }
        path
    }

    pub fn predict(&self, x: &[f32], input_dim: usize) -> Result<&[f64], ForestError> {
        if x.len() != input_dim {
            return Err(ForestError::DimensionMismatch {
                expected: input_dim,
                found: x.len(),
            });
        }
        match &self.nodes[self.leaf_index(x)] {
            Node::Leaf(l) => Ok(&l.votes),
            Node::Split(_) => unreachable!("leaf_index always ends on a leaf"),
        }
    }

    /// Root paths of all leaves, leaves in preorder.
    pub fn leaf_paths(&self) -> Vec<LeafPath> {
        let mut out = Vec::new();
        let mut stack: Vec<(usize, Vec<PathStep>)> = vec![(0, Vec::new())];
        while let Some((i, steps)) = stack.pop() {
            match &self.nodes[i] {
                Node::Leaf(_) => out.push(LeafPath { leaf: i, steps }),
                Node::Split(s) => {
                    let mut right = steps.clone();
                    right.push(PathStep {
                        node: i,
                        direction: Direction::Right,
                    });
                    let mut left = steps;
                    left.push(PathStep {
                        node: i,
                        direction: Direction::Left,
                    });
                    stack.push((s.right, right));
                    stack.push((s.left, left));
                }
            }
        }
        out
    }

    /// Split node indices in preorder.
    pub fn split_order(&self) -> Vec<usize> {
        self.preorder_indices()
            .into_iter()
            .filter(|&i| matches!(self.nodes[i], Node::Split(_)))
            .collect()
    }

    fn preorder_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            out.push(i);
            if let Node::Split(s) = &self.nodes[i] {
                stack.push(s.right);
                stack.push(s.left);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<DecisionTree>,
    n_classes: usize,
    input_dim: usize,
}

impl Forest {
    pub fn new(trees: Vec<DecisionTree>, n_classes: usize, input_dim: usize) -> Result<Self, ForestError> {
        if trees.is_empty() {
            return Err(ForestError::InvalidForest("a forest needs at least one tree".into()));
        }
        if n_classes == 0 || input_dim == 0 {
            return Err(ForestError::InvalidForest("n_classes and input_dim must be positive".into()));
        }
        for tree in &trees {
            tree.validate(n_classes, input_dim)?;
        }
        Ok(Forest {
            trees,
            n_classes,
            input_dim,
        })
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_splits(&self) -> usize {
        self.trees.iter().map(DecisionTree::n_splits).sum()
    }

    pub fn n_leaves(&self) -> usize {
        self.trees.iter().map(DecisionTree::n_leaves).sum()
    }

    pub fn predict_tree(&self, tree: usize, x: &[f32]) -> Result<&[f64], ForestError> {
        self.trees[tree].predict(x, self.input_dim)
    }

    /// Mean of the per-tree leaf distributions.
    pub fn predict(&self, x: &[f32]) -> Result<Vec<f64>, ForestError> {
        let mut acc = vec![0.0f64; self.n_classes];
        for tree in &self.trees {
            for (a, v) in acc.iter_mut().zip(tree.predict(x, self.input_dim)?) {
                *a += v;
            }
        }
        let scale = 1.0 / self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a *= scale);
        Ok(acc)
    }

    /// Smallest distance between `x` and the threshold of any split on its
    /// routing paths, or `None` for a forest of single leaves.
    pub fn path_margin(&self, x: &[f32]) -> Option<f64> {
        let mut best: Option<f64> = None;
        for tree in &self.trees {
            for i in tree.route_path(x) {
                if let Node::Split(s) = &tree.nodes[i] {
                    let gap = (x[s.feature] as f64 - s.threshold as f64).abs();
                    best = Some(best.map_or(gap, |b| b.min(gap)));
                }
            }
        }
        best
    }
}

/// Labeled training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    fn check(&self) -> Result<usize, ForestError> {
        if self.features.is_empty() {
            return Err(ForestError::EmptyDataset);
        }
        if self.labels.len() != self.features.len() {
            return Err(ForestError::InvalidConfig(format!(
                "{} feature vectors but {} labels",
                self.features.len(),
                self.labels.len()
            )));
        }
        let dim = self.features[0].len();
        if dim == 0 {
            return Err(ForestError::InconsistentDim {
                index: 0,
                expected: 1,
                found: 0,
            });
        }
        for (index, f) in self.features.iter().enumerate() {
            if f.len() != dim {
                return Err(ForestError::InconsistentDim {
                    index,
                    expected: dim,
                    found: f.len(),
                });
            }
        }
        for (index, &label) in self.labels.iter().enumerate() {
            if label >= self.n_classes {
                return Err(ForestError::LabelOutOfRange {
                    index,
                    label,
                    n_classes: self.n_classes,
                });
            }
        }
        Ok(dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_trees: usize,
    /// `None` grows until nodes are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// `None` means ⌈√input_dim⌉.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_trees: 10,
            max_depth: None,
            min_samples_split: 2,
            features_per_split: None,
            bootstrap: true,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ForestError> {
        if self.n_trees == 0 {
            return Err(ForestError::InvalidConfig("n_trees must be at least 1".into()));
        }
        if self.max_depth == Some(0) {
            return Err(ForestError::InvalidConfig("max_depth must be at least 1".into()));
        }
        if self.min_samples_split == 0 {
            return Err(ForestError::InvalidConfig("min_samples_split must be at least 1".into()));
        }
        if self.features_per_split == Some(0) {
            return Err(ForestError::InvalidConfig("features_per_split must be at least 1".into()));
        }
        Ok(())
    }
}

/// splitmix64 finalizer, used to derive independent per-tree seeds.
fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn train_forest(data: &Dataset, config: &TrainConfig) -> Result<Forest, ForestError> {
    config.validate()?;
    let dim = data.check()?;
    let features_per_split = config
        .features_per_split
        .unwrap_or_else(|| (dim as f64).sqrt().ceil() as usize)
        .min(dim);
    let trees: Vec<DecisionTree> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.rng_seed, t as u64));
            let mut indices: Vec<usize> = if config.bootstrap {
                (0..data.features.len())
                    .map(|_| rng.random_range(0..data.features.len()))
                    .collect()
            } else {
                (0..data.features.len()).collect()
            };
            let mut grower = Grower {
                data,
                dim,
                features_per_split,
                max_depth: config.max_depth,
                min_samples_split: config.min_samples_split,
                rng,
                nodes: Vec::new(),
            };
            grower.grow(&mut indices, 0);
            DecisionTree { nodes: grower.nodes }
        })
        .collect();
    Forest::new(trees, data.n_classes, dim)
}

struct Grower<'a> {
    data: &'a Dataset,
    dim: usize,
    features_per_split: usize,
    max_depth: Option<usize>,
    min_samples_split: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

struct Candidate {
    feature: usize,
    threshold: f32,
    /// Weighted child impurity, n_left·gini_left + n_right·gini_right.
    score: f64,
}

fn gini_mass(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let sq: f64 = counts.iter().map(|&c| (c as f64) * (c as f64)).sum();
    n - sq / n
}

/// Threshold strictly above `lo` and at most `hi`, so `lo` routes left and
/// `hi` routes right.
fn split_threshold(lo: f32, hi: f32) -> f32 {
    let mid = ((lo as f64 + hi as f64) * 0.5) as f32;
    if mid <= lo {
        hi
    } else {
        mid
    }
}

impl Grower<'_> {
    fn histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0usize; self.data.n_classes];
        for &i in indices {
            counts[self.data.labels[i]] += 1;
        }
        counts
    }

    fn push_leaf(&mut self, counts: &[usize], n: usize) -> usize {
        let votes = counts.iter().map(|&c| c as f64 / n as f64).collect();
        self.nodes.push(Node::Leaf(LeafNode { votes }));
        self.nodes.len() - 1
    }

    fn grow(&mut self, indices: &mut [usize], depth: usize) -> usize {
        let counts = self.histogram(indices);
        let n = indices.len();
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_reached = self.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_reached || n < self.min_samples_split.max(2) {
            return self.push_leaf(&counts, n);
        }
        let Some(best) = self.best_split(indices) else {
            return self.push_leaf(&counts, n);
        };
        let idx = self.nodes.len();
        self.nodes.push(Node::Split(SplitNode {
            feature: best.feature,
            threshold: best.threshold,
            left: usize::MAX,
            right: usize::MAX,
        }));
        let data = self.data;
        let (mut left, mut right): (Vec<usize>, Vec<usize>) = indices
            .iter()
            .partition(|&&i| data.features[i][best.feature] < best.threshold);
        let l = self.grow(&mut left, depth + 1);
        let r = self.grow(&mut right, depth + 1);
        if let Node::Split(s) = &mut self.nodes[idx] {
            s.left = l;
            s.right = r;
        }
        idx
    }

    /// Best Gini split among `features_per_split` random features. If none of
    /// them separates the samples, the remaining features are tried in the
    /// same random order until one does.
    fn best_split(&mut self, indices: &[usize]) -> Option<Candidate> {
        let mut order: Vec<usize> = (0..self.dim).collect();
        order.shuffle(&mut self.rng);
        let mut best: Option<Candidate> = None;
        for (tried, &feature) in order.iter().enumerate() {
            if tried >= self.features_per_split && best.is_some() {
                break;
            }
            if let Some(c) = self.best_threshold(indices, feature) {
                if best.as_ref().is_none_or(|b| c.score < b.score) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn best_threshold(&self, indices: &[usize], feature: usize) -> Option<Candidate> {
        let data = self.data;
        let mut sorted: Vec<(f32, usize)> = indices
            .iter()
            .map(|&i| (data.features[i][feature], data.labels[i]))
            .collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = sorted.len();
        let mut left = vec![0usize; data.n_classes];
        let mut right = vec![0usize; data.n_classes];
        for &(_, y) in &sorted {
            right[y] += 1;
        }
        let mut best: Option<Candidate> = None;
        for k in 0..n - 1 {
            let (v, y) = sorted[k];
            left[y] += 1;
            right[y] -= 1;
            let next = sorted[k + 1].0;
            if next <= v {
                continue;
            }
            let n_left = k + 1;
            let score = gini_mass(&left, n_left) + gini_mass(&right, n - n_left);
            if best.as_ref().is_none_or(|b| score < b.score) {
                best = Some(Candidate {
                    feature,
                    threshold: split_threshold(v, next),
                    score,
                });
            }
        }
        best
    }
}

/// Shape of a synthetic forest drawn by [`random_forest`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomForestShape {
    pub n_trees: usize,
    pub max_depth: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    /// Probability that a node above `max_depth` splits (the root always does).
    pub split_probability: f64,
}

/// Draws a forest with random structure, uniform thresholds in (0, 1) and
/// random normalized votes. Used for benchmarks and equivalence sweeps where
/// the forest's accuracy is irrelevant.
pub fn random_forest<R: Rng>(rng: &mut R, shape: RandomForestShape) -> Forest {
    fn grow<R: Rng>(rng: &mut R, shape: &RandomForestShape, depth: usize, nodes: &mut Vec<Node>) -> usize {
        let idx = nodes.len();
        let split = depth < shape.max_depth && (depth == 0 || rng.random::<f64>() < shape.split_probability);
        if !split {
            let raw: Vec<f64> = (0..shape.n_classes).map(|_| rng.random::<f64>() + 1e-3).collect();
            let sum: f64 = raw.iter().sum();
            nodes.push(Node::Leaf(LeafNode {
                votes: raw.iter().map(|v| v / sum).collect(),
            }));
            return idx;
        }
        nodes.push(Node::Split(SplitNode {
            feature: rng.random_range(0..shape.input_dim),
            threshold: rng.random_range(0.02f32..0.98),
            left: usize::MAX,
            right: usize::MAX,
        }));
        let l = grow(rng, shape, depth + 1, nodes);
        let r = grow(rng, shape, depth + 1, nodes);
        if let Node::Split(s) = &mut nodes[idx] {
            s.left = l;
            s.right = r;
        }
        idx
    }
    let trees = (0..shape.n_trees.max(1))
        .map(|_| {
            let mut nodes = Vec::new();
            grow(rng, &shape, 0, &mut nodes);
            DecisionTree { nodes }
        })
        .collect();
    Forest::new(trees, shape.n_classes, shape.input_dim).expect("random forests are well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stump(theta: f32) -> DecisionTree {
        DecisionTree::from_nodes(
            vec![
                Node::Split(SplitNode {
                    feature: 0,
                    threshold: theta,
                    left: 1,
                    right: 2,
                }),
                Node::Leaf(LeafNode { votes: vec![1.0, 0.0] }),
                Node::Leaf(LeafNode { votes: vec![0.0, 1.0] }),
            ],
            2,
            1,
        )
        .unwrap()
    }

    fn one_dim(points: &[(f32, usize)]) -> Dataset {
        Dataset {
            features: points.iter().map(|p| vec![p.0]).collect(),
            labels: points.iter().map(|p| p.1).collect(),
            n_classes: 2,
        }
    }

    #[test]
    fn stump_routes_below_threshold_left() {
        let t = stump(0.5);
        assert_eq!(t.predict(&[0.4], 1).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn threshold_itself_routes_right() {
        let t = stump(0.5);
        assert_eq!(t.predict(&[0.5], 1).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn predict_rejects_wrong_dimension() {
        let t = stump(0.5);
        assert_eq!(
            t.predict(&[0.5, 1.0], 1),
            Err(ForestError::DimensionMismatch { expected: 1, found: 2 })
        );
    }

    #[test]
    fn depth_two_regions_match_path_conjunction() {
        // root: x0 < 0.5; left child: x1 < 0.3; right child: x1 < 0.7
        let nodes = vec![
            Node::Split(SplitNode { feature: 0, threshold: 0.5, left: 1, right: 4 }),
            Node::Split(SplitNode { feature: 1, threshold: 0.3, left: 2, right: 3 }),
            Node::Leaf(LeafNode { votes: vec![1.0, 0.0, 0.0, 0.0] }),
            Node::Leaf(LeafNode { votes: vec![0.0, 1.0, 0.0, 0.0] }),
            Node::Split(SplitNode { feature: 1, threshold: 0.7, left: 5, right: 6 }),
            Node::Leaf(LeafNode { votes: vec![0.0, 0.0, 1.0, 0.0] }),
            Node::Leaf(LeafNode { votes: vec![0.0, 0.0, 0.0, 1.0] }),
        ];
        let tree = DecisionTree::from_nodes(nodes, 4, 2).unwrap();
        let paths = tree.leaf_paths();
        assert_eq!(paths.len(), 4);
        for gi in 0..=40 {
            for gj in 0..=40 {
                let x = [gi as f32 / 40.0, gj as f32 / 40.0];
                let members: Vec<usize> = paths
                    .iter()
                    .filter(|p| {
                        p.steps.iter().all(|st| {
                            let Node::Split(s) = &tree.nodes()[st.node] else { unreachable!() };
                            match st.direction {
                                Direction::Left => x[s.feature] < s.threshold,
                                Direction::Right => x[s.feature] >= s.threshold,
                            }
                        })
                    })
                    .map(|p| p.leaf)
                    .collect();
                assert_eq!(members, vec![tree.leaf_index(&x)], "x = {x:?}");
            }
        }
    }

    #[test]
    fn stump_threshold_minimizes_gini_over_all_candidates() {
        let data = one_dim(&[(0.0, 0), (0.2, 0), (0.8, 1), (1.0, 1)]);
        // Exhaustive oracle over every candidate midpoint.
        let xs = [0.0f64, 0.2, 0.8, 1.0];
        let ys = [0usize, 0, 1, 1];
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..3 {
            let theta = (xs[k] + xs[k + 1]) / 2.0;
            let mut cl = [0usize; 2];
            let mut cr = [0usize; 2];
            for (x, y) in xs.iter().zip(ys) {
                if *x < theta { cl[y] += 1 } else { cr[y] += 1 }
            }
            let g = gini_mass(&cl, cl.iter().sum()) + gini_mass(&cr, cr.iter().sum());
            if g < best.0 {
                best = (g, theta);
            }
        }
        assert_eq!(best.1, 0.5);
        let cfg = TrainConfig {
            n_trees: 1,
            max_depth: Some(1),
            bootstrap: false,
            ..TrainConfig::default()
        };
        let forest = train_forest(&data, &cfg).unwrap();
        let tree = &forest.trees()[0];
        let Node::Split(root) = &tree.nodes()[0] else { panic!("expected a split") };
        assert!(root.threshold > 0.2 && root.threshold <= 0.8);
        assert_eq!(root.threshold as f64, best.1);
        assert_eq!(tree.predict(&[0.1], 1).unwrap(), &[1.0, 0.0]);
        assert_eq!(tree.predict(&[0.9], 1).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn single_class_data_gives_one_leaf_trees() {
        let data = Dataset {
            features: vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.9]],
            labels: vec![2, 2, 2],
            n_classes: 3,
        };
        let forest = train_forest(&data, &TrainConfig { n_trees: 4, ..Default::default() }).unwrap();
        for tree in forest.trees() {
            assert_eq!(tree.nodes().len(), 1);
            assert_eq!(tree.predict(&[0.0, 0.0], 2).unwrap(), &[0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn training_errors() {
        let empty = Dataset { features: vec![], labels: vec![], n_classes: 2 };
        assert_eq!(train_forest(&empty, &TrainConfig::default()), Err(ForestError::EmptyDataset));
        let ragged = Dataset {
            features: vec![vec![0.0, 1.0], vec![0.0]],
            labels: vec![0, 1],
            n_classes: 2,
        };
        assert!(matches!(
            train_forest(&ragged, &TrainConfig::default()),
            Err(ForestError::InconsistentDim { index: 1, .. })
        ));
        let bad_label = Dataset { features: vec![vec![0.0]], labels: vec![5], n_classes: 2 };
        assert!(matches!(
            train_forest(&bad_label, &TrainConfig::default()),
            Err(ForestError::LabelOutOfRange { label: 5, .. })
        ));
        let zero_trees = TrainConfig { n_trees: 0, ..Default::default() };
        assert!(matches!(
            train_forest(&one_dim(&[(0.0, 0)]), &zero_trees),
            Err(ForestError::InvalidConfig(_))
        ));
    }

    #[test]
    fn two_opposite_stumps_average() {
        let a = stump(0.5);
        let b = DecisionTree::from_nodes(
            vec![
                Node::Split(SplitNode { feature: 0, threshold: 0.5, left: 1, right: 2 }),
                Node::Leaf(LeafNode { votes: vec![0.0, 1.0] }),
                Node::Leaf(LeafNode { votes: vec![1.0, 0.0] }),
            ],
            2,
            1,
        )
        .unwrap();
        let forest = Forest::new(vec![a.clone()], 2, 1).unwrap();
        assert_eq!(forest.predict(&[0.2]).unwrap(), a.predict(&[0.2], 1).unwrap());
        let forest = Forest::new(vec![a, b], 2, 1).unwrap();
        assert_eq!(forest.predict(&[0.2]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn forest_prediction_is_mean_of_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = RandomForestShape {
            n_trees: 10,
            max_depth: 6,
            n_classes: 5,
            input_dim: 4,
            split_probability: 0.8,
        };
        let forest = random_forest(&mut rng, shape);
        for _ in 0..200 {
            let x: Vec<f32> = (0..4).map(|_| rng.random()).collect();
            let mut mean = [0.0f64; 5];
            for t in 0..10 {
                for (m, v) in mean.iter_mut().zip(forest.predict_tree(t, &x).unwrap()) {
                    *m += v / 10.0;
                }
            }
            let got = forest.predict(&x).unwrap();
            for (g, m) in got.iter().zip(mean) {
                assert!((g - m).abs() < 1e-12);
            }
            assert!((got.iter().sum::<f64>() - 1.0).abs() < VOTE_SUM_TOLERANCE);
        }
    }

    #[test]
    fn unlimited_tree_fits_training_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let features: Vec<Vec<f32>> = (0..300).map(|_| (0..6).map(|_| rng.random()).collect()).collect();
        let labels: Vec<usize> = features
            .iter()
            .map(|f| ((f[0] * 3.0) as usize + (f[3] > 0.5) as usize) % 4)
            .collect();
        let data = Dataset { features, labels, n_classes: 4 };
        let cfg = TrainConfig { n_trees: 1, bootstrap: false, ..Default::default() };
        let forest = train_forest(&data, &cfg).unwrap();
        for (x, &y) in data.features.iter().zip(&data.labels) {
            let p = forest.predict(x).unwrap();
            assert_eq!(p[y], 1.0);
        }
    }

    #[test]
    fn preorder_round_trip_and_malformed_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = RandomForestShape {
            n_trees: 3,
            max_depth: 5,
            n_classes: 3,
            input_dim: 3,
            split_probability: 0.7,
        };
        let forest = random_forest(&mut rng, shape);
        for tree in forest.trees() {
            let list = tree.to_preorder();
            assert_eq!(&DecisionTree::from_preorder(&list, 3, 3).unwrap(), tree);
            assert!(DecisionTree::from_preorder(&list[..list.len() - 1], 3, 3).is_err());
        }
        let bad = [PreorderNode::Split { feature: 9, threshold: 0.5 }, leaf(), leaf()];
        assert!(DecisionTree::from_preorder(&bad, 2, 3).is_err());
        fn leaf() -> PreorderNode {
            PreorderNode::Leaf { votes: vec![0.5, 0.5] }
        }
    }

    #[test]
    fn split_threshold_separates_adjacent_floats() {
        let lo = 1.0f32;
        let hi = f32::from_bits(lo.to_bits() + 1);
        let t = split_threshold(lo, hi);
        assert!(lo < t && t <= hi);
    }
}
