//! The pipeline commands. Each one reads the files it is given, writes its
//! output files and returns a report for the front end to print.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::documents::{
    detection_file_name, detector_config_text, image_key, load_accel_trace, load_detector_config, load_filter_config,
    load_forest, load_image_list, load_lines, load_speed_trace, load_track, save_forest, save_image_list,
    CameraConfig, DetectionDocument, ImageRow, MapDocument,
};
use super::image::{load_image, load_tensor, save_tensor};
use super::model::{load_model, save_model, ModelBundle, ModelFile, ModelMetadata, FEATURES, RF_HEAD};
use super::{write_bytes, ToolError, FORMAT_VERSION, THREADS_ENV};
use crate::convnet::{conv_extent, feature_extractor, Network, Shape, Tensor};
use crate::detector::{
    default_scales, detect as run_detector, resize_bilinear, scaled_size, window_map, DetectorConfig,
};
use crate::evalkit::{evaluate, EvalReport};
use crate::forest::{train_forest, Dataset, Forest, Node, TrainConfig};
use crate::geo::{match_signs, project_sign, LocalizedSign, MatchReport};
use crate::netmap::{map_forest, verify_equivalence, verify_network_equivalence, EquivalenceReport, MapConstants};
use crate::ridefilter::{accel_events, filter_images, speed_events, FilterConfig};

/// Largest absolute difference tolerated between the fused network and the
/// patch classifier.
pub const FCN_TOLERANCE: f64 = 1e-4;

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("report serializes");
    out.push(b'\n');
    out
}

/// `"3"` asks for that many default pyramid levels, `"1,0.75"` lists them.
pub fn parse_scales(text: &str) -> Result<Vec<f64>, ToolError> {
    let bad = || ToolError::InvalidInput(format!("--scales {text:?}: expected a count or a comma-separated list"));
    let text = text.trim();
    if !text.contains([',', '.']) {
        let n: usize = text.parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(bad());
        }
        return Ok(default_scales(n));
    }
    let scales: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(bad());
    }
    Ok(scales)
}

/// `"c01,c12"`.
pub fn parse_constants(text: &str) -> Result<(f64, f64), ToolError> {
    let bad = || ToolError::InvalidInput(format!("--constants {text:?}: expected two positive numbers c01,c12"));
    let parts: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b] if a.is_finite() && a > 0.0 && b.is_finite() && b > 0.0 => Ok((a, b)),
        _ => Err(bad()),
    }
}

/// Worker cap from the environment, if set.
pub fn thread_cap() -> Result<Option<usize>, ToolError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(ToolError::InvalidInput(format!(
                "{THREADS_ENV}={v:?}: expected a positive integer"
            ))),
        },
    }
}

/// Directories expand to their `*.json` files, sorted by name.
fn expand_documents(paths: &[PathBuf]) -> Result<Vec<PathBuf>, ToolError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| super::io_error(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_features_net(path: &Path) -> Result<Network, ToolError> {
    load_model(path)?.take(FEATURES, path)
}

/// Runs the feature network on one patch and the head on its output.
pub fn classify_patch(features: &Network, head: &Network, patch: &Tensor) -> Result<Tensor, ToolError> {
    Ok(head.forward(&features.forward(patch)?)?)
}

/// The patch classifier evaluated at every stride-aligned window, in the
/// layout of the fused network's output.
pub fn patchwise_map(features: &Network, head: &Network, image: &Tensor) -> Result<Tensor, ToolError> {
    let p = features.patch_size();
    let s = features.total_stride();
    let (h, w) = (image.height(), image.width());
    let too_small = || ToolError::Dimension(format!("image {}x{w} is smaller than a {p}x{p} patch", h));
    let oh = conv_extent(h, p, s, 0).ok_or_else(too_small)?;
    let ow = conv_extent(w, p, s, 0).ok_or_else(too_small)?;
    let mut data = Vec::new();
    for i in 0..oh {
        for j in 0..ow {
            let patch = image.crop(i * s, j * s, p, p)?;
            data.extend_from_slice(classify_patch(features, head, &patch)?.data());
        }
    }
    let classes = data.len() / (oh * ow);
    Ok(Tensor::from_vec(Shape::new(oh, ow, classes), data)?)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64, ToolError> {
    if a.shape() != b.shape() {
        return Err(ToolError::Dimension(format!("maps {} and {} differ in shape", a.shape(), b.shape())));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max))
}

fn random_image(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Tensor {
    Tensor::from_fn(Shape::new(height, width, 3), |_, _, _| rng.random::<f32>())
}

// ---------------------------------------------------------------- init-features

#[derive(Debug, Clone)]
pub struct InitFeaturesArgs {
    pub out: PathBuf,
    pub seed: u64,
    pub channels: [usize; 3],
}

/// Writes a feature network with seeded random weights.
pub fn init_features(args: &InitFeaturesArgs) -> Result<String, ToolError> {
    if args.channels.contains(&0) {
        return Err(ToolError::InvalidInput("channel widths must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let net = feature_extractor(&mut rng, args.channels, 3);
    let block = net.output_shape(Shape::new(net.patch_size(), net.patch_size(), 3))?;
    let stride = net.total_stride();
    let [a, b, c] = args.channels;
    let metadata = ModelMetadata {
        patch_size: net.patch_size(),
        total_stride: stride,
        parameters: BTreeMap::from([
            ("seed".to_string(), args.seed.to_string()),
            ("channels".to_string(), format!("{a},{b},{c}")),
        ]),
        ..Default::default()
    };
    save_model(&args.out, &ModelFile::single(FEATURES, net, metadata))?;
    Ok(format!(
        "wrote {}: feature block {block} ({} features), stride {stride}",
        args.out.display(),
        block.len()
    ))
}

// ---------------------------------------------------------------- extract-features

#[derive(Debug, Clone)]
pub struct ExtractArgs {
    pub model: PathBuf,
    pub images: Vec<PathBuf>,
    pub out: PathBuf,
}

/// Feature vectors of patch images, stored as an `n × 1 × d` tensor.
pub fn extract_features(args: &ExtractArgs) -> Result<String, ToolError> {
    if args.images.is_empty() {
        return Err(ToolError::InvalidInput("no images given".into()));
    }
    let net = load_features_net(&args.model)?;
    let p = net.patch_size();
    let mut rows = Vec::with_capacity(args.images.len());
    for path in &args.images {
        let img = load_image(path)?;
        if img.height() != p || img.width() != p {
            return Err(ToolError::Dimension(format!(
                "{}: patch is {}x{}, the network takes {p}x{p}",
                path.display(),
                img.height(),
                img.width()
            )));
        }
        rows.push(net.forward(&img)?.into_data());
    }
    let d = rows[0].len();
    let n = rows.len();
    let t = Tensor::from_vec(Shape::new(n, 1, d), rows.concat())?;
    save_tensor(&args.out, &t)?;
    Ok(format!("wrote {}: {n} feature vectors of length {d}", args.out.display()))
}

// ---------------------------------------------------------------- train-forest

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub features: PathBuf,
    /// One class name per feature vector.
    pub labels: PathBuf,
    /// Class order; defaults to the sorted distinct labels.
    pub classes: Option<PathBuf>,
    pub out: PathBuf,
    pub config: TrainConfig,
}

pub fn train(args: &TrainArgs) -> Result<String, ToolError> {
    let t = load_tensor(&args.features)?;
    let n = t.height();
    let d = t.width() * t.channels();
    let labels = load_lines(&args.labels)?;
    if labels.len() != n {
        return Err(ToolError::Dimension(format!(
            "{} labels for {n} feature vectors",
            labels.len()
        )));
    }
    let class_names = match &args.classes {
        Some(p) => load_lines(p)?,
        None => labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let index: BTreeMap<&str, usize> = class_names.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let labels = labels
        .iter()
        .map(|l| {
            index
                .get(l.as_str())
                .copied()
                .ok_or_else(|| ToolError::format(&args.labels, format!("label {l:?} is not a known class")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let data = Dataset {
        features: t.data().chunks(d).map(<[f32]>::to_vec).collect(),
        labels,
        n_classes: class_names.len(),
    };
    let forest = train_forest(&data, &args.config)?;
    let summary = format!(
        "wrote {}: {} trees, {} splits, {} leaves, {} classes",
        args.out.display(),
        forest.n_trees(),
        forest.n_splits(),
        forest.n_leaves(),
        forest.n_classes()
    );
    save_forest(&args.out, &forest, class_names)?;
    Ok(summary)
}

// ---------------------------------------------------------------- compile

#[derive(Debug, Clone)]
pub struct CompileArgs {
    pub forest: PathBuf,
    pub out: PathBuf,
    pub constants: Option<(f64, f64)>,
    pub hard_mode: bool,
    pub patch_size: usize,
}

pub fn mapping_constants(constants: Option<(f64, f64)>, hard_mode: bool) -> MapConstants {
    let mut c = if hard_mode { MapConstants::hard() } else { MapConstants::default() };
    if let Some((c01, c12)) = constants {
        c.c01 = c01;
        c.c12 = c12;
    }
    c
}

fn compile_head(forest: &Forest, constants: &MapConstants, patch_size: usize) -> Result<Network, ToolError> {
    Ok(map_forest(forest, constants)?.to_network(patch_size)?)
}

/// Maps a forest onto the three-layer network and stores it as `rf_head`.
pub fn compile(args: &CompileArgs) -> Result<String, ToolError> {
    let (forest, class_names) = load_forest(&args.forest)?;
    let constants = mapping_constants(args.constants, args.hard_mode);
    let head = compile_head(&forest, &constants, args.patch_size)?;
    let metadata = ModelMetadata {
        patch_size: args.patch_size,
        total_stride: 1,
        class_names,
        constants: Some(constants),
        parameters: BTreeMap::from([
            ("trees".to_string(), forest.n_trees().to_string()),
            ("splits".to_string(), forest.n_splits().to_string()),
            ("leaves".to_string(), forest.n_leaves().to_string()),
        ]),
    };
    let params = head.parameter_count();
    save_model(&args.out, &ModelFile::single(RF_HEAD, head, metadata))?;
    Ok(format!(
        "wrote {}: {} split and {} leaf neurons, {params} parameters, {} mode",
        args.out.display(),
        forest.n_splits(),
        forest.n_leaves(),
        if constants.hard_mode { "hard" } else { "soft" }
    ))
}

// ---------------------------------------------------------------- fuse

#[derive(Debug, Clone)]
pub struct FuseArgs {
    pub features: PathBuf,
    pub head: PathBuf,
    pub out: PathBuf,
}

pub fn fuse_models(args: &FuseArgs) -> Result<String, ToolError> {
    let mut feat_file = load_model(&args.features)?;
    let features = feat_file.take(FEATURES, &args.features)?;
    let mut head_file = load_model(&args.head)?;
    let head = head_file.take(RF_HEAD, &args.head)?;
    let mut parameters: BTreeMap<String, String> = feat_file
        .metadata
        .parameters
        .into_iter()
        .map(|(k, v)| (format!("features.{k}"), v))
        .collect();
    parameters.extend(head_file.metadata.parameters.into_iter().map(|(k, v)| (format!("head.{k}"), v)));
    let metadata = ModelMetadata {
        class_names: head_file.metadata.class_names,
        constants: head_file.metadata.constants,
        parameters,
        ..Default::default()
    };
    let bundle = ModelBundle::assemble(features, head, metadata)?;
    bundle.save(&args.out)?;
    Ok(format!(
        "wrote {}: {} layers, {} classes, stride {}",
        args.out.display(),
        bundle.fcn.layers().len(),
        bundle.n_classes(),
        bundle.metadata.total_stride
    ))
}

// ---------------------------------------------------------------- detect

#[derive(Debug, Clone)]
pub struct DetectArgs {
    pub model: PathBuf,
    pub images: Vec<PathBuf>,
    pub config: Option<PathBuf>,
    pub scales: Option<Vec<f64>>,
    /// Overrides the candidate floor; without a config file it is also every
    /// class's threshold.
    pub t_min: Option<f64>,
    /// Output directory.
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutcome {
    pub documents: Vec<(PathBuf, DetectionDocument)>,
    /// Per image, the scales at which it was smaller than a patch.
    pub skipped: Vec<(String, Vec<f64>)>,
}

impl DetectOutcome {
    pub fn summary(&self) -> String {
        let mut lines: Vec<String> = self
            .documents
            .iter()
            .map(|(p, d)| format!("{}: {} detections -> {}", d.image, d.detections.len(), p.display()))
            .collect();
        for (img, s) in &self.skipped {
            lines.push(format!("{img}: skipped scales {s:?} (image smaller than a patch)"));
        }
        lines.join("\n")
    }
}

pub fn detector_config(
    bundle: &ModelBundle,
    config: Option<&Path>,
    scales: Option<Vec<f64>>,
    t_min: Option<f64>,
) -> Result<DetectorConfig, ToolError> {
    let names = if bundle.metadata.class_names.is_empty() {
        (0..bundle.n_classes()).map(|c| c.to_string()).collect()
    } else {
        bundle.metadata.class_names.clone()
    };
    let mut cfg = match config {
        Some(p) => {
            let cfg = load_detector_config(p)?;
            if cfg.class_names != names {
                return Err(ToolError::config(
                    p,
                    format!("classes {:?} do not match the model's {:?}", cfg.class_names, names),
                ));
            }
            cfg
        }
        None => {
            let mut cfg = DetectorConfig::for_classes(names);
            if let Some(t) = t_min {
                cfg.class_thresholds = vec![t; cfg.n_classes()];
            }
            cfg
        }
    };
    if let Some(s) = scales {
        cfg.scales = s;
    }
    if let Some(t) = t_min {
        cfg.t_min = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Detects signs in every image and writes one document per image into
/// the output directory. Images are processed in parallel.
pub fn detect(args: &DetectArgs) -> Result<DetectOutcome, ToolError> {
    if args.images.is_empty() {
        return Err(ToolError::InvalidInput("no images given".into()));
    }
    let bundle = ModelBundle::load(&args.model)?;
    let config = detector_config(&bundle, args.config.as_deref(), args.scales.clone(), args.t_min)?;
    let mut names = BTreeSet::new();
    for img in &args.images {
        if !names.insert(detection_file_name(img)) {
            return Err(ToolError::InvalidInput(format!(
                "two images map to the output {}",
                detection_file_name(img)
            )));
        }
    }
    let threads = thread_cap()?.unwrap_or_else(rayon::current_num_threads).min(args.images.len());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| ToolError::InvalidInput(format!("thread pool: {e}")))?;
    let results: Vec<Result<(DetectionDocument, Vec<f64>), ToolError>> = pool.install(|| {
        args.images
            .par_iter()
            .map(|path| {
                let image = load_image(path)?;
                let found = run_detector(&image, &bundle.fcn, &config)?;
                let doc = DetectionDocument::new(
                    image_key(&path.to_string_lossy()),
                    image.width(),
                    image.height(),
                    &found.boxes,
                    &config.class_names,
                );
                Ok((doc, found.skipped_scales))
            })
            .collect()
    });
    let mut outcome = DetectOutcome {
        documents: Vec::new(),
        skipped: Vec::new(),
    };
    for (path, r) in args.images.iter().zip(results) {
        let (doc, skipped) = r?;
        let out = args.out.join(detection_file_name(path));
        write_bytes(&out, &doc.to_bytes())?;
        if !skipped.is_empty() {
            outcome.skipped.push((doc.image.clone(), skipped));
        }
        outcome.documents.push((out, doc));
    }
    Ok(outcome)
}

// ---------------------------------------------------------------- verify

#[derive(Debug, Clone)]
pub struct VerifyArgs {
    pub forest: PathBuf,
    pub model: PathBuf,
    pub samples: usize,
    pub seed: u64,
    pub margin_eps: f64,
    /// Edge of the random image the fused network is checked on.
    pub image_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub format_version: u32,
    /// Recompiling the forest reproduces the stored head exactly.
    pub head_matches_forest: bool,
    /// Forest against the compiled network in `f64`.
    pub compiled: EquivalenceReport,
    /// Forest against the stored `f32` head.
    pub engine: EquivalenceReport,
    pub fcn_positions: usize,
    pub fcn_max_abs_diff: f64,
    pub fcn_tolerance: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        let exact = |r: &EquivalenceReport| !r.hard_mode || r.n_exact == r.n_tested;
        self.head_matches_forest
            && self.compiled.n_agree == self.compiled.n_tested
            && self.engine.n_agree == self.engine.n_tested
            && exact(&self.compiled)
            && self.fcn_max_abs_diff <= self.fcn_tolerance
    }

    pub fn check(&self) -> Result<(), ToolError> {
        if self.passed() {
            Ok(())
        } else {
            Err(ToolError::Verification(self.summary().replace('\n', "; ")))
        }
    }

    pub fn summary(&self) -> String {
        let line = |name: &str, r: &EquivalenceReport| {
            format!(
                "{name}: argmax agreement {:.2}% ({}/{} samples, {} skipped near thresholds), exact {}/{}, max prob gap {:.3e}",
                100.0 * r.agreement(),
                r.n_agree,
                r.n_tested,
                r.n_skipped,
                r.n_exact,
                r.n_tested,
                r.max_prob_gap
            )
        };
        [
            format!("head matches forest: {}", if self.head_matches_forest { "yes" } else { "no" }),
            line("compiled (f64)", &self.compiled),
            line("engine (f32)", &self.engine),
            format!(
                "fcn vs patch-wise: {} positions, max |diff| {:.3e} (tolerance {:.0e})",
                self.fcn_positions, self.fcn_max_abs_diff, self.fcn_tolerance
            ),
            format!("result: {}", if self.passed() { "pass" } else { "FAIL" }),
        ]
        .join("\n")
    }
}

/// Draws inputs feature by feature around the span of that feature's
/// thresholds, so every split sees both branches.
pub fn threshold_samples(forest: &Forest, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let d = forest.input_dim();
    let mut lo = vec![f32::INFINITY; d];
    let mut hi = vec![f32::NEG_INFINITY; d];
    for tree in forest.trees() {
        for node in tree.nodes() {
            if let Node::Split(s) = node {
                lo[s.feature] = lo[s.feature].min(s.threshold);
                hi[s.feature] = hi[s.feature].max(s.threshold);
            }
        }
    }
    let ranges: Vec<(f32, f32)> = lo
        .iter()
        .zip(&hi)
        .map(|(&l, &h)| {
            if l.is_finite() {
                let pad = 0.25 * (h - l).max(1e-2);
                (l - pad, h + pad)
            } else {
                (0.0, 1.0)
            }
        })
        .collect();
    (0..n)
        .map(|_| ranges.iter().map(|&(l, h)| rng.random_range(l..h)).collect())
        .collect()
}

/// Checks a bundle against the forest it was compiled from.
pub fn verify(args: &VerifyArgs) -> Result<VerifyReport, ToolError> {
    let (forest, _) = load_forest(&args.forest)?;
    let bundle = ModelBundle::load(&args.model)?;
    let constants = bundle
        .metadata
        .constants
        .ok_or_else(|| ToolError::format(&args.model, "model does not record its mapping constants"))?;
    let compiled = map_forest(&forest, &constants)?;
    let head_matches_forest = compiled.to_network(bundle.rf_head.patch_size())? == bundle.rf_head;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let samples = threshold_samples(&forest, args.samples, &mut rng);
    let f64_report = verify_equivalence(&forest, &compiled, &samples, args.margin_eps)?;
    let engine = verify_network_equivalence(&forest, &bundle.rf_head, constants.hard_mode, &samples, args.margin_eps)?;
    let size = args.image_size.max(bundle.metadata.patch_size);
    let image = random_image(&mut rng, size, size);
    let fcn_map = window_map(&bundle.fcn.forward(&image)?, size, size, bundle.metadata.patch_size, bundle.metadata.total_stride)?;
    let patch_map = patchwise_map(&bundle.features, &bundle.rf_head, &image)?;
    Ok(VerifyReport {
        format_version: FORMAT_VERSION,
        head_matches_forest,
        compiled: f64_report,
        engine,
        fcn_positions: fcn_map.height() * fcn_map.width(),
        fcn_max_abs_diff: max_abs_diff(&fcn_map, &patch_map)?,
        fcn_tolerance: FCN_TOLERANCE,
    })
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub model: PathBuf,
    /// Random noise of `size × size` when absent.
    pub image: Option<PathBuf>,
    pub size: usize,
    pub scales: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchScale {
    pub scale: f64,
    pub height: usize,
    pub width: usize,
    pub positions: usize,
    pub patchwise_seconds: f64,
    pub fcn_seconds: f64,
    pub ratio: f64,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub format_version: u32,
    pub image_height: usize,
    pub image_width: usize,
    /// Each timing is the fastest of this many runs, after one warm-up run.
    pub repeats: usize,
    pub scales: Vec<BenchScale>,
    pub patchwise_seconds: f64,
    pub fcn_seconds: f64,
    /// Patch-wise time over fused time.
    pub ratio: f64,
    pub max_abs_diff: f64,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        let mut lines = vec![format!(
            "image {}x{}, {} scales, fastest of {} runs, single thread",
            self.image_height,
            self.image_width,
            self.scales.len(),
            self.repeats
        )];
        for s in &self.scales {
            lines.push(format!(
                "scale {:.4}: {}x{}, {} windows, patch-wise {:.4} s, fcn {:.4} s, ratio {:.1}, max |diff| {:.2e}",
                s.scale, s.height, s.width, s.positions, s.patchwise_seconds, s.fcn_seconds, s.ratio, s.max_abs_diff
            ));
        }
        lines.push(format!(
            "total: patch-wise {:.4} s, fcn {:.4} s, ratio {:.1}",
            self.patchwise_seconds, self.fcn_seconds, self.ratio
        ));
        lines.join("\n")
    }
}

fn fastest<T>(repeats: usize, mut f: impl FnMut() -> Result<T, ToolError>) -> Result<(f64, T), ToolError> {
    let mut out = f()?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let start = Instant::now();
        out = f()?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok((best, out))
}

/// Times the patch loop against the fused network on the same pyramid, on
/// the calling thread.
pub fn bench(args: &BenchArgs) -> Result<BenchReport, ToolError> {
    if args.repeats == 0 {
        return Err(ToolError::InvalidInput("repeats must be at least 1".into()));
    }
    let bundle = ModelBundle::load(&args.model)?;
    let image = match &args.image {
        Some(p) => load_image(p)?,
        None => random_image(&mut ChaCha8Rng::seed_from_u64(args.seed), args.size, args.size),
    };
    let patch = bundle.metadata.patch_size;
    let mut scales = args.scales.clone();
    scales.sort_by(|a, b| b.total_cmp(a));
    scales.dedup();
    let mut rows = Vec::new();
    for s in scales {
        let (h, w) = scaled_size(image.height(), image.width(), s);
        if h < patch || w < patch {
            continue;
        }
        let scaled = resize_bilinear(&image, h, w);
        let (fcn_seconds, raw) = fastest(args.repeats, || Ok(bundle.fcn.forward(&scaled)?))?;
        let fcn_map = window_map(&raw, h, w, patch, bundle.metadata.total_stride)?;
        let (patchwise_seconds, patch_map) =
            fastest(args.repeats, || patchwise_map(&bundle.features, &bundle.rf_head, &scaled))?;
        rows.push(BenchScale {
            scale: s,
            height: h,
            width: w,
            positions: fcn_map.height() * fcn_map.width(),
            patchwise_seconds,
            fcn_seconds,
            ratio: patchwise_seconds / fcn_seconds,
            max_abs_diff: max_abs_diff(&fcn_map, &patch_map)?,
        });
    }
    if rows.is_empty() {
        return Err(ToolError::Dimension(format!(
            "image {}x{} is smaller than a patch at every scale",
            image.height(),
            image.width()
        )));
    }
    let patchwise: f64 = rows.iter().map(|r| r.patchwise_seconds).sum();
    let fcn: f64 = rows.iter().map(|r| r.fcn_seconds).sum();
    Ok(BenchReport {
        format_version: FORMAT_VERSION,
        image_height: image.height(),
        image_width: image.width(),
        repeats: args.repeats,
        max_abs_diff: rows.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max),
        scales: rows,
        patchwise_seconds: patchwise,
        fcn_seconds: fcn,
        ratio: patchwise / fcn,
    })
}

// ---------------------------------------------------------------- localize

#[derive(Debug, Clone)]
pub struct LocalizeArgs {
    /// Detection documents or directories of them.
    pub detections: Vec<PathBuf>,
    pub track: PathBuf,
    pub camera: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeOutcome {
    pub map: MapDocument,
    pub report: Option<MatchReport>,
}

impl LocalizeOutcome {
    pub fn summary(&self) -> String {
        let mut s = format!("placed {} signs", self.map.features.len());
        if let Some(r) = &self.report {
            let m = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2} m"));
            s.push_str(&format!(
                "\nmatched {}/{}, median error {}, median error with accuracy <= {} m: {}",
                r.n_matched(),
                r.matches.len(),
                m(r.median_error),
                r.accuracy_cutoff,
                m(r.filtered_median_error)
            ));
        }
        s
    }
}

/// Places every detected sign on the map from its image's GPS fix.
pub fn localize(args: &LocalizeArgs) -> Result<LocalizeOutcome, ToolError> {
    let camera = match &args.camera {
        Some(p) => CameraConfig::load(p)?,
        None => CameraConfig {
            camera: Default::default(),
            catalog: Default::default(),
            accuracy_cutoff: crate::geo::DEFAULT_ACCURACY_CUTOFF,
        },
    };
    let track = load_track(&args.track)?;
    let mut signs = Vec::new();
    for path in expand_documents(&args.detections)? {
        let doc = DetectionDocument::load(&path)?;
        let key = image_key(&doc.image);
        let fix = track
            .get(&key)
            .ok_or_else(|| ToolError::InvalidInput(format!("{}: no GPS fix for image {key}", args.track.display())))?;
        let geo = fix.image_geo(doc.width);
        for r in &doc.detections {
            let bbox = crate::detector::BoundingBox {
                x: r.x,
                y: r.y,
                w: r.w,
                h: r.h,
                class: 0,
                score: r.score,
            };
            let p = project_sign(&geo, &bbox, &r.class_name, &camera.camera, &camera.catalog)?;
            signs.push(LocalizedSign {
                sign: p.sign,
                source_image: key.clone(),
                accuracy: fix.accuracy,
            });
        }
    }
    let map = MapDocument::new(&signs);
    write_bytes(&args.out, &map.to_bytes())?;
    let report = match &args.truth {
        Some(p) => {
            let truth: Vec<_> = MapDocument::load(p)?.signs().into_iter().map(|s| s.sign).collect();
            Some(match_signs(&signs, &truth, camera.accuracy_cutoff))
        }
        None => None,
    };
    Ok(LocalizeOutcome { map, report })
}

// ---------------------------------------------------------------- filter-ride

#[derive(Debug, Clone)]
pub struct FilterArgs {
    pub speed: Option<PathBuf>,
    pub accel: Option<PathBuf>,
    pub images: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<ImageRow>,
    pub n_images: usize,
    pub speed_events: Vec<f64>,
    pub accel_events: Vec<f64>,
}

impl FilterOutcome {
    /// Images in over images kept; infinite when nothing is kept.
    pub fn reduction_factor(&self) -> f64 {
        self.n_images as f64 / self.kept.len() as f64
    }

    pub fn summary(&self) -> String {
        format!(
            "{} speed events, {} acceleration events; kept {} of {} images (reduction factor {:.2})",
            self.speed_events.len(),
            self.accel_events.len(),
            self.kept.len(),
            self.n_images,
            self.reduction_factor()
        )
    }
}

/// Keeps the images taken near a braking or jolting event.
pub fn filter_ride(args: &FilterArgs) -> Result<FilterOutcome, ToolError> {
    if args.speed.is_none() && args.accel.is_none() {
        return Err(ToolError::InvalidInput("give a speed trace, an acceleration trace or both".into()));
    }
    let config = match &args.config {
        Some(p) => load_filter_config(p)?,
        None => FilterConfig::default(),
    };
    let sp = match &args.speed {
        Some(p) => speed_events(&load_speed_trace(p)?, &config)?,
        None => Vec::new(),
    };
    let ac = match &args.accel {
        Some(p) => accel_events(&load_accel_trace(p)?, &config)?,
        None => Vec::new(),
    };
    let images = load_image_list(&args.images)?;
    let times: Vec<f64> = images.iter().map(|r| r.timestamp).collect();
    let kept: Vec<ImageRow> = filter_images(&times, &sp, &ac, config.keep_window)
        .into_iter()
        .map(|i| images[i].clone())
        .collect();
    save_image_list(&args.out, &kept)?;
    Ok(FilterOutcome {
        kept,
        n_images: images.len(),
        speed_events: sp,
        accel_events: ac,
    })
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub detections: Vec<PathBuf>,
    pub truth: Vec<PathBuf>,
    /// Class order from a labels file ...
    pub classes: Option<PathBuf>,
    /// ... or from a model; otherwise the sorted names seen in the documents.
    pub model: Option<PathBuf>,
    pub iou_min: f64,
    pub out: Option<PathBuf>,
    /// Writes a detector config using the selected thresholds.
    pub write_config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub format_version: u32,
    #[serde(flatten)]
    pub report: EvalReport,
}

impl EvalDocument {
    pub fn summary(&self) -> String {
        let r = &self.report;
        let mut lines = vec![format!("matching: {}, IoU > {}", r.matching, r.iou_min)];
        for c in &r.classes {
            let thr = match c.threshold {
                Some(t) if !t.disabled => format!("threshold {:.4} (F1 {:.3})", t.cut, t.f1),
                Some(_) => "disabled".to_string(),
                None => "no ground truth".to_string(),
            };
            let ap = c.ap.map_or("n/a".to_string(), |a| format!("{a:.4}"));
            lines.push(format!("{}: AP {ap}, {} gt, {} detections, {thr}", c.name, c.n_gt, c.n_detections));
        }
        lines.push(format!(
            "mAP {}",
            r.mean_ap.map_or("n/a".to_string(), |m| format!("{m:.4}"))
        ));
        lines.join("\n")
    }
}

/// Scores detection documents against ground-truth documents.
pub fn eval(args: &EvalArgs) -> Result<EvalDocument, ToolError> {
    if !(args.iou_min > 0.0 && args.iou_min < 1.0) {
        return Err(ToolError::InvalidInput(format!("IoU threshold {} is outside (0, 1)", args.iou_min)));
    }
    let load = |paths: &[PathBuf]| -> Result<Vec<(PathBuf, DetectionDocument)>, ToolError> {
        expand_documents(paths)?
            .into_iter()
            .map(|p| DetectionDocument::load(&p).map(|d| (p, d)))
            .collect()
    };
    let dets = load(&args.detections)?;
    let gts = load(&args.truth)?;
    let class_names = if let Some(p) = &args.classes {
        load_lines(p)?
    } else if let Some(p) = &args.model {
        load_model(p)?.metadata.class_names
    } else {
        dets.iter()
            .chain(&gts)
            .flat_map(|(_, d)| d.detections.iter().map(|b| b.class_name.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    };
    let mut det_boxes = Vec::new();
    for (p, d) in &dets {
        let mut boxes = d.image_detections(&class_names, p)?;
        boxes.iter_mut().for_each(|b| b.image = image_key(&b.image));
        det_boxes.extend(boxes);
    }
    let mut gt_boxes = Vec::new();
    for (p, d) in &gts {
        let mut boxes = d.ground_truth(&class_names, p)?;
        boxes.iter_mut().for_each(|b| b.image = image_key(&b.image));
        gt_boxes.extend(boxes);
    }
    let skip: Vec<usize> = class_names.iter().position(|c| c == "background").into_iter().collect();
    let report = evaluate(&det_boxes, &gt_boxes, &class_names, &skip, args.iou_min);
    let doc = EvalDocument {
        format_version: FORMAT_VERSION,
        report,
    };
    if let Some(out) = &args.out {
        write_bytes(out, &to_json(&doc))?;
    }
    if let Some(out) = &args.write_config {
        let mut cfg = DetectorConfig::for_classes(class_names.clone());
        cfg.class_thresholds = doc.report.thresholds(class_names.len());
        let lowest = cfg.class_thresholds.iter().copied().fold(f64::INFINITY, f64::min);
        cfg.t_min = cfg.t_min.min(lowest);
        write_bytes(out, detector_config_text(&cfg).as_bytes())?;
    }
    Ok(doc)
}

/// Writes any serializable report as pretty JSON.
pub fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<(), ToolError> {
    write_bytes(path, &to_json(report))
}
