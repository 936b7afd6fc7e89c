//! Multi-scale sliding-window detection on top of a fully convolutional
//! classifier: probability maps over an image pyramid, candidate boxes,
//! per-class NMS, part boosting, global NMS and per-class thresholds.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convnet::{conv_extent, NetError, Network, Shape, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("image is {height}x{width}, smaller than one {patch}x{patch} patch")]
    ImageTooSmall { height: usize, width: usize, patch: usize },
    #[error("image has {found} channels, expected {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("model produces {model} classes but the config names {config}")]
    ClassCountMismatch { model: usize, config: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Axis-aligned box given by its center and size, in original-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class: usize,
    pub score: f64,
}

impl BoundingBox {
    /// `(left, top, right, bottom)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        corner_iou(self.corners(), other.corners())
    }
}

/// Intersection over union of two `(left, top, right, bottom)` rectangles;
/// zero when they do not overlap with positive area.
pub fn corner_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let iw = a.2.min(b.2) - a.0.max(b.0);
    let ih = a.3.min(b.3) - a.1.max(b.1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = (a.2 - a.0) * (a.3 - a.1) + (b.2 - b.0) * (b.3 - b.1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Ratio between successive pyramid scales.
pub const SCALE_STEP: f64 = 1.3;
pub const DEFAULT_SCALE_COUNT: usize = 8;
/// Score increment factor shared among a class's parts.
pub const PART_BOOST: f64 = 0.2;

/// `1, 1/1.3, 1/1.3², …`
pub fn default_scales(count: usize) -> Vec<f64> {
    (0..count).map(|k| SCALE_STEP.powi(-(k as i32))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub class_names: Vec<String>,
    pub scales: Vec<f64>,
    pub t_min: f64,
    /// IoU above which same-class candidates are suppressed; 0 removes every overlap.
    pub class_nms_iou: f64,
    /// Class index to the classes that count as its parts.
    pub part_table: BTreeMap<usize, Vec<usize>>,
    pub part_iou: f64,
    pub global_nms_iou: f64,
    pub class_thresholds: Vec<f64>,
    pub background_class: Option<usize>,
}

/// Part relations shipped by default, by class name.
pub const DEFAULT_PARTS: [(&str, &[&str]); 2] = [("241", &["237"]), ("244.1", &["237"])];

impl DetectorConfig {
    /// Defaults for the given class list. A class named `background` is used
    /// as the background class; part relations whose classes are missing from
    /// the list are dropped.
    pub fn for_classes(class_names: Vec<String>) -> Self {
        let index = |name: &str| class_names.iter().position(|c| c == name);
        let mut part_table = BTreeMap::new();
        for (whole, parts) in DEFAULT_PARTS {
            if let Some(w) = index(whole) {
                let p: Vec<usize> = parts.iter().filter_map(|p| index(p)).collect();
                if !p.is_empty() {
                    part_table.insert(w, p);
                }
            }
        }
        let t_min = 0.2;
        DetectorConfig {
            scales: default_scales(DEFAULT_SCALE_COUNT),
            t_min,
            class_nms_iou: 0.0,
            part_table,
            part_iou: 0.2,
            global_nms_iou: 0.5,
            class_thresholds: vec![t_min; class_names.len()],
            background_class: index("background"),
            class_names,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: String| Err(DetectError::InvalidConfig(m));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.class_names.is_empty() {
            return bad("no classes".into());
        }
        if self.scales.is_empty() {
            return bad("no scales".into());
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return bad(format!("scale {s} is not a positive number"));
        }
        for (name, v) in [
            ("t_min", self.t_min),
            ("class_nms_iou", self.class_nms_iou),
            ("part_iou", self.part_iou),
            ("global_nms_iou", self.global_nms_iou),
        ] {
            if !unit(v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if self.class_thresholds.len() != self.n_classes() {
            return bad(format!(
                "{} class thresholds for {} classes",
                self.class_thresholds.len(),
                self.n_classes()
            ));
        }
        if let Some(t) = self.class_thresholds.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
            return bad(format!("class threshold {t} is negative or not finite"));
        }
        let n = self.n_classes();
        if let Some(b) = self.background_class.filter(|&b| b >= n) {
            return bad(format!("background class {b} out of range"));
        }
        for (w, parts) in &self.part_table {
            if *w >= n || parts.iter().any(|p| *p >= n) {
                return bad(format!("part table entry for class {w} refers to an unknown class"));
            }
        }
        Ok(())
    }

    /// Scales sorted from largest to smallest image, duplicates removed.
    pub fn sorted_scales(&self) -> Vec<f64> {
        sorted_scales(&self.scales)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, DetectError> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| DetectError::InvalidConfig(e.message().to_string()))?;
        file.into_config()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&ConfigFile::from_config(self)).expect("config serializes")
    }
}

/// On-disk form of [`DetectorConfig`], with classes referred to by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    background_class: Option<String>,
    #[serde(default)]
    scales: Option<Vec<f64>>,
    #[serde(default)]
    t_min: Option<f64>,
    #[serde(default)]
    class_nms_iou: Option<f64>,
    #[serde(default)]
    part_iou: Option<f64>,
    #[serde(default)]
    global_nms_iou: Option<f64>,
    #[serde(default)]
    part_table: Option<BTreeMap<String, Vec<String>>>,
    #[serde(default)]
    class_thresholds: BTreeMap<String, f64>,
}

impl ConfigFile {
    fn into_config(self) -> Result<DetectorConfig, DetectError> {
        let mut config = DetectorConfig::for_classes(self.class_names.clone());
        let index = |name: &str| {
            self.class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| DetectError::InvalidConfig(format!("unknown class {name:?}")))
        };
        if let Some(b) = &self.background_class {
            config.background_class = Some(index(b)?);
        }
        if let Some(s) = self.scales {
            config.scales = s;
        }
        if let Some(t) = self.t_min {
            config.t_min = t;
            config.class_thresholds = vec![t; config.n_classes()];
        }
        config.class_nms_iou = self.class_nms_iou.unwrap_or(config.class_nms_iou);
        config.part_iou = self.part_iou.unwrap_or(config.part_iou);
        config.global_nms_iou = self.global_nms_iou.unwrap_or(config.global_nms_iou);
        if let Some(table) = &self.part_table {
            config.part_table.clear();
            for (whole, parts) in table {
                let parts = parts.iter().map(|p| index(p)).collect::<Result<Vec<_>, _>>()?;
                config.part_table.insert(index(whole)?, parts);
            }
        }
        for (name, t) in &self.class_thresholds {
            config.class_thresholds[index(name)?] = *t;
        }
        config.validate()?;
        Ok(config)
    }

    fn from_config(c: &DetectorConfig) -> Self {
        let name = |i: usize| c.class_names[i].clone();
        ConfigFile {
            class_names: c.class_names.clone(),
            background_class: c.background_class.map(name),
            scales: Some(c.scales.clone()),
            t_min: Some(c.t_min),
            class_nms_iou: Some(c.class_nms_iou),
            part_iou: Some(c.part_iou),
            global_nms_iou: Some(c.global_nms_iou),
            part_table: Some(
                c.part_table
                    .iter()
                    .map(|(w, p)| (name(*w), p.iter().map(|&i| name(i)).collect()))
                    .collect(),
            ),
            class_thresholds: c
                .class_thresholds
                .iter()
                .enumerate()
                .map(|(i, t)| (name(i), *t))
                .collect(),
        }
    }
}

fn sorted_scales(scales: &[f64]) -> Vec<f64> {
    let mut s = scales.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s.dedup();
    s
}

/// Image size after scaling by `s`, at least one pixel per axis.
pub fn scaled_size(height: usize, width: usize, s: f64) -> (usize, usize) {
    let f = |n: usize| ((n as f64 * s).round() as usize).max(1);
    (f(height), f(width))
}

/// Bilinear resampling with half-pixel centers and clamped borders.
pub fn resize_bilinear(image: &Tensor, height: usize, width: usize) -> Tensor {
    let s = image.shape();
    if s.height == height && s.width == width {
        return image.clone();
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let ratio = src as f64 / dst as f64;
        (0..dst)
            .map(|d| {
                let p = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = p.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (p - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(height, s.height);
    let xs = axis(width, s.width);
    let c = s.channels;
    let mut out = Tensor::zeros(Shape::new(height, width, c));
    let data = out.data_mut();
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let (a, b) = (image.pixel(y0, x0), image.pixel(y0, x1));
            let (d, e) = (image.pixel(y1, x0), image.pixel(y1, x1));
            let base = (oy * width + ox) * c;
            for k in 0..c {
                let top = a[k] + (b[k] - a[k]) * fx;
                let bottom = d[k] + (e[k] - d[k]) * fx;
                data[base + k] = top + (bottom - top) * fy;
            }
        }
    }
    out
}

/// Crops a fused-network output to the positions whose whole patch window
/// lies inside a `height × width` input. The unpadded extractor sees less
/// than a full patch, so the raw map can run one window past the border.
pub fn window_map(map: &Tensor, height: usize, width: usize, patch: usize, stride: usize) -> Result<Tensor, NetError> {
    let oh = conv_extent(height, patch, stride, 0).unwrap_or(0).min(map.height());
    let ow = conv_extent(width, patch, stride, 0).unwrap_or(0).min(map.width());
    if oh == map.height() && ow == map.width() {
        return Ok(map.clone());
    }
    map.crop(0, 0, oh, ow)
}

/// Class probabilities of the fused network at one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMap {
    /// Requested scale factor.
    pub scale: f64,
    /// Realized factors `new/old` after rounding the image size.
    pub scale_x: f64,
    pub scale_y: f64,
    pub map: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMaps {
    pub maps: Vec<ScaleMap>,
    /// Scales at which the image was smaller than one patch.
    pub skipped: Vec<f64>,
}

/// Runs `fcn` over the image at every scale, largest first.
pub fn probability_maps(fcn: &Network, image: &Tensor, scales: &[f64]) -> Result<ProbabilityMaps, DetectError> {
    if image.channels() != 3 {
        return Err(DetectError::ChannelMismatch {
            expected: 3,
            found: image.channels(),
        });
    }
    let patch = fcn.patch_size();
    let (h, w) = (image.height(), image.width());
    if h < patch || w < patch {
        return Err(DetectError::ImageTooSmall {
            height: h,
            width: w,
            patch,
        });
    }
    let scales = sorted_scales(scales);
    let results: Vec<Result<Option<ScaleMap>, NetError>> = scales
        .par_iter()
        .map(|&s| {
            let (sh, sw) = scaled_size(h, w, s);
            if sh < patch || sw < patch {
                return Ok(None);
            }
            let resized = resize_bilinear(image, sh, sw);
            let map = window_map(&fcn.forward(&resized)?, sh, sw, patch, fcn.total_stride())?;
            Ok(Some(ScaleMap {
                scale: s,
                scale_x: sw as f64 / w as f64,
                scale_y: sh as f64 / h as f64,
                map,
            }))
        })
        .collect();
    let mut out = ProbabilityMaps {
        maps: Vec::new(),
        skipped: Vec::new(),
    };
    for (s, r) in scales.iter().zip(results) {
        match r? {
            Some(m) => out.maps.push(m),
            None => out.skipped.push(*s),
        }
    }
    Ok(out)
}

/// Every map position whose probability for a non-background class exceeds
/// `t_min` becomes a box covering the patch's field of view.
pub fn extract_boxes(maps: &[ScaleMap], config: &DetectorConfig, total_stride: usize, patch_size: usize) -> Vec<BoundingBox> {
    let mut boxes = Vec::new();
    let half = patch_size as f64 / 2.0;
    // Maps are f32; compare at that precision so a stored 0.2 counts as 0.2.
    let floor = config.t_min as f32;
    for m in maps {
        let s = m.map.shape();
        for i in 0..s.height {
            for j in 0..s.width {
                for (class, &p) in m.map.pixel(i, j).iter().enumerate() {
                    if Some(class) == config.background_class || p <= floor {
                        continue;
                    }
                    boxes.push(BoundingBox {
                        x: (total_stride as f64 * j as f64 + half) / m.scale_x,
                        y: (total_stride as f64 * i as f64 + half) / m.scale_y,
                        w: patch_size as f64 / m.scale_x,
                        h: patch_size as f64 / m.scale_y,
                        class,
                        score: (p as f64).clamp(0.0, 1.0),
                    });
                }
            }
        }
    }
    boxes
}

/// Descending score, then class, x, y, w, h.
fn detection_order(a: &BoundingBox, b: &BoundingBox) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class.cmp(&b.class))
        .then(a.x.total_cmp(&b.x))
        .then(a.y.total_cmp(&b.y))
        .then(a.w.total_cmp(&b.w))
        .then(a.h.total_cmp(&b.h))
}

/// Greedy non-maximum suppression: repeatedly keeps the best remaining box
/// and drops every box overlapping it by more than `iou_threshold`.
pub fn nms(boxes: &[BoundingBox], iou_threshold: f64, per_class: bool) -> Vec<BoundingBox> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<BoundingBox> = Vec::new();
    for b in sorted {
        let suppressed = kept
            .iter()
            .any(|k| (!per_class || k.class == b.class) && k.iou(&b) > iou_threshold);
        if !suppressed {
            kept.push(b);
        }
    }
    kept
}

/// Raises each box's score by `s'·0.2/P` for every declared part class that
/// has a box `b'` overlapping it by more than `part_iou` (best such `b'`),
/// where `P` is the number of declared parts. Scores of the input are used
/// throughout and results are capped at 1.
pub fn part_boost(boxes: &[BoundingBox], part_table: &BTreeMap<usize, Vec<usize>>, part_iou: f64) -> Vec<BoundingBox> {
    boxes
        .iter()
        .map(|b| {
            let Some(parts) = part_table.get(&b.class).filter(|p| !p.is_empty()) else {
                return *b;
            };
            let share = PART_BOOST / parts.len() as f64;
            let mut score = b.score;
            for &part in parts {
                let best = boxes
                    .iter()
                    .filter(|o| o.class == part && o.iou(b) > part_iou)
                    .map(|o| o.score)
                    .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))));
                if let Some(s) = best {
                    score += s * share;
                }
            }
            BoundingBox {
                score: score.min(1.0),
                ..*b
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detections {
    /// Final boxes in detection order.
    pub boxes: Vec<BoundingBox>,
    pub skipped_scales: Vec<f64>,
}

/// Full pipeline from image to thresholded boxes.
pub fn detect(image: &Tensor, fcn: &Network, config: &DetectorConfig) -> Result<Detections, DetectError> {
    config.validate()?;
    let maps = probability_maps(fcn, image, &config.scales)?;
    if let Some(m) = maps.maps.first() {
        let n = m.map.channels();
        if n != config.n_classes() {
            return Err(DetectError::ClassCountMismatch {
                model: n,
                config: config.n_classes(),
            });
        }
    }
    let candidates = extract_boxes(&maps.maps, config, fcn.total_stride(), fcn.patch_size());
    Ok(Detections {
        boxes: postprocess(&candidates, config),
        skipped_scales: maps.skipped,
    })
}

/// The stages after candidate extraction.
pub fn postprocess(candidates: &[BoundingBox], config: &DetectorConfig) -> Vec<BoundingBox> {
    let per_class = nms(candidates, config.class_nms_iou, true);
    let boosted = part_boost(&per_class, &config.part_table, config.part_iou);
    nms(&boosted, config.global_nms_iou, false)
        .into_iter()
        .filter(|b| b.score >= config.class_thresholds[b.class])
        .collect()
}
