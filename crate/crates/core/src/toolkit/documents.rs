//! Text documents exchanged between commands.
//!
//! | document | format |
//! |---|---|
//! | forest | JSON, one preorder node list per tree |
//! | detections, ground truth | JSON per image, `{x, y, w, h, class_name, score}` boxes |
//! | sign map | GeoJSON feature collection of points |
//! | detector, camera and ride filter configs | TOML |
//! | GPS track | CSV `image,lat,lon,heading,accuracy` |
//! | speed trace | CSV `timestamp,speed_kmh` |
//! | acceleration trace | CSV `timestamp,ax,ay,az` (m/s²) |
//! | image list | CSV `image,timestamp` |
//! | labels | one class name per line |

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{check_version, parse_versioned_json, read_text, write_bytes, ToolError, FORMAT_VERSION};
use crate::detector::{BoundingBox, DetectorConfig};
use crate::evalkit::{GroundTruthBox, ImageDetection, Rect};
use crate::forest::{DecisionTree, Forest, PreorderNode};
use crate::geo::{CameraModel, GeoPoint, ImageGeo, LocalizedSign, SignCatalog, SignSpec, DEFAULT_ACCURACY_CUTOFF};
use crate::ridefilter::{AccelSample, AccelTrace, FilterConfig, SpeedTrace};

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("document serializes");
    out.push(b'\n');
    out
}

// ---------------------------------------------------------------- forest

pub const FOREST_FORMAT: &str = "forest2fcn-forest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestDocument {
    pub format: String,
    pub format_version: u32,
    pub n_classes: usize,
    pub input_dim: usize,
    pub class_names: Vec<String>,
    pub trees: Vec<Vec<PreorderNode>>,
}

impl ForestDocument {
    pub fn new(forest: &Forest, class_names: Vec<String>) -> Self {
        ForestDocument {
            format: FOREST_FORMAT.into(),
            format_version: FORMAT_VERSION,
            n_classes: forest.n_classes(),
            input_dim: forest.input_dim(),
            class_names,
            trees: forest.trees().iter().map(DecisionTree::to_preorder).collect(),
        }
    }

    pub fn to_forest(&self, path: &Path) -> Result<Forest, ToolError> {
        let trees = self
            .trees
            .iter()
            .enumerate()
            .map(|(i, t)| {
                DecisionTree::from_preorder(t, self.n_classes, self.input_dim)
                    .map_err(|e| ToolError::format(path, format!("tree {i}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Forest::new(trees, self.n_classes, self.input_dim).map_err(|e| ToolError::format(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        to_json(self)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, ToolError> {
        let doc: ForestDocument = parse_versioned_json(path, text)?;
        if doc.format != FOREST_FORMAT {
            return Err(ToolError::format(path, format!("not a {FOREST_FORMAT} document")));
        }
        if !doc.class_names.is_empty() && doc.class_names.len() != doc.n_classes {
            return Err(ToolError::format(
                path,
                format!("{} class names for {} classes", doc.class_names.len(), doc.n_classes),
            ));
        }
        Ok(doc)
    }
}

pub fn save_forest(path: &Path, forest: &Forest, class_names: Vec<String>) -> Result<(), ToolError> {
    write_bytes(path, &ForestDocument::new(forest, class_names).to_bytes())
}

pub fn load_forest(path: &Path) -> Result<(Forest, Vec<String>), ToolError> {
    let doc = ForestDocument::parse(&read_text(path)?, path)?;
    Ok((doc.to_forest(path)?, doc.class_names))
}

// ---------------------------------------------------------------- detections

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class_name: String,
    #[serde(default = "one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

/// Boxes found in (or annotated on) one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionDocument {
    pub format_version: u32,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub detections: Vec<BoxRecord>,
}

impl DetectionDocument {
    pub fn new(image: String, width: usize, height: usize, boxes: &[BoundingBox], class_names: &[String]) -> Self {
        DetectionDocument {
            format_version: FORMAT_VERSION,
            image,
            width,
            height,
            detections: boxes
                .iter()
                .map(|b| BoxRecord {
                    x: b.x,
                    y: b.y,
                    w: b.w,
                    h: b.h,
                    class_name: class_names[b.class].clone(),
                    score: b.score,
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        to_json(self)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, ToolError> {
        parse_versioned_json(path, text)
    }

    pub fn load(path: &Path) -> Result<Self, ToolError> {
        Self::parse(&read_text(path)?, path)
    }

    /// Boxes with class names resolved against `class_names`.
    pub fn boxes(&self, class_names: &[String], path: &Path) -> Result<Vec<BoundingBox>, ToolError> {
        self.detections
            .iter()
            .map(|r| {
                let class = class_names
                    .iter()
                    .position(|c| *c == r.class_name)
                    .ok_or_else(|| ToolError::format(path, format!("unknown class {:?}", r.class_name)))?;
                Ok(BoundingBox {
                    x: r.x,
                    y: r.y,
                    w: r.w,
                    h: r.h,
                    class,
                    score: r.score,
                })
            })
            .collect()
    }

    pub fn image_detections(&self, class_names: &[String], path: &Path) -> Result<Vec<ImageDetection>, ToolError> {
        Ok(self
            .boxes(class_names, path)?
            .into_iter()
            .map(|bbox| ImageDetection {
                image: self.image.clone(),
                bbox,
            })
            .collect())
    }

    pub fn ground_truth(&self, class_names: &[String], path: &Path) -> Result<Vec<GroundTruthBox>, ToolError> {
        Ok(self
            .boxes(class_names, path)?
            .into_iter()
            .map(|b| GroundTruthBox {
                image: self.image.clone(),
                rect: Rect::from(&b),
                class: b.class,
            })
            .collect())
    }
}

/// File name of `image` with its extension replaced by `.json`.
pub fn detection_file_name(image: &Path) -> String {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    format!("{stem}.json")
}

/// Base name used to join images across documents.
pub fn image_key(image: &str) -> String {
    Path::new(image)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| image.to_string())
}

// ---------------------------------------------------------------- sign map

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapProperties {
    pub lat: f64,
    pub lon: f64,
    pub heading: f64,
    pub class: String,
    pub source_image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointGeometry {
    #[serde(rename = "type")]
    pub kind: String,
    /// `[lon, lat]`
    pub coordinates: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFeature {
    #[serde(rename = "type")]
    pub kind: String,
    pub geometry: PointGeometry,
    pub properties: MapProperties,
}

/// GeoJSON feature collection with one point per placed sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDocument {
    #[serde(rename = "type")]
    pub kind: String,
    pub format_version: u32,
    pub features: Vec<MapFeature>,
}

impl MapDocument {
    pub fn new(signs: &[LocalizedSign]) -> Self {
        MapDocument {
            kind: "FeatureCollection".into(),
            format_version: FORMAT_VERSION,
            features: signs
                .iter()
                .map(|s| {
                    let p = s.sign.position;
                    MapFeature {
                        kind: "Feature".into(),
                        geometry: PointGeometry {
                            kind: "Point".into(),
                            coordinates: [p.lon, p.lat],
                        },
                        properties: MapProperties {
                            lat: p.lat,
                            lon: p.lon,
                            heading: s.sign.heading,
                            class: s.sign.class.clone(),
                            source_image: s.source_image.clone(),
                        },
                    }
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        to_json(self)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, ToolError> {
        let doc: MapDocument = parse_versioned_json(path, text)?;
        if doc.kind != "FeatureCollection" {
            return Err(ToolError::format(path, "not a GeoJSON FeatureCollection"));
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self, ToolError> {
        Self::parse(&read_text(path)?, path)
    }

    /// Signs as placed; accuracy is unknown and reported as 0.
    pub fn signs(&self) -> Vec<LocalizedSign> {
        self.features
            .iter()
            .map(|f| LocalizedSign {
                sign: crate::geo::SignGeo {
                    position: GeoPoint::new(f.properties.lat, f.properties.lon),
                    heading: f.properties.heading,
                    class: f.properties.class.clone(),
                },
                source_image: f.properties.source_image.clone(),
                accuracy: 0.0,
            })
            .collect()
    }
}

// ---------------------------------------------------------------- configs

fn parse_toml<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T, ToolError> {
    let value: toml::Table = toml::from_str(text).map_err(|e| ToolError::config(path, e.message()))?;
    check_version(path, value.get("format_version").and_then(|v| v.as_integer()).map(|v| v as u64))
        .map_err(|e| match e {
            ToolError::Format { path, message } => ToolError::Config { path, message },
            other => other,
        })?;
    toml::from_str(text).map_err(|e| ToolError::config(path, e.message()))
}

/// Detector config file; the `format_version` key sits next to the
/// detector's own keys.
pub fn load_detector_config(path: &Path) -> Result<DetectorConfig, ToolError> {
    let text = read_text(path)?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| ToolError::config(path, e.message()))?;
    let version = table.remove("format_version").and_then(|v| v.as_integer()).map(|v| v as u64);
    check_version(path, version).map_err(|e| match e {
        ToolError::Format { path, message } => ToolError::Config { path, message },
        other => other,
    })?;
    let rest = toml::to_string(&table).expect("table serializes");
    DetectorConfig::from_toml_str(&rest).map_err(|e| ToolError::config(path, e))
}

pub fn detector_config_text(config: &DetectorConfig) -> String {
    format!("format_version = {FORMAT_VERSION}\n{}", config.to_toml_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SignSize {
    width: f64,
    height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    format_version: u32,
    camera: CameraModel,
    #[serde(default)]
    accuracy_cutoff: Option<f64>,
    /// Extra or overriding sign sizes by class name.
    #[serde(default)]
    signs: BTreeMap<String, SignSize>,
}

/// Camera geometry and sign sizes used by `localize`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraConfig {
    pub camera: CameraModel,
    pub catalog: SignCatalog,
    pub accuracy_cutoff: f64,
}

impl CameraConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ToolError> {
        let file: CameraFile = parse_toml(text, path)?;
        let c = file.camera;
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(c.focal_length) && ok(c.sensor_width) && ok(c.angle_of_view) && c.angle_of_view < 180.0) {
            return Err(ToolError::config(
                path,
                "camera values must be positive and the angle of view below 180",
            ));
        }
        let mut catalog = SignCatalog::default();
        for (class, s) in file.signs {
            if !(ok(s.width) && ok(s.height)) {
                return Err(ToolError::config(path, format!("sign {class:?} needs a positive size")));
            }
            catalog.signs.insert(
                class.clone(),
                SignSpec {
                    class,
                    width: s.width,
                    height: s.height,
                },
            );
        }
        Ok(CameraConfig {
            camera: c,
            catalog,
            accuracy_cutoff: file.accuracy_cutoff.unwrap_or(DEFAULT_ACCURACY_CUTOFF),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ToolError> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn to_toml_string(&self) -> String {
        let file = CameraFile {
            format_version: FORMAT_VERSION,
            camera: self.camera,
            accuracy_cutoff: Some(self.accuracy_cutoff),
            signs: self
                .catalog
                .signs
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        SignSize {
                            width: s.width,
                            height: s.height,
                        },
                    )
                })
                .collect(),
        };
        toml::to_string(&file).expect("camera config serializes")
    }
}

/// Ride filter settings; every key except `format_version` is optional.
pub fn parse_filter_config(text: &str, path: &Path) -> Result<FilterConfig, ToolError> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| ToolError::config(path, e.message()))?;
    let version = table.remove("format_version").and_then(|v| v.as_integer()).map(|v| v as u64);
    check_version(path, version).map_err(|e| match e {
        ToolError::Format { path, message } => ToolError::Config { path, message },
        other => other,
    })?;
    let config: FilterConfig = table.try_into().map_err(|e: toml::de::Error| ToolError::config(path, e.message()))?;
    config.validate().map_err(|e| ToolError::config(path, e))?;
    Ok(config)
}

pub fn load_filter_config(path: &Path) -> Result<FilterConfig, ToolError> {
    parse_filter_config(&read_text(path)?, path)
}

/// Filter config with the bandwidth units spelled out.
pub fn filter_config_text(config: &FilterConfig) -> String {
    let body = toml::to_string(config).expect("filter config serializes");
    format!(
        "# All bandwidths are Gaussian standard deviations in seconds on the\n\
         # resampled grid (speed_step, accel_step). speed_drop_threshold is in\n\
         # km/h per second, keep_window in seconds.\n\
         format_version = {FORMAT_VERSION}\n{body}"
    )
}

// ---------------------------------------------------------------- CSV

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ToolError> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| ToolError::format(path, format!("row {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub image: String,
    pub lat: f64,
    pub lon: f64,
    pub heading: f64,
    pub accuracy: f64,
}

/// GPS fix per image, keyed by image base name.
pub fn load_track(path: &Path) -> Result<BTreeMap<String, TrackRow>, ToolError> {
    let rows: Vec<TrackRow> = read_csv(path)?;
    let mut out = BTreeMap::new();
    for r in rows {
        if !(-90.0..=90.0).contains(&r.lat) || !(-180.0..=180.0).contains(&r.lon) {
            return Err(ToolError::format(path, format!("{}: position out of range", r.image)));
        }
        out.insert(image_key(&r.image), r);
    }
    Ok(out)
}

impl TrackRow {
    pub fn image_geo(&self, image_width: usize) -> ImageGeo {
        ImageGeo {
            position: GeoPoint::new(self.lat, self.lon),
            heading: crate::geo::normalize_heading(self.heading),
            accuracy: self.accuracy,
            image_width: image_width as f64,
        }
    }
}

#[derive(Debug, Deserialize)]
struct SpeedRow {
    timestamp: f64,
    speed_kmh: f64,
}

#[derive(Debug, Deserialize)]
struct AccelRow {
    timestamp: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub image: String,
    pub timestamp: f64,
}

pub fn load_speed_trace(path: &Path) -> Result<SpeedTrace, ToolError> {
    let rows: Vec<SpeedRow> = read_csv(path)?;
    Ok(SpeedTrace {
        samples: rows.into_iter().map(|r| (r.timestamp, r.speed_kmh)).collect(),
    })
}

pub fn load_accel_trace(path: &Path) -> Result<AccelTrace, ToolError> {
    let rows: Vec<AccelRow> = read_csv(path)?;
    Ok(AccelTrace {
        samples: rows
            .into_iter()
            .map(|r| AccelSample {
                t: r.timestamp,
                ax: r.ax,
                ay: r.ay,
                az: r.az,
            })
            .collect(),
    })
}

pub fn load_image_list(path: &Path) -> Result<Vec<ImageRow>, ToolError> {
    read_csv(path)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ToolError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| ToolError::format(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| ToolError::format(path, e))?;
    write_bytes(path, &bytes)
}

pub fn save_speed_trace(path: &Path, trace: &SpeedTrace) -> Result<(), ToolError> {
    #[derive(Serialize)]
    struct Row {
        timestamp: f64,
        speed_kmh: f64,
    }
    let rows: Vec<Row> = trace
        .samples
        .iter()
        .map(|&(timestamp, speed_kmh)| Row { timestamp, speed_kmh })
        .collect();
    write_csv(path, &rows)
}

pub fn save_accel_trace(path: &Path, trace: &AccelTrace) -> Result<(), ToolError> {
    #[derive(Serialize)]
    struct Row {
        timestamp: f64,
        ax: f64,
        ay: f64,
        az: f64,
    }
    let rows: Vec<Row> = trace
        .samples
        .iter()
        .map(|s| Row {
            timestamp: s.t,
            ax: s.ax,
            ay: s.ay,
            az: s.az,
        })
        .collect();
    write_csv(path, &rows)
}

pub fn save_image_list(path: &Path, rows: &[ImageRow]) -> Result<(), ToolError> {
    write_csv(path, rows)
}

pub fn save_track(path: &Path, rows: &[TrackRow]) -> Result<(), ToolError> {
    write_csv(path, rows)
}

/// Non-empty, trimmed lines.
pub fn load_lines(path: &Path) -> Result<Vec<String>, ToolError> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}
