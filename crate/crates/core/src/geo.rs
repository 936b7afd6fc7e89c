//! Placing detected signs on the map from the image's GPS fix and heading,
//! and scoring the placements against surveyed positions.
//!
//! The earth is treated as a sphere; at sign distances of tens of meters the
//! difference to an ellipsoid is far below GPS noise.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::BoundingBox;

/// Mean earth radius in meters.
pub const EARTH_RADIUS: f64 = 6_371_008.8;
/// Widest heading difference at which a sign still faces the camera.
pub const MAX_VIEW_ANGLE: f64 = 90.0;
/// Default cutoff on a fix's reported inaccuracy for the filtered median.
pub const DEFAULT_ACCURACY_CUTOFF: f64 = 3.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("no sign size known for class {0:?}")]
    MissingSignSpec(String),
    #[error("box width must be positive, got {0}")]
    InvalidBox(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub const fn new(lat: f64, lon: f64) -> Self {
        GeoPoint { lat, lon }
    }
}

/// Where and in which direction an image was taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageGeo {
    pub position: GeoPoint,
    /// Degrees clockwise from north.
    pub heading: f64,
    /// Reported GPS inaccuracy in meters.
    pub accuracy: f64,
    /// Image width in pixels.
    pub image_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Millimeters.
    pub focal_length: f64,
    /// Millimeters.
    pub sensor_width: f64,
    /// Horizontal angle of view in degrees.
    pub angle_of_view: f64,
}

impl Default for CameraModel {
    /// A typical phone main camera: 4.7 mm lens on a 6 mm wide sensor,
    /// 65° horizontal view.
    fn default() -> Self {
        CameraModel {
            focal_length: 4.7,
            sensor_width: 6.0,
            angle_of_view: 65.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignSpec {
    pub class: String,
    /// Meters.
    pub width: f64,
    /// Meters.
    pub height: f64,
}

/// Physical sign sizes by class name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignCatalog {
    pub signs: BTreeMap<String, SignSpec>,
}

impl Default for SignCatalog {
    /// Round signs 0.6 m across, rectangular ones 0.6 m × 0.9 m.
    fn default() -> Self {
        let mut signs = BTreeMap::new();
        let mut add = |class: &str, width: f64, height: f64| {
            signs.insert(
                class.to_string(),
                SignSpec {
                    class: class.to_string(),
                    width,
                    height,
                },
            );
        };
        for c in ["237", "239", "240", "241", "267"] {
            add(c, 0.6, 0.6);
        }
        for c in ["242.1", "244.1", "1000-32", "1022-10"] {
            add(c, 0.6, 0.9);
        }
        SignCatalog { signs }
    }
}

impl SignCatalog {
    pub fn get(&self, class: &str) -> Result<&SignSpec, GeoError> {
        self.signs
            .get(class)
            .ok_or_else(|| GeoError::MissingSignSpec(class.to_string()))
    }
}

/// A sign on the map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignGeo {
    pub position: GeoPoint,
    /// Degrees in `[0, 360)`.
    pub heading: f64,
    pub class: String,
}

/// Wraps any angle into `[0, 360)`.
pub fn normalize_heading(h: f64) -> f64 {
    let r = h.rem_euclid(360.0);
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Smallest angle between two headings, in `[0, 180]`.
pub fn heading_difference(a: f64, b: f64) -> f64 {
    let d = normalize_heading(a - b);
    d.min(360.0 - d)
}

/// Heading of the box center relative to the optical axis; negative is left.
pub fn relative_heading(b_x: f64, image_width: f64, angle_of_view: f64) -> f64 {
    angle_of_view * (b_x / image_width - 0.5)
}

/// Pinhole distance from the sign's apparent width.
pub fn estimate_distance(b_w: f64, image_width: f64, camera: &CameraModel, sign_width: f64) -> f64 {
    camera.focal_length * sign_width * image_width / (b_w * camera.sensor_width)
}

/// Point reached by traveling `distance` meters along the great circle
/// starting at `origin` with initial `bearing`.
pub fn destination_point(origin: GeoPoint, bearing: f64, distance: f64) -> GeoPoint {
    if distance == 0.0 {
        return origin;
    }
    let delta = distance / EARTH_RADIUS;
    let theta = bearing.to_radians();
    let phi1 = origin.lat.to_radians();
    let lambda1 = origin.lon.to_radians();
    let sin_phi2 = phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos();
    let phi2 = sin_phi2.clamp(-1.0, 1.0).asin();
    let lambda2 = lambda1 + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * sin_phi2);
    let lon = (lambda2.to_degrees() + 540.0).rem_euclid(360.0) - 180.0;
    GeoPoint::new(phi2.to_degrees(), lon)
}

/// Great-circle distance in meters.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS * h.sqrt().min(1.0).asin()
}

/// Initial great-circle bearing from `a` to `b`, in `[0, 360)`.
pub fn initial_bearing(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlambda = (b.lon - a.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    normalize_heading(y.atan2(x).to_degrees())
}

/// A sign placed from one detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub sign: SignGeo,
    /// Estimated camera-to-sign distance in meters.
    pub distance: f64,
    /// Offset from the image heading in degrees.
    pub relative_heading: f64,
}

/// Moves the image position by the estimated distance in the direction of
/// the box.
pub fn project_sign(
    image: &ImageGeo,
    bbox: &BoundingBox,
    class: &str,
    camera: &CameraModel,
    catalog: &SignCatalog,
) -> Result<Projection, GeoError> {
    let spec = catalog.get(class)?;
    if !(bbox.w > 0.0) {
        return Err(GeoError::InvalidBox(bbox.w));
    }
    let dh = relative_heading(bbox.x, image.image_width, camera.angle_of_view);
    let distance = estimate_distance(bbox.w, image.image_width, camera, spec.width);
    let heading = normalize_heading(image.heading + dh);
    Ok(Projection {
        sign: SignGeo {
            position: destination_point(image.position, heading, distance),
            heading,
            class: class.to_string(),
        },
        distance,
        relative_heading: dh,
    })
}

/// A placed sign together with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizedSign {
    pub sign: SignGeo,
    pub source_image: String,
    /// GPS inaccuracy of the source image's fix, meters.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignMatch {
    pub truth: usize,
    pub distance: f64,
    pub heading_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// One entry per detection; `None` when no truth sign qualifies.
    pub matches: Vec<Option<SignMatch>>,
    pub median_error: Option<f64>,
    /// Median over detections whose fix accuracy is within the cutoff.
    pub filtered_median_error: Option<f64>,
    pub accuracy_cutoff: f64,
}

impl MatchReport {
    pub fn n_matched(&self) -> usize {
        self.matches.iter().filter(|m| m.is_some()).count()
    }
}

/// Assigns every detection to the nearest truth sign of its class whose
/// heading differs by at most 90°. Several detections may share a truth sign.
pub fn match_signs(detections: &[LocalizedSign], truth: &[SignGeo], accuracy_cutoff: f64) -> MatchReport {
    let matches: Vec<Option<SignMatch>> = detections
        .iter()
        .map(|d| {
            truth
                .iter()
                .enumerate()
                .filter(|(_, t)| t.class == d.sign.class)
                .filter_map(|(i, t)| {
                    let gap = heading_difference(d.sign.heading, t.heading);
                    (gap <= MAX_VIEW_ANGLE).then(|| SignMatch {
                        truth: i,
                        distance: haversine(d.sign.position, t.position),
                        heading_gap: gap,
                    })
                })
                .min_by(|a, b| a.distance.total_cmp(&b.distance).then(a.truth.cmp(&b.truth)))
        })
        .collect();
    let errors: Vec<f64> = matches.iter().flatten().map(|m| m.distance).collect();
    let filtered: Vec<f64> = matches
        .iter()
        .zip(detections)
        .filter(|(_, d)| d.accuracy <= accuracy_cutoff)
        .filter_map(|(m, _)| m.map(|m| m.distance))
        .collect();
    MatchReport {
        median_error: median(&errors),
        filtered_median_error: median(&filtered),
        matches,
        accuracy_cutoff,
    }
}

/// Middle value, or the mean of the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}
