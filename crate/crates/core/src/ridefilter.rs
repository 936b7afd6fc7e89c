//! Picks the moments of a ride worth keeping images for: noticeable
//! decelerations in the GPS speed and bursts in the accelerometer norm.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Standard gravity, m/s².
pub const G: f64 = 9.81;

/// Fewest samples either detector accepts.
pub const MIN_SAMPLES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RideError {
    #[error("trace has {found} samples, at least {MIN_SAMPLES} are needed")]
    TooFewSamples { found: usize },
    #[error("timestamps must be strictly increasing (sample {index})")]
    NonMonotonic { index: usize },
    #[error("invalid sample {index}: {detail}")]
    InvalidSample { index: usize, detail: String },
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
}

/// `(timestamp s, speed km/h)` samples.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpeedTrace {
    pub samples: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelSample {
    pub t: f64,
    /// m/s²
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

impl AccelSample {
    pub fn norm(&self) -> f64 {
        (self.ax * self.ax + self.ay * self.ay + self.az * self.az).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccelTrace {
    pub samples: Vec<AccelSample>,
}

/// All bandwidths are standard deviations in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub speed_sigma: f64,
    /// Deceleration in km/h per second above which a speed event fires.
    pub speed_drop_threshold: f64,
    pub accel_sigma_short: f64,
    pub accel_sigma_long: f64,
    pub ratio_k: f64,
    /// Seconds on either side of an event within which images are kept.
    pub keep_window: f64,
    /// Resampling step for speed, seconds.
    pub speed_step: f64,
    /// Resampling step for acceleration, seconds.
    pub accel_step: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            speed_sigma: 2.0,
            speed_drop_threshold: 1.0,
            accel_sigma_short: 1.5,
            accel_sigma_long: 10.0,
            ratio_k: 2.8,
            keep_window: 3.0,
            speed_step: 1.0,
            accel_step: 0.1,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), RideError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        for (name, v) in [
            ("speed_sigma", self.speed_sigma),
            ("accel_sigma_short", self.accel_sigma_short),
            ("accel_sigma_long", self.accel_sigma_long),
            ("speed_step", self.speed_step),
            ("accel_step", self.accel_step),
        ] {
            if !pos(v) {
                return Err(RideError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.ratio_k.is_finite() && self.ratio_k > 1.0) {
            return Err(RideError::InvalidConfig(format!("ratio_k must exceed 1, got {}", self.ratio_k)));
        }
        if !(self.keep_window.is_finite() && self.keep_window >= 0.0) {
            return Err(RideError::InvalidConfig(format!("keep_window must be non-negative, got {}", self.keep_window)));
        }
        if !self.speed_drop_threshold.is_finite() {
            return Err(RideError::InvalidConfig("speed_drop_threshold must be finite".into()));
        }
        Ok(())
    }
}

fn check_times(times: impl Iterator<Item = f64>) -> Result<usize, RideError> {
    let mut prev = f64::NEG_INFINITY;
    let mut n = 0;
    for (i, t) in times.enumerate() {
        if !t.is_finite() {
            return Err(RideError::InvalidSample {
                index: i,
                detail: "timestamp is not finite".into(),
            });
        }
        if t <= prev {
            return Err(RideError::NonMonotonic { index: i });
        }
        prev = t;
        n += 1;
    }
    if n < MIN_SAMPLES {
        return Err(RideError::TooFewSamples { found: n });
    }
    Ok(n)
}

/// Linear interpolation onto `t0, t0 + step, …` up to the last sample.
pub fn resample(times: &[f64], values: &[f64], step: f64) -> (Vec<f64>, Vec<f64>) {
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    let n = (span / step + 1e-9).floor() as usize + 1;
    let mut grid = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        let t = t0 + i as f64 * step;
        while j + 2 < times.len() && times[j + 1] <= t {
            j += 1;
        }
        let (ta, tb) = (times[j], times[j + 1]);
        let f = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
        grid.push(t);
        out.push(values[j] + (values[j + 1] - values[j]) * f);
    }
    (grid, out)
}

/// Index into `0..n` mirrored about the end samples (`… 2 1 | 0 1 2 … n−1 | n−2 …`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn gaussian(k: f64, sigma: f64) -> f64 {
    (-0.5 * (k / sigma).powi(2)).exp()
}

/// `Σ_k w_k · x[i + k]` for `k ∈ −r..=r`, reflected at the ends.
fn correlate(x: &[f64], weights: &[f64]) -> Vec<f64> {
    let r = (weights.len() / 2) as isize;
    let n = x.len();
    (0..n as isize)
        .map(|i| (-r..=r).zip(weights).map(|(k, w)| w * x[reflect(i + k, n)]).sum())
        .collect()
}

fn radius(sigma_samples: f64) -> usize {
    (4.0 * sigma_samples).ceil().max(1.0) as usize
}

/// Normalized Gaussian smoothing; `sigma` in samples.
pub fn gaussian_smooth(x: &[f64], sigma: f64) -> Vec<f64> {
    let r = radius(sigma) as isize;
    let mut w: Vec<f64> = (-r..=r).map(|k| gaussian(k as f64, sigma)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    correlate(x, &w)
}

/// Derivative-of-Gaussian estimate of `dx/dn`; `sigma` in samples. Weights
/// are `k·G(k) / Σ j²G(j)`, which reproduces the slope of a linear signal
/// exactly.
pub fn gaussian_derivative(x: &[f64], sigma: f64) -> Vec<f64> {
    let r = radius(sigma) as isize;
    let norm: f64 = (-r..=r).map(|k| (k * k) as f64 * gaussian(k as f64, sigma)).sum();
    let w: Vec<f64> = (-r..=r).map(|k| k as f64 * gaussian(k as f64, sigma) / norm).collect();
    correlate(x, &w)
}

/// Timestamp of the peak of every maximal run where `score > threshold`.
fn run_peaks(grid: &[f64], score: &[f64], threshold: f64) -> Vec<f64> {
    let mut events = Vec::new();
    let mut best: Option<usize> = None;
    for (i, &s) in score.iter().enumerate() {
        if s > threshold {
            if best.is_none_or(|b| s > score[b]) {
                best = Some(i);
            }
        } else if let Some(b) = best.take() {
            events.push(grid[b]);
        }
    }
    if let Some(b) = best {
        events.push(grid[b]);
    }
    events
}

/// Deceleration in km/h per second on the resampled grid.
pub fn speed_deceleration(trace: &SpeedTrace, config: &FilterConfig) -> Result<(Vec<f64>, Vec<f64>), RideError> {
    config.validate()?;
    check_times(trace.samples.iter().map(|s| s.0))?;
    for (i, &(_, v)) in trace.samples.iter().enumerate() {
        if !(v.is_finite() && v >= 0.0) {
            return Err(RideError::InvalidSample {
                index: i,
                detail: format!("speed {v} is negative or not finite"),
            });
        }
    }
    let (t, v): (Vec<f64>, Vec<f64>) = trace.samples.iter().copied().unzip();
    let (grid, vs) = resample(&t, &v, config.speed_step);
    let d = gaussian_derivative(&vs, config.speed_sigma / config.speed_step);
    Ok((grid, d.into_iter().map(|x| -x / config.speed_step).collect()))
}

/// One timestamp per episode of deceleration above the threshold, at its peak.
pub fn speed_events(trace: &SpeedTrace, config: &FilterConfig) -> Result<Vec<f64>, RideError> {
    let (grid, decel) = speed_deceleration(trace, config)?;
    Ok(run_peaks(&grid, &decel, config.speed_drop_threshold))
}

/// Short-over-long ratio of the smoothed acceleration norm on the resampled grid.
pub fn accel_ratio(trace: &AccelTrace, config: &FilterConfig) -> Result<(Vec<f64>, Vec<f64>), RideError> {
    config.validate()?;
    check_times(trace.samples.iter().map(|s| s.t))?;
    for (i, s) in trace.samples.iter().enumerate() {
        if !s.norm().is_finite() {
            return Err(RideError::InvalidSample {
                index: i,
                detail: "acceleration is not finite".into(),
            });
        }
    }
    let t: Vec<f64> = trace.samples.iter().map(|s| s.t).collect();
    let a: Vec<f64> = trace.samples.iter().map(AccelSample::norm).collect();
    let (grid, norm) = resample(&t, &a, config.accel_step);
    let short = gaussian_smooth(&norm, config.accel_sigma_short / config.accel_step);
    let long = gaussian_smooth(&norm, config.accel_sigma_long / config.accel_step);
    let floor = 0.01 * G;
    let ratio = short.iter().zip(&long).map(|(s, l)| s / l.max(floor)).collect();
    Ok((grid, ratio))
}

/// One timestamp per episode where the ratio exceeds `ratio_k`, at its peak.
pub fn accel_events(trace: &AccelTrace, config: &FilterConfig) -> Result<Vec<f64>, RideError> {
    let (grid, ratio) = accel_ratio(trace, config)?;
    Ok(run_peaks(&grid, &ratio, config.ratio_k))
}

/// Indices of the images with an event of either kind within `keep_window`
/// seconds, in input order.
pub fn filter_images(image_times: &[f64], speed_events: &[f64], accel_events: &[f64], keep_window: f64) -> Vec<usize> {
    let mut events: Vec<f64> = speed_events.iter().chain(accel_events).copied().collect();
    events.sort_by(f64::total_cmp);
    image_times
        .iter()
        .enumerate()
        .filter(|(_, &t)| {
            let i = events.partition_point(|&e| e < t - keep_window);
            events.get(i).is_some_and(|&e| e <= t + keep_window)
        })
        .map(|(i, _)| i)
        .collect()
}
