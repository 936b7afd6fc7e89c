//! Compile random forests into neural networks, fuse them with a
//! convolutional feature extractor into a fully convolutional detector, and
//! run the downstream detection, localization, filtering and evaluation
//! stages.

pub mod convnet;
pub mod detector;
pub mod evalkit;
pub mod forest;
pub mod geo;
pub mod netmap;
pub mod ridefilter;
pub mod toolkit;
