//! Micro-expression recognition from optical flow with causal attention.
//!
//! The library is organized around the stages of the pipeline:
//!
//! - [`data`]: domain types (key frames, samples, label taxonomy) and validation.
//! - [`flow`]: optical flow estimation, optical strain, 28x28 model inputs,
//!   direction maps, and a synthetic clip generator.
//! - [`attention`]: the attention primitives — neighborhood mask, pseudo
//!   scores, masked pseudo-attention, temporal causal attention, and causal
//!   relation mining — with hand-written backward passes.
//! - [`nn`]: small dense/conv/layer-norm building blocks and the Adam optimizer.
//! - [`model`]: the assembled network (encoders + position learning + causal
//!   attention block + classifier) and its training loop.
//! - [`eval`]: leave-one-subject-out splitting, UF1/UAR/ACC metrics, and
//!   composite-database evaluation.
//! - [`robustness`]: key-frame index noise injection and sweep harness.
//! - [`dataset`]: on-disk clip layout (frames + meta.txt) used by the CLI.
//! - [`config`]: plain-text key=value run configuration.
//! - [`viz`]: hue-wheel rendering of flow direction maps.

pub mod attention;
pub mod config;
pub mod data;
pub mod dataset;
pub mod eval;
pub mod flow;
pub mod model;
pub mod nn;
pub mod report;
pub mod robustness;
pub mod viz;

pub use data::{CompositeLabel, DatasetId, KeyFrames, LabelMapping, MESample};
pub use flow::{DirectionMap, FlowField, FlowImage};
