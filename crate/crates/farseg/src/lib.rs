//! Foreground-aware relation network for geospatial object segmentation.
//!
//! Aerial imagery poses three segmentation problems that natural-image
//! models mostly ignore: objects span a huge range of scales, the background
//! is cluttered enough to produce false alarms, and foreground pixels are a
//! tiny fraction of the total. This crate implements a network and training
//! objective built around those three problems:
//!
//! * [`encoder`] — a residual backbone with a feature-pyramid top-down path
//!   and a pooled per-image scene vector;
//! * [`relation`] — gates pyramid features by their similarity to the scene
//!   embedding, amplifying scene-consistent foreground;
//! * [`decoder`] — a light-weight upsampling head producing full-resolution
//!   class logits;
//! * [`loss`] — cross entropy reweighted by normalized focal weights under
//!   an annealing schedule, keeping the loss sum constant while moving mass
//!   onto hard examples;
//! * [`data`], [`eval`], [`train`], [`predict`] — the surrounding tooling:
//!   synthetic imbalanced datasets, sliding-window tiling, confusion-matrix
//!   mIoU, and the experiment loop driven by the `farseg` CLI.
//!
//! The mdBook under `book/` walks through each concept; its code snippets
//! are compiled and run as doc-tests (see `book_tests` in this crate).

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod relation;

pub use error::{Error, Result};
