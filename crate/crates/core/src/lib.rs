//! Supervised retinal vessel segmentation.
//!
//! The green channel of a fundus image is contrast-enhanced (CLAHE with a
//! Rayleigh target, linear stretch), denoised (median), smoothed with an
//! isotropic Gaussian matched filter, vessel-highlighted with top-hat/bot-hat
//! morphology and binarized with Otsu's threshold. A small tanh MLP trained
//! with iRprop− then maps the complemented binary image to a vessel map, which
//! is scored with pixel accuracy against a manual segmentation.
//!
//! Modules, bottom-up:
//!
//! * [`imagio`] pixel buffers, Netpbm and CSV codecs
//! * [`enhance`] green channel, SNR, CLAHE, stretch, median, Gaussian filter
//! * [`morphbin`] morphology, Otsu, binarize, complement
//! * [`mlp`] classifier, backprop, Rprop, training
//! * [`eval`] confusion counts, accuracy, ROC, reports
//! * [`synth`] synthetic fundus generator
//! * [`config`], [`dataset`], [`pipeline`] run orchestration

pub mod config;
pub mod dataset;
pub mod enhance;
pub mod eval;
pub mod imagio;
pub mod mlp;
pub mod morphbin;
pub mod pipeline;
pub mod synth;

pub use config::PipelineConfig;
pub use imagio::{BinaryImage, GrayImage, Image, RgbImage};
pub use pipeline::{preprocess, run_experiment, Experiment, PipelineError, Stages};
