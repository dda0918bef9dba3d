//! Robust salient-object detection on compressed images.
//!
//! * [`codec`] — block-transform compression at discrete QP levels.
//! * [`dataset`] — compressed benchmarks, manifests, synthetic corpus.
//! * [`net`] — backbone, aggregation, connection module and heads.
//! * [`hpl`] — relation/location prior losses, saliency loss, self-masking.
//! * [`lgr`] — location-aware graph reasoning.
//! * [`metrics`] — S-measure, max F-measure, MAE and aggregation.
//! * [`train`] — two-phase training controller.
//! * [`bench`] — evaluation reports, comparisons and plots.

pub mod bench;
pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod hpl;
pub mod imageio;
pub mod lgr;
pub mod metrics;
pub mod net;
pub mod train;

pub use error::{Error, Result};
