//! Conditional rectified-flow translation of 3D volumes.
//!
//! A source volume is transported to two target volumes (one per tracer) by
//! integrating a learned velocity field conditioned on a two-token context:
//! an adapted modality embedding and a subject embedding. The crate bundles
//! everything needed to train and evaluate that model at desk scale:
//!
//! - [`volume`]: volumes, label maps, and the `VOL1`/`LBL1` formats
//! - [`synthdata`]: the procedural phantom generator and its transfer oracle
//! - [`diffcore`]: tensors, reverse-mode tape, Adam, `CKPT1` checkpoints
//! - [`adapters`]: embedding providers and the affine adapter alignment
//! - [`velocitynet`]: the multi-task 3D encoder–decoder velocity network
//! - [`rectflow`]: flow training, Euler sampling, one-step distillation
//! - [`evalstat`]: image metrics, ROI uptake, t-tests, BH-FDR, reports
//! - [`config`] and [`pipeline`]: declarative runs of every stage

pub mod adapters;
pub mod config;
pub mod diffcore;
pub mod evalstat;
pub mod pipeline;
pub mod rectflow;
pub mod rng;
pub mod synthdata;
pub mod velocitynet;
pub mod volume;

pub use synthdata::Tracer;
pub use volume::{Dims, Volume3D};
