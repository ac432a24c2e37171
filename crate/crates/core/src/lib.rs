//! Event-based egocentric gesture recognition.
//!
//! The pipeline runs in three stages: raw events are sliced into a grid of
//! coarse bins and fine frames and turned into locally normalized event
//! surfaces ([`lnes`]); a small depthwise-separable encoder turns each frame
//! into a feature vector ([`model`]); a selective state-space context block
//! ([`ssm`]) and the parameter-free bins-temporal shift ([`btsm`]) mix
//! information across time before classification.
//!
//! [`synth`] generates labeled synthetic event streams with camera ego-motion
//! so every stage can be trained and tested without hardware, and [`stats`]
//! computes event-rate and duration summaries over a corpus.

pub mod btsm;
pub mod dataset;
pub mod error;
pub mod events;
pub mod lnes;
pub mod model;
pub mod ssm;
pub mod stats;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
