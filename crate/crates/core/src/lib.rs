//! Multimodal progressive temporal graph network for cybersickness level
//! prediction.
//!
//! Sensor streams (eye, head, physiology) are encoded per modality, mixed on
//! learnable graphs, fused by a difference attention encoder into a personal
//! embedding `z_p`. A video encoder is trained to predict the level and to
//! match `z_p`, so that inference needs the video path alone.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffattn;
pub mod encoders;
pub mod eval;
pub mod export;
pub mod error;
pub mod graph;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod train;
pub mod video;

pub use error::{Error, Result};
