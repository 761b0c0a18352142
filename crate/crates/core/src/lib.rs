//! Region-aligned contrastive pretraining on a small convolutional encoder.
//!
//! The crate covers view geometry, exact region pooling, a compact reverse-mode
//! autodiff engine, the encoder with its momentum copy, the region and image
//! objectives, and the training and evaluation drivers.

pub mod augment;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod pooling;
pub mod tensor;
pub mod trainer;

pub use encoder::{Encoder, EncoderConfig, EncoderState, Level, Variant};
pub use error::{Error, Result};
pub use geometry::{Point, Region, RegionPair, ViewTransform, WindowSpec};
pub use losses::{LossConfig, LossMode, MomentumQueue};
pub use pooling::{PoolMethod, PooledFeature};
pub use tensor::{Graph, Scalar, Tensor, Var};
pub use augment::{AugmentConfig, Image};
pub use data::{Dataset, FolderDataset, SyntheticDataset};
pub use eval::{eval_retrieval, RetrievalReport};
pub use trainer::{train, RunConfig, TrainConfig, Trainer};
