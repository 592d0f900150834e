//! CPU Vision Transformer inference with inference-time attenuation of
//! high-norm artifact tokens in the final attention layer, plus the
//! evaluation toolkit around it: K-Means clustering with ACC/NMI/ARI,
//! weighted k-NN classification, and norm/attention exports.
//!
//! No training happens anywhere; every edit acts on the pre-softmax logits
//! of the final block of a frozen checkpoint.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod clustering;
pub mod data;
pub mod engineering;
pub mod error;
pub mod export;
pub mod knn;
pub mod metrics;
pub mod model_io;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod synthetic;
pub mod vit;

pub use artifacts::{ArtifactSet, NormProfile, NormSource, SelectionMode};
pub use engineering::{ArtifactRule, EngineeringPlan, Scope, Strategy};
pub use error::{Error, Result};
pub use model_io::{FeatureMatrix, ModelConfig, WeightStore};
pub use numerics::Matrix;
pub use par::Execution;
pub use vit::{ForwardOutput, Image, Vit};
