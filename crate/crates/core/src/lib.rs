//! Higher-order moment profiling of encoder feature tensors, caption metrics
//! and the analyses that relate the two over a training run.
//!
//! Feature tensors are stored in the `.fst` format (see [`tensor_store`]) and
//! listed per epoch in a JSON-lines run manifest. [`feature_stats`] turns a
//! manifest into a kurtosis/skewness trajectory, [`caption_metrics`] scores
//! captions, and [`analysis`] correlates, ranks and applies the stop rule.
//! [`synthgen`] produces synthetic runs with prescribed trajectories.

pub mod analysis;
pub mod caption_metrics;
pub mod feature_stats;
pub mod moments;
pub mod synthgen;
pub mod tensor_store;

pub use moments::{KurtosisKind, MomentAccumulator, MomentsError, SkewnessKind, StatDefinition};
pub use tensor_store::{Dims, Dtype, FeatureTensor, ReadMode, RunManifest};
