//! Non-maximum suppression for crowded scenes.
//!
//! Greedy NMS removes every proposal that overlaps a higher-scoring one by
//! at least the NMS threshold, which also removes true detections of
//! heavily occluded objects. Pairwise NMS keeps such a neighbor when a
//! learned pair-relationship network places the two proposals far apart in
//! an embedding space, i.e. when they most likely cover two different
//! objects.
//!
//! Modules:
//!
//! * [`geometry`]: boxes, IoU, occlusion, ROI feature extraction.
//! * [`scene`]: deterministic synthetic crowded scenes with features.
//! * [`pairs`]: pair taxonomy, labels and training-pair sampling.
//! * [`embed`]: the embedding network, contrastive training, distance matrices.
//! * [`suppress`]: greedy, linear/Gaussian Soft-NMS and pairwise NMS.
//! * [`eval`]: COCO-style AP, PR curves and F1 by occlusion.
//! * [`io`]: JSONL records, feature grids and checkpoints.
//! * [`cli`]: the `crowdnms` pipeline commands.

pub mod cli;
pub mod embed;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod pairs;
pub mod scene;
pub mod suppress;

pub use embed::{DistanceMatrix, EmbeddingModel, HeadType, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use geometry::{iou, BBox, FeatureGrid, RoiFeature};
pub use scene::{GtObject, Scene, SceneConfig, ScoredProposal};
pub use suppress::{Method, SuppressionConfig};
