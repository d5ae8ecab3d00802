//! Best-plan prediction: features, near-optimality labels, a spectrally
//! normalized network with a Gaussian-process output layer, and
//! confidence-thresholded inference.

pub mod features;
pub mod labels;
pub mod model;
pub mod nn;

pub use features::{build_vocabulary, FeatureMode, FeaturizerState, Features, Vocabulary};
pub use labels::{example_weight, label_near_optimal, LabelMatrix, LabelParams};
pub use model::{choose, train_model, HeadScore, ModelArtifact, ModelConfig, PlanChoice, TrainReport, CONFIDENCE_CAP};
