//! Eye-tracking scanpath encoding and perceived-relevance prediction.
//!
//! The pipeline turns raw gaze samples into fixations (I-VT), fixations into
//! scanpath images and aggregate features, and trains interchangeable
//! relevance classifiers on them: a small convolutional network trained from
//! scratch, a random forest and a linear SVM. Grad-CAM heatmaps explain the
//! network's decisions, and a behavioural simulator provides labelled
//! reading/skimming trials for end-to-end validation.

pub mod baselines;
pub mod classifier;
pub mod eval;
pub mod features;
pub mod fixdet;
pub mod gradcam;
pub mod ingest;
pub mod nn;
pub mod render;
pub mod synth;
pub mod types;

pub use classifier::{ClassifierRegistry, ClassifierSettings, ModelInput, RelevanceClassifier};
pub use types::{
    validate_scanpath, Fixation, GazeSample, RelevanceLabel, Scanpath, Screen, Split, TrialRecord, Violation,
};
