//! Manifests, fixations, ground truth, clip windows and synthetic data.

pub mod clip;
pub mod ground_truth;
pub mod manifest;
pub mod synth;

pub use clip::{augment_flip, flip_sample, load_clip, window_indices, ClipOptions, ClipSample, INPUT_SIZE, WINDOW};
pub use ground_truth::{build_ground_truth, ground_truth_from_cells, GroundTruth, DEFAULT_SIGMA_FRACTION};
pub use manifest::{load_videos, parse_manifest, FixationPoint, FixationSet, Split, Video, VideoRecord};
pub use synth::{synth_depth_popout, SynthOptions};
