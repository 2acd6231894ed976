//! Skeleton graphs, clips, NTU ingestion, preprocessing, and synthetic data.

mod bones;
mod clip;
mod graph;
mod manifest;
mod ntu;
pub mod packed;
mod preprocess;
mod synth;

pub use bones::compute_bones;
pub use clip::{Dataset, SkeletonClip};
pub use graph::{normalize_adjacency, SkeletonGraph, CENTRIFUGAL, CENTRIPETAL, NTU_CENTER, NTU_EDGES, NTU_JOINTS, ROOT};
pub use manifest::{DatasetManifest, ManifestEntry, SampleSource, Split, SplitRule};
pub use ntu::{parse_ntu_file, parse_ntu_name, parse_ntu_skeleton, NtuName, RawBody, RawFrame, RawSequence};
pub use preprocess::{preprocess_clip, PreprocessOptions};
pub use synth::{synth_generate, Archetype, SynthConfig};
