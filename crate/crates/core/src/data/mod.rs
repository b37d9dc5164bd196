//! Datasets on disk and the procedural corpus generator.

pub mod manifest;
pub mod synth;

pub use manifest::{load_manifest, merge_sources, DatasetManifest, ManifestEntry, SampleSet, Split};
pub use synth::{generate, synthesize_pair, Manipulation, SynthPair, SynthSpec};
