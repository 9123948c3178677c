//! Dataset manifests, PNG decoding and normalisation, the procedural real
//! corpus, and deterministic splits.

pub mod corpus;
pub mod image_io;
pub mod manifest;
pub mod split;

pub use corpus::{procedural_image, synthesize_real_corpus};
pub use image_io::{load_and_normalize, save_png};
pub use manifest::{DatasetManifest, Label, ManifestRow, Split, REAL_GENERATOR};
pub use split::{split_manifest, Protocol, SplitBundle};
