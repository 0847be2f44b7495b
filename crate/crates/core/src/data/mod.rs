//! Manifests, windowing, folds, nested subsampling and synthetic corpora.

mod folds;
mod manifest;
mod subsample;
mod synthetic;
mod window;

pub use folds::{make_folds, FoldSplit};
pub use manifest::{load_manifest, parse_manifest, write_signal, DatasetManifest, ManifestRecord};
pub use subsample::{power_of_two_fractions, subsample_training_set, Subset};
pub use synthetic::{
    generate_synthetic, synthetic_windows, SyntheticSpec, SyntheticTask, BAND_HZ, RATE_BUCKET_EDGES_HZ,
};
pub use window::{normalize_channels, window_and_normalize, SignalWindow, WindowSet, WindowStream};
