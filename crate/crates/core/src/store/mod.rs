//! On-disk formats: the FMTC tensor container, the dataset manifest, PGM
//! exports, and the synthetic store generator.

pub mod container;
pub mod manifest;
pub mod pgm;
pub mod synthetic;

pub use container::{read_tensor, write_tensor, Dtype};
pub use manifest::{Dataset, FeatureGrid, Manifest, Record};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticSet};
