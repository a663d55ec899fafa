//! Imagery I/O and sampling: multi-spectral rasters, catalog manifests,
//! patch tiling, triplet construction, dense inference windows, and the
//! seeded synthetic texture corpus.

pub mod catalog;
pub mod patches;
pub mod raster;
pub mod synth;

pub use catalog::{filter_catalog, read_manifest, write_manifest, CatalogEntry};
pub use patches::{dense_windows, extract_window, sample_triplet, tile_image, LoadedCatalog, Triplet};
pub use raster::{read_msr1, write_msr1, MultiSpectralImage};
pub use synth::{synth_generate, SynthOutput, SynthSpec};
