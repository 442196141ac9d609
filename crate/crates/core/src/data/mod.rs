//! Dataset ingestion, tiling, splits and the synthetic paired-domain scenes.

mod cycle;
mod manifest;
mod store;
mod synth;
mod tiling;

pub use cycle::DomainCycler;
pub use manifest::{
    build_manifest, parse_sample_id, DatasetManifest, ManifestEntry, ManifestMeta, ParentImage, Split, SplitRule,
};
pub use store::{load_sample, write_raster, Dataset, DirectoryStore, LoadMode, MemoryStore, Raster, RasterStore};
pub use synth::{synth_domain_pair, PhotometricShift, SynthConfig, SynthDomain};
pub use tiling::{tile_image, TilingSpec};
