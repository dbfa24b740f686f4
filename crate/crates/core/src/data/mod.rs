//! Synthetic two-domain segmentation benchmark: scene generation, the
//! `SDR1` raster format and seeded batch iteration.

mod dataset;
mod raster;
mod rng;
mod scene;

pub use dataset::{domain_dir, sample_from_rasters, sample_to_rasters, BatchIter, DomainBatch, DomainSplit};
pub use raster::{Raster, RasterData, HEADER_LEN, MAGIC, VERSION};
pub use rng::{derive_seed, SeededRng};
pub use scene::{generate_scene, shape_for_class, Domain, SceneSample, ShapeKind, ShiftConfig};
