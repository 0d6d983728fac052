//! Image, mask and prompt data model plus dataset manifests.

mod manifest;
mod raster;
pub mod synthetic;

pub use manifest::{split_manifest, DatasetManifest, ManifestRecord, SampleTuple, SplitTag};
pub use raster::{
    load_image, load_mask, save_image, PromptText, RasterImage, RegionMask, CHANNELS, MIN_SIDE,
};
pub(crate) use raster::nchw_to_array;
