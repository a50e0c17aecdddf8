//! Ingestion, preprocessing, augmentation and seeded splitting.

mod augment;
mod dataset;
pub mod geometry;
pub mod io;
mod normalize;
mod photometric;
mod plane;
mod resize;
mod sample;
mod split;
mod tiling;

pub use augment::{augment, AugmentDraw};
pub use dataset::Dataset;
pub use normalize::normalize_red_channel;
pub use photometric::{ColorJitter, JitterDraw};
pub use plane::{Image, Mask, Plane};
pub use resize::{interpolate_bilinear, resize_nearest};
pub use sample::{preprocess, replay, PreprocessConfig, PreprocessMode, ProcessedSample, RawSample, Step};
pub use split::{split_dataset, subsample_labels, DatasetSplit, LabelFractionSplit, SplitSpec};
pub use tiling::{tile_image, untile, TileGrid};
