//! Data pipeline: image I/O, thresholding, skeleton extraction,
//! degradation synthesis, augmentation, and dataset loading.

mod augment;
mod binarize;
mod corpus;
mod image_io;
mod manifest;
mod noise;
mod skeleton;

pub use augment::{apply_transform, Transform};
pub use binarize::{binarize, luminance, otsu_cut};
pub use corpus::{generate_glyph, synthetic_dataset};
pub use image_io::{quantize_to_u8_grid, read_gray, read_rgb, resize_bilinear, write_png};
pub use manifest::{
    assign_splits, load_dataset, skeleton_from_clean, split_pair, stack_batch, DatasetManifest,
    Layout, SampleRecord, Side, Split,
};
pub use noise::{synthesize_noise, NoiseKind, NoiseSpec};
pub use skeleton::{mask_to_planes, planes_to_mask, skeletonize};
