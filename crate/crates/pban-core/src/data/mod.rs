//! Data handling: image codecs, dataset manifests, and model checkpoints.

pub mod checkpoint;
pub mod image;
pub mod manifest;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use image::{
    decode_image, encode_ppm, extract_patches, read_image, write_gray_png, write_ppm, ImageRGB,
};
pub use manifest::{load_manifest, parse_manifest, Manifest, Record, MANIFEST_HEADER};
