//! Dataset ingestion, preprocessing, augmentation and splitting.

mod augment;
mod bmp;
mod filename;
mod image;
mod manifest;
pub mod synth;

use std::path::Path;

use rayon::prelude::*;

pub use augment::{augment, rotate, sample_params, sample_rng, AugmentConfig, AugmentParams};
pub use bmp::{decode_bmp, decode_bmp_bytes, encode_bmp_gray8, encode_bmp_rgb24};
pub use filename::parse_filename;
pub use image::{preprocess, resize_bilinear, z_normalize, ImageBuffer, STD_FLOOR};
pub use manifest::{
    assign_subjects, build_manifest, read_labels, resolve, scan_images, split_counts, DatasetManifest, Label, Ratios,
    SampleRecord, Split, SubjectEntry, IMAGE_DIR, MAX_VIEWS,
};

use crate::error::Result;
use crate::tensor::Tensor;

/// A preprocessed view ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject_id: u32,
    pub view_index: u32,
    /// 3×S×S.
    pub input: Tensor,
    /// 1 for the positive class, else 0.
    pub target: f32,
}

/// Decodes and preprocesses the given records, in order.
pub fn load_samples(root: &Path, records: &[&SampleRecord], size: usize) -> Result<Vec<Sample>> {
    records
        .par_iter()
        .map(|r| {
            let img = decode_bmp(&resolve(root, r))?;
            Ok(Sample {
                subject_id: r.subject_id,
                view_index: r.view_index,
                input: preprocess(&img, size)?,
                target: r.label.target() as f32,
            })
        })
        .collect()
}
