//! Datasets: labeled images with optional ground-truth foreground masks, the
//! procedural two-domain synthetic generator, directory/manifest ingestion,
//! and train/query/gallery splitting under the single-query protocol.

pub mod io;
pub mod split;
pub mod synthetic;

pub use io::{
    load_manifest, load_reid_directory, write_synthetic_dataset, DirectoryLayout, LoadReport,
    MANIFEST_NAME,
};
pub use split::{
    build_domain_pools, split_train_query_gallery, split_with_partition, DatasetSplits,
    DomainPools, ProtocolConfig, SplitWarnings,
};
pub use synthetic::{generate_synthetic_dataset, render_identity, BackgroundStyle, SyntheticSpec, TextureKind};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// One image with its re-ID labels. `gt_mask` is present for synthetic data
/// only and is binary with the same spatial size as the image.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// (3, H, W), values in [-1, 1].
    pub image: Tensor,
    pub identity: u32,
    pub camera: u32,
    pub domain: Domain,
    /// (1, H, W), values in {0, 1}.
    pub gt_mask: Option<Tensor>,
    /// Where the image came from (or would be written), for exports.
    pub path: Option<String>,
}

impl LabeledImage {
    pub fn hw(&self) -> (usize, usize) {
        match self.image.shape() {
            [_, h, w] => (*h, *w),
            _ => (0, 0),
        }
    }
}

/// Stack per-image (3,H,W) tensors into one (N,3,H,W) batch.
pub fn stack_images(images: &[&LabeledImage]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Data("cannot stack an empty image batch".into()));
    }
    let shape = images[0].image.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].image.numel());
    for img in images {
        if img.image.shape() != shape {
            return Err(Error::Shape(format!(
                "image shape mismatch in batch: {:?} vs {:?}",
                img.image.shape(),
                shape
            )));
        }
        data.extend_from_slice(img.image.data());
    }
    Ok(Tensor::from_vec(&[images.len(), shape[0], shape[1], shape[2]], data))
}

/// Stack ground-truth masks into (N,1,H,W); errors if any image lacks one.
pub fn stack_masks(images: &[&LabeledImage]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Data("cannot stack an empty mask batch".into()));
    }
    let mut data = Vec::new();
    let mut shape = None;
    for img in images {
        let mask = img
            .gt_mask
            .as_ref()
            .ok_or_else(|| Error::Data("image has no ground-truth mask".into()))?;
        if let Some(s) = &shape {
            if mask.shape() != *s {
                return Err(Error::Shape("mask shape mismatch in batch".into()));
            }
        } else {
            shape = Some(mask.shape().to_vec());
        }
        data.extend_from_slice(mask.data());
    }
    let s = shape.unwrap();
    Ok(Tensor::from_vec(&[images.len(), s[0], s[1], s[2]], data))
}
