//! Labeled samples and dataset splits.
//!
//! Images are stored channel-first as `[C, H, W]` grids of `f64` in `[0, 1]`.
//! Target-domain samples carry identity and camera tags for evaluation only;
//! the trainer works through label-masked copies so that any attempt to read
//! a target identity during training panics.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Pixel grid, `[channels, height, width]`, values in `[0, 1]`.
pub type Image = Array3<f64>;

/// Which dataset a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    /// Labeled auxiliary dataset.
    Source,
    /// Unlabeled dataset of interest.
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

/// One image with identity, camera, and domain tags.
///
/// The identity is kept private so label access always goes through
/// [`LabeledSample::identity`], which panics when the label has been masked
/// by [`LabeledSample::strip_label`].
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub image: Image,
    identity: Option<u32>,
    pub camera: u32,
    pub domain: Domain,
}

impl LabeledSample {
    pub fn new(image: Image, identity: u32, camera: u32, domain: Domain) -> Self {
        Self {
            image,
            identity: Some(identity),
            camera,
            domain,
        }
    }

    /// Identity label.
    ///
    /// Panics if the label has been stripped; the trainer sees only stripped
    /// target samples, so this panic is the guard that training never reads
    /// target identities.
    pub fn identity(&self) -> u32 {
        self.identity
            .expect("identity label is masked: target labels are not readable during training")
    }

    pub fn is_labeled(&self) -> bool {
        self.identity.is_some()
    }

    /// Copy of the sample with the identity label replaced by a sentinel.
    pub fn strip_label(&self) -> LabeledSample {
        LabeledSample {
            image: self.image.clone(),
            identity: None,
            camera: self.camera,
            domain: self.domain,
        }
    }

    /// `(height, width, channels)` of the stored image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.image.shape();
        (s[1], s[2], s[0])
    }
}

/// Train/evaluation partition of a cross-domain identity dataset.
///
/// `query` and `gallery` are target-domain only.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train_source: Vec<LabeledSample>,
    pub train_target: Vec<LabeledSample>,
    pub query: Vec<LabeledSample>,
    pub gallery: Vec<LabeledSample>,
}

impl DatasetSplit {
    /// Label-stripped view of the target training set.
    ///
    /// This is the only form in which the trainer receives target data.
    pub fn masked_train_target(&self) -> Vec<LabeledSample> {
        self.train_target.iter().map(|s| s.strip_label()).collect()
    }

    /// Distinct source identities, sorted.
    pub fn source_identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.train_source.iter().map(|s| s.identity()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}
