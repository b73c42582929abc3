//! Model, loss, and training configuration, plus validation and the flat
//! key-value configuration file format.
//!
//! The file format is deliberately flat: one `key = value` pair per line
//! (TOML scalar/array syntax), keys named exactly after the fields below.
//! Unknown keys are an error.

use crate::error::{ArnError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Shapes and sizes of the learnable components.
///
/// `image_shape` and `feature_map_shape` are `(height, width, channels)`.
/// Only square spatial grids are supported; the backbone reduces the image
/// to the feature map by repeated halving, and each latent encoder reduces
/// the feature map to `1x1` in exactly three convolution layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_shape: (usize, usize, usize),
    pub feature_map_shape: (usize, usize, usize),
    /// Length `d` of both the shared and the private latent vector.
    pub latent_dim: usize,
    /// Number of distinct source identities (classifier output width).
    pub num_classes: usize,
    /// Output channels of the three encoder convolution layers. The last
    /// entry must equal `latent_dim` so the flattened `1x1` map is the latent.
    pub encoder_channels: [usize; 3],
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_shape: (32, 32, 3),
            feature_map_shape: (4, 4, 64),
            latent_dim: 64,
            num_classes: 20,
            encoder_channels: [48, 48, 64],
            dropout_rate: 0.5,
        }
    }
}

/// Weights of the four-term training objective and the contrastive margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the contrastive term.
    pub alpha: f64,
    /// Weight of the reconstruction term.
    pub beta: f64,
    /// Weight of the orthogonality (difference) term.
    pub gamma: f64,
    /// Contrastive margin; embeddings are L2-normalized before the
    /// contrastive term, so 1.0 is a radius on the unit sphere.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 2.0,
            gamma: 1500.0,
            margin: 1.0,
        }
    }
}

/// Which loss terms and private components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_class: bool,
    pub use_ctrs: bool,
    pub use_private: bool,
    pub use_rec: bool,
    pub use_diff: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationVariant::Full.flags()
    }
}

impl AblationFlags {
    /// Whether the difference term can contribute: it needs private features.
    pub fn diff_active(&self) -> bool {
        self.use_diff && self.use_private
    }

    /// Whether the backbone may be fine-tuned at all. Without the source
    /// supervision terms there is no training signal meant for it, and it
    /// keeps its initial weights.
    pub fn backbone_tunable(&self) -> bool {
        self.use_class || self.use_ctrs
    }
}

/// The four studied model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// All terms and components active.
    Full,
    /// No private encoders (and therefore no difference term).
    NoPrivate,
    /// No source supervision (classification + contrastive off, backbone frozen).
    NoSupervised,
    /// Reconstruction only: no supervision, no private components.
    RecOnly,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::RecOnly,
        AblationVariant::NoSupervised,
        AblationVariant::NoPrivate,
        AblationVariant::Full,
    ];

    pub fn flags(self) -> AblationFlags {
        match self {
            AblationVariant::Full => AblationFlags {
                use_class: true,
                use_ctrs: true,
                use_private: true,
                use_rec: true,
                use_diff: true,
            },
            AblationVariant::NoPrivate => AblationFlags {
                use_class: true,
                use_ctrs: true,
                use_private: false,
                use_rec: true,
                use_diff: false,
            },
            AblationVariant::NoSupervised => AblationFlags {
                use_class: false,
                use_ctrs: false,
                use_private: true,
                use_rec: true,
                use_diff: true,
            },
            AblationVariant::RecOnly => AblationFlags {
                use_class: false,
                use_ctrs: false,
                use_private: false,
                use_rec: true,
                use_diff: false,
            },
        }
    }

    /// Row label used in the variant comparison table.
    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::RecOnly => "Ours w/o L_ctrs, L_class, E_S, E_T",
            AblationVariant::NoSupervised => "Ours w/o L_ctrs, L_class",
            AblationVariant::NoPrivate => "Ours w/o E_S, E_T",
            AblationVariant::Full => "Ours",
        }
    }

    /// Short machine name, as accepted by `--ablation`.
    pub fn key(self) -> &'static str {
        match self {
            AblationVariant::RecOnly => "rec_only",
            AblationVariant::NoSupervised => "no_supervised",
            AblationVariant::NoPrivate => "no_private",
            AblationVariant::Full => "full",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.key() == key)
    }
}

/// Optimization loop parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Total batch size; the source half is `identities_per_batch x
    /// images_per_identity`, the target half is uniform random.
    pub batch_size: usize,
    pub identities_per_batch: usize,
    pub images_per_identity: usize,
    pub lr_backbone: f64,
    pub lr_encoders: f64,
    pub lr_classifier: f64,
    /// Epochs during which the backbone is tuned; it is frozen afterwards
    /// unless `freeze_backbone_after_warmup` is false.
    pub backbone_warmup_epochs: usize,
    /// Keep updating the backbone at `lr_backbone` after warm-up instead of
    /// freezing it.
    pub freeze_backbone_after_warmup: bool,
    /// SGD momentum; 0 is plain SGD.
    pub momentum: f64,
    pub seed: i64,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            identities_per_batch: 4,
            images_per_identity: 2,
            lr_backbone: 1e-3,
            lr_encoders: 1e-3,
            lr_classifier: 2e-3,
            backbone_warmup_epochs: 5,
            freeze_backbone_after_warmup: true,
            momentum: 0.0,
            seed: 0,
            ablation: AblationFlags::default(),
        }
    }
}

fn check(violations: &mut Vec<String>, ok: bool, message: &str) {
    if !ok {
        violations.push(message.to_string());
    }
}

/// True iff `outer` reduces to `inner` by repeated exact halving.
fn halves_down_to(outer: usize, inner: usize) -> bool {
    let mut s = outer;
    while s > inner {
        if s % 2 != 0 {
            return false;
        }
        s /= 2;
    }
    s == inner
}

/// True iff a three-layer stride-2 plan reduces `size` to `1x1`.
fn encoder_reducible(size: usize) -> bool {
    crate::network::encoder_spatial_plan(size).is_some()
}

/// Validate every invariant of the three configuration types.
///
/// Returns one human-readable violation per broken rule, each naming the
/// offending field; an empty list means the configuration is trainable.
pub fn validate_config(
    model: &ModelConfig,
    train: &TrainConfig,
    weights: &LossWeights,
) -> Vec<String> {
    let mut v = Vec::new();
    let (ih, iw, ic) = model.image_shape;
    let (fh, fw, fc) = model.feature_map_shape;

    check(&mut v, ih > 0 && iw > 0 && ic > 0, "image_shape: all dimensions must be positive");
    check(&mut v, fh > 0 && fw > 0 && fc > 0, "feature_map_shape: all dimensions must be positive");
    check(&mut v, ih == iw, "image_shape: only square images are supported (H == W)");
    check(&mut v, fh == fw, "feature_map_shape: only square feature maps are supported (h == w)");
    if ih == iw && fh == fw && ih > 0 && fh > 0 {
        check(
            &mut v,
            ih >= fh && halves_down_to(ih, fh),
            "image_shape/feature_map_shape: H must reduce to h by repeated halving",
        );
        check(
            &mut v,
            encoder_reducible(fh),
            "feature_map_shape: h must reduce to 1 within three encoder layers",
        );
    }
    check(&mut v, model.latent_dim > 0, "latent_dim: must be positive");
    check(&mut v, model.num_classes > 0, "num_classes: must be positive");
    check(
        &mut v,
        model.encoder_channels.iter().all(|&c| c > 0),
        "encoder_channels: all entries must be positive",
    );
    check(
        &mut v,
        model.encoder_channels[2] == model.latent_dim,
        "encoder_channels: last entry must equal latent_dim (the flattened 1x1 map is the latent)",
    );
    check(
        &mut v,
        (0.0..1.0).contains(&model.dropout_rate),
        "dropout_rate: must lie in [0, 1)",
    );

    check(&mut v, weights.alpha >= 0.0 && weights.alpha.is_finite(), "alpha: must be a finite nonnegative real");
    check(&mut v, weights.beta >= 0.0 && weights.beta.is_finite(), "beta: must be a finite nonnegative real");
    check(&mut v, weights.gamma >= 0.0 && weights.gamma.is_finite(), "gamma: must be a finite nonnegative real");
    check(&mut v, weights.margin > 0.0 && weights.margin.is_finite(), "margin: must be positive");

    check(&mut v, train.epochs > 0, "epochs: must be positive");
    check(&mut v, train.batch_size > 0, "batch_size: must be positive");
    check(&mut v, train.batch_size % 2 == 0, "batch_size: must be even (half source, half target)");
    check(
        &mut v,
        train.identities_per_batch >= 2,
        "identities_per_batch: must be at least 2 (otherwise no negative pairs exist)",
    );
    check(
        &mut v,
        train.images_per_identity >= 2,
        "images_per_identity: must be at least 2 (otherwise no positive pairs exist)",
    );
    check(
        &mut v,
        train.identities_per_batch * train.images_per_identity == train.batch_size / 2,
        "identities_per_batch/images_per_identity: product must equal batch_size / 2",
    );
    check(&mut v, train.lr_backbone > 0.0, "lr_backbone: must be positive");
    check(&mut v, train.lr_encoders > 0.0, "lr_encoders: must be positive");
    check(&mut v, train.lr_classifier > 0.0, "lr_classifier: must be positive");
    check(&mut v, (0.0..1.0).contains(&train.momentum), "momentum: must lie in [0, 1)");
    check(
        &mut v,
        train.ablation.use_private || !train.ablation.use_diff,
        "use_diff: must be off when use_private is off (no private features to orthogonalize)",
    );
    v
}

/// Flat key-value configuration file.
///
/// Every key matches a field of [`ModelConfig`], [`TrainConfig`],
/// [`LossWeights`], or [`crate::data::SynthConfig`]; missing keys fall back
/// to defaults and unknown keys are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    // ModelConfig
    pub image_shape: Option<[usize; 3]>,
    pub feature_map_shape: Option<[usize; 3]>,
    pub latent_dim: Option<usize>,
    pub num_classes: Option<usize>,
    pub encoder_channels: Option<[usize; 3]>,
    pub dropout_rate: Option<f64>,
    // LossWeights
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub margin: Option<f64>,
    // TrainConfig
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub identities_per_batch: Option<usize>,
    pub images_per_identity: Option<usize>,
    pub lr_backbone: Option<f64>,
    pub lr_encoders: Option<f64>,
    pub lr_classifier: Option<f64>,
    pub backbone_warmup_epochs: Option<usize>,
    pub freeze_backbone_after_warmup: Option<bool>,
    pub momentum: Option<f64>,
    pub seed: Option<i64>,
    // AblationFlags (flattened)
    pub use_class: Option<bool>,
    pub use_ctrs: Option<bool>,
    pub use_private: Option<bool>,
    pub use_rec: Option<bool>,
    pub use_diff: Option<bool>,
    // SynthConfig
    pub num_source_ids: Option<usize>,
    pub num_target_ids: Option<usize>,
    pub images_per_id: Option<usize>,
    pub style_strength: Option<f64>,
    pub noise_std: Option<f64>,
    // Dataset selection
    /// `"synthetic"` (default) or `"directory"`.
    pub dataset_kind: Option<String>,
    /// Root holding `train_source/`, `train_target/`, `query/`, `gallery/`
    /// when `dataset_kind = "directory"`.
    pub dataset_dir: Option<String>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ArnError::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ArnError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn tuple(v: Option<[usize; 3]>, default: (usize, usize, usize)) -> (usize, usize, usize) {
        v.map(|a| (a[0], a[1], a[2])).unwrap_or(default)
    }

    pub fn model_config(&self) -> ModelConfig {
        let d = ModelConfig::default();
        let latent_dim = self.latent_dim.unwrap_or(d.latent_dim);
        // Keep the flatten contract intact when only latent_dim is given.
        let mut encoder_channels = self.encoder_channels.unwrap_or(d.encoder_channels);
        if self.encoder_channels.is_none() {
            encoder_channels[2] = latent_dim;
        }
        ModelConfig {
            image_shape: Self::tuple(self.image_shape, d.image_shape),
            feature_map_shape: Self::tuple(self.feature_map_shape, d.feature_map_shape),
            latent_dim,
            num_classes: self.num_classes.unwrap_or(d.num_classes),
            encoder_channels,
            dropout_rate: self.dropout_rate.unwrap_or(d.dropout_rate),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        let d = LossWeights::default();
        LossWeights {
            alpha: self.alpha.unwrap_or(d.alpha),
            beta: self.beta.unwrap_or(d.beta),
            gamma: self.gamma.unwrap_or(d.gamma),
            margin: self.margin.unwrap_or(d.margin),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        let df = d.ablation;
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            identities_per_batch: self.identities_per_batch.unwrap_or(d.identities_per_batch),
            images_per_identity: self.images_per_identity.unwrap_or(d.images_per_identity),
            lr_backbone: self.lr_backbone.unwrap_or(d.lr_backbone),
            lr_encoders: self.lr_encoders.unwrap_or(d.lr_encoders),
            lr_classifier: self.lr_classifier.unwrap_or(d.lr_classifier),
            backbone_warmup_epochs: self
                .backbone_warmup_epochs
                .unwrap_or(d.backbone_warmup_epochs),
            freeze_backbone_after_warmup: self
                .freeze_backbone_after_warmup
                .unwrap_or(d.freeze_backbone_after_warmup),
            momentum: self.momentum.unwrap_or(d.momentum),
            seed: self.seed.unwrap_or(d.seed),
            ablation: AblationFlags {
                use_class: self.use_class.unwrap_or(df.use_class),
                use_ctrs: self.use_ctrs.unwrap_or(df.use_ctrs),
                use_private: self.use_private.unwrap_or(df.use_private),
                use_rec: self.use_rec.unwrap_or(df.use_rec),
                use_diff: self.use_diff.unwrap_or(df.use_diff),
            },
        }
    }
}
