//! The six learnable components: backbone `E_I`, shared encoder `E_C`,
//! private encoders `E_S`/`E_T`, decoder `D_C`, and classifier `C_S`.
//!
//! The backbone reduces the image to the feature map by repeated stride-2
//! convolutions plus one stride-1 stage. Each latent encoder is a
//! three-layer fully-convolutional stack that shrinks the feature map to
//! `1x1` and flattens it into the latent vector. The decoder mirrors the
//! encoder: the concatenated `(shared, private)` latent is reshaped to a
//! `1x1` map and upsampled back to the feature-map geometry. All hidden
//! nonlinearities are tanh (smooth, so gradient checks are clean) and
//! initialization is Xavier-uniform from per-component named streams.

use crate::config::{AblationFlags, ModelConfig};
use crate::error::{ArnError, Result};
use crate::nn::{
    dropout_mask, softmax_backward, softmax_rows, Activation, Conv2d, ConvBlock, ConvNet, Dense,
    DenseCache, NetCache, Param,
};
use crate::rng::derive_stream;
use crate::samples::Domain;
use ndarray::{s, Array2, Array4, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

/// The six parameter owners, named after their role in the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Backbone,
    SharedEncoder,
    SourceEncoder,
    TargetEncoder,
    Decoder,
    Classifier,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Backbone,
        Component::SharedEncoder,
        Component::SourceEncoder,
        Component::TargetEncoder,
        Component::Decoder,
        Component::Classifier,
    ];

    /// Short architectural label, also the checkpoint key.
    pub fn label(self) -> &'static str {
        match self {
            Component::Backbone => "E_I",
            Component::SharedEncoder => "E_C",
            Component::SourceEncoder => "E_S",
            Component::TargetEncoder => "E_T",
            Component::Decoder => "D_C",
            Component::Classifier => "C_S",
        }
    }
}

/// Snapshot of one component's trainable arrays.
#[derive(Debug, Clone)]
pub struct ParameterGroup {
    pub component: Component,
    pub parameters: Vec<ArrayD<f64>>,
}

impl ParameterGroup {
    pub fn parameter_count(&self) -> usize {
        self.parameters.iter().map(|p| p.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Geometry planning
// ---------------------------------------------------------------------------

/// One encoder convolution: `(kernel, stride, padding, output size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_size: usize,
}

/// Three-layer plan shrinking a square `size` grid to `1x1`, or `None` when
/// no such plan exists. Even sizes halve with a padded stride-2 kernel, odd
/// sizes use an unpadded one, and `1x1` maps pass through a `1x1` kernel.
pub fn encoder_spatial_plan(size: usize) -> Option<[LayerSpec; 3]> {
    let mut s = size;
    let mut plan = [LayerSpec {
        kernel: 1,
        stride: 1,
        padding: 0,
        out_size: 1,
    }; 3];
    for slot in plan.iter_mut() {
        *slot = if s == 1 {
            LayerSpec {
                kernel: 1,
                stride: 1,
                padding: 0,
                out_size: 1,
            }
        } else if s % 2 == 0 {
            LayerSpec {
                kernel: 3,
                stride: 2,
                padding: 1,
                out_size: s / 2,
            }
        } else {
            LayerSpec {
                kernel: 3,
                stride: 2,
                padding: 0,
                out_size: (s - 1) / 2,
            }
        };
        s = slot.out_size;
    }
    (s == 1).then_some(plan)
}

fn backbone_stage_channels(stages: usize, out_channels: usize) -> Vec<usize> {
    (1..=stages)
        .map(|i| (16usize << (i - 1)).min(out_channels))
        .collect()
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

/// Dropout on the shared feature followed by a fully connected layer and a
/// softmax over source identities.
#[derive(Debug, Clone)]
struct Classifier {
    dense: Dense,
    dropout_rate: f64,
}

/// Cache of a train-mode classifier pass.
pub struct ClassifierCache {
    mask: Array2<f64>,
    dense: DenseCache,
    probs: Array2<f64>,
}

impl Classifier {
    fn forward(
        &self,
        shared: &Array2<f64>,
        training: bool,
        rng: Option<&mut ChaCha12Rng>,
    ) -> (Array2<f64>, ClassifierCache) {
        let mask = if training && self.dropout_rate > 0.0 {
            let rng = rng.expect("training-mode classify needs a dropout stream");
            dropout_mask(shared.nrows(), shared.ncols(), self.dropout_rate, rng)
        } else {
            Array2::ones((shared.nrows(), shared.ncols()))
        };
        let dropped = shared * &mask;
        let (logits, dense) = self.dense.forward(&dropped);
        let probs = softmax_rows(&logits);
        (probs.clone(), ClassifierCache { mask, dense, probs })
    }

    fn backward(&mut self, cache: &ClassifierCache, gprobs: &Array2<f64>) -> Array2<f64> {
        let glogits = softmax_backward(&cache.probs, gprobs);
        let gdropped = self.dense.backward(&cache.dense, &glogits);
        gdropped * &cache.mask
    }
}

// ---------------------------------------------------------------------------
// Operation counters
// ---------------------------------------------------------------------------

/// Forward-call counters per component, for tests that assert which parts of
/// the network an operation touches.
#[derive(Debug, Default)]
pub struct OpCounters {
    counts: [AtomicU64; 6],
}

impl Clone for OpCounters {
    fn clone(&self) -> Self {
        let snapshot = OpCounters::default();
        for (dst, src) in snapshot.counts.iter().zip(self.counts.iter()) {
            dst.store(src.load(Ordering::Relaxed), Ordering::Relaxed);
        }
        snapshot
    }
}

impl OpCounters {
    fn bump(&self, component: Component) {
        let idx = Component::ALL.iter().position(|c| *c == component).unwrap();
        self.counts[idx].fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> [(Component, u64); 6] {
        let mut out = [(Component::Backbone, 0); 6];
        for (i, c) in Component::ALL.into_iter().enumerate() {
            out[i] = (c, self.counts[i].load(Ordering::Relaxed));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

/// The full network. Private encoders are absent under the `use_private =
/// false` ablation; their latent slots read as zeros so the decoder geometry
/// never changes.
#[derive(Debug, Clone)]
pub struct ArnModel {
    config: ModelConfig,
    flags: AblationFlags,
    backbone: ConvNet,
    shared_encoder: ConvNet,
    source_encoder: Option<ConvNet>,
    target_encoder: Option<ConvNet>,
    decoder: ConvNet,
    classifier: Classifier,
    counters: OpCounters,
}

/// Train-mode forward pass of one domain's half batch.
pub struct DomainPass {
    pub feature_maps: Array4<f64>,
    pub shared: Array2<f64>,
    /// Zeros when private encoders are ablated.
    pub private: Array2<f64>,
    pub reconstruction: Array4<f64>,
    domain: Domain,
    backbone_cache: NetCache,
    shared_cache: NetCache,
    private_cache: Option<NetCache>,
    decoder_cache: NetCache,
}

/// Gradients flowing into one domain's pass, in the same spaces as the
/// corresponding [`DomainPass`] outputs. Zero arrays mean "no contribution".
pub struct DomainGrads {
    pub shared: Array2<f64>,
    pub private: Array2<f64>,
    pub reconstruction: Array4<f64>,
    /// Direct gradient on the feature maps (the reconstruction target side).
    pub feature_maps: Array4<f64>,
}

impl ArnModel {
    pub fn new(config: &ModelConfig, flags: AblationFlags, seed: i64) -> Result<Self> {
        let (ih, iw, ic) = config.image_shape;
        let (fh, fw, fc) = config.feature_map_shape;
        if ih != iw || fh != fw {
            return Err(ArnError::Config(
                "only square image and feature-map grids are supported".into(),
            ));
        }

        // Backbone: stride-2 stages halving the grid, then one stride-1 stage.
        let mut stages = 0usize;
        let mut s = ih;
        while s > fh {
            if s % 2 != 0 {
                return Err(ArnError::Config(format!(
                    "image size {ih} does not reduce to feature size {fh} by halving"
                )));
            }
            s /= 2;
            stages += 1;
        }
        let mut rng = derive_stream(seed, "init/E_I");
        let mut blocks = Vec::new();
        let mut in_ch = ic;
        for out_ch in backbone_stage_channels(stages, fc) {
            blocks.push(ConvBlock {
                resize_to: None,
                conv: Conv2d::new(in_ch, out_ch, 3, 2, 1, &mut rng),
                act: Activation::Tanh,
            });
            in_ch = out_ch;
        }
        blocks.push(ConvBlock {
            resize_to: None,
            conv: Conv2d::new(in_ch, fc, 3, 1, 1, &mut rng),
            act: Activation::Tanh,
        });
        let backbone = ConvNet { blocks };

        let plan = encoder_spatial_plan(fh).ok_or_else(|| {
            ArnError::Config(format!(
                "feature map size {fh} does not reduce to 1x1 in three encoder layers"
            ))
        })?;
        let build_encoder = |label: &str| -> ConvNet {
            let mut rng = derive_stream(seed, label);
            let mut blocks = Vec::new();
            let mut in_ch = fc;
            for (spec, &out_ch) in plan.iter().zip(config.encoder_channels.iter()) {
                blocks.push(ConvBlock {
                    resize_to: None,
                    conv: Conv2d::new(
                        in_ch,
                        out_ch,
                        spec.kernel,
                        spec.stride,
                        spec.padding,
                        &mut rng,
                    ),
                    act: Activation::Tanh,
                });
                in_ch = out_ch;
            }
            ConvNet { blocks }
        };
        let shared_encoder = build_encoder("init/E_C");
        let (source_encoder, target_encoder) = if flags.use_private {
            (
                Some(build_encoder("init/E_S")),
                Some(build_encoder("init/E_T")),
            )
        } else {
            (None, None)
        };

        // Decoder: latent reshaped to 1x1, upsampled back through the
        // encoder sizes in reverse.
        let mut rng = derive_stream(seed, "init/D_C");
        let sizes = [plan[1].out_size, plan[0].out_size, fh];
        let channels = [config.encoder_channels[1], config.encoder_channels[0], fc];
        let mut blocks = Vec::new();
        let mut in_ch = 2 * config.latent_dim;
        let mut cur = 1usize;
        for (&target, &out_ch) in sizes.iter().zip(channels.iter()) {
            blocks.push(ConvBlock {
                resize_to: (target != cur).then_some((target, target)),
                conv: Conv2d::new(in_ch, out_ch, 3, 1, 1, &mut rng),
                act: Activation::Tanh,
            });
            in_ch = out_ch;
            cur = target;
        }
        let decoder = ConvNet { blocks };

        let mut rng = derive_stream(seed, "init/C_S");
        let classifier = Classifier {
            dense: Dense::new(config.latent_dim, config.num_classes, &mut rng),
            dropout_rate: config.dropout_rate,
        };

        Ok(Self {
            config: config.clone(),
            flags,
            backbone,
            shared_encoder,
            source_encoder,
            target_encoder,
            decoder,
            classifier,
            counters: OpCounters::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn flags(&self) -> AblationFlags {
        self.flags
    }

    pub fn op_counts(&self) -> [(Component, u64); 6] {
        self.counters.snapshot()
    }

    fn check_image_batch(&self, images: &Array4<f64>) -> Result<()> {
        let (n, c, h, w) = images.dim();
        let (ih, iw, ic) = self.config.image_shape;
        if n == 0 {
            return Err(ArnError::Usage("empty image batch".into()));
        }
        if (c, h, w) != (ic, ih, iw) {
            return Err(ArnError::Shape(format!(
                "image batch is {c}x{h}x{w} per sample, config wants {ic}x{ih}x{iw}"
            )));
        }
        Ok(())
    }

    fn check_map_batch(&self, maps: &Array4<f64>) -> Result<()> {
        let (n, c, h, w) = maps.dim();
        let (fh, fw, fc) = self.config.feature_map_shape;
        if n == 0 {
            return Err(ArnError::Usage("empty feature-map batch".into()));
        }
        if (c, h, w) != (fc, fh, fw) {
            return Err(ArnError::Shape(format!(
                "feature-map batch is {c}x{h}x{w} per sample, config wants {fc}x{fh}x{fw}"
            )));
        }
        Ok(())
    }

    /// `E_I`: images to feature maps.
    pub fn extract_feature_map(&self, images: &Array4<f64>) -> Result<Array4<f64>> {
        self.check_image_batch(images)?;
        self.counters.bump(Component::Backbone);
        Ok(self.backbone.infer(images))
    }

    /// `E_C`: feature maps to shared latents; the same weights serve both
    /// domains.
    pub fn encode_shared(&self, maps: &Array4<f64>) -> Result<Array2<f64>> {
        self.check_map_batch(maps)?;
        self.counters.bump(Component::SharedEncoder);
        let out = self.shared_encoder.infer(maps);
        Ok(flatten_latent(&out))
    }

    /// `E_S`/`E_T`: feature maps to private latents, routed by domain. Under
    /// the no-private ablation this returns zeros of the latent width.
    pub fn encode_private(&self, maps: &Array4<f64>, domain: Domain) -> Result<Array2<f64>> {
        self.check_map_batch(maps)?;
        let encoder = match domain {
            Domain::Source => {
                self.counters.bump(Component::SourceEncoder);
                &self.source_encoder
            }
            Domain::Target => {
                self.counters.bump(Component::TargetEncoder);
                &self.target_encoder
            }
        };
        match encoder {
            Some(net) => Ok(flatten_latent(&net.infer(maps))),
            None => Ok(Array2::zeros((maps.dim().0, self.config.latent_dim))),
        }
    }

    /// `D_C`: concatenated `(shared, private)` latents back to feature maps.
    /// One decoder serves both domains.
    pub fn decode(&self, shared: &Array2<f64>, private: &Array2<f64>) -> Result<Array4<f64>> {
        let d = self.config.latent_dim;
        if shared.ncols() != d || private.ncols() != d || shared.nrows() != private.nrows() {
            return Err(ArnError::Shape(format!(
                "decode wants two [n, {d}] latent halves, got [{}, {}] and [{}, {}]",
                shared.nrows(),
                shared.ncols(),
                private.nrows(),
                private.ncols()
            )));
        }
        self.counters.bump(Component::Decoder);
        let latent = concat_latent(shared, private);
        Ok(self.decoder.infer(&latent))
    }

    /// `C_S` in inference mode: dropout off, deterministic.
    pub fn classify_infer(&self, shared: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_latent(shared)?;
        self.counters.bump(Component::Classifier);
        Ok(self.classifier.forward(shared, false, None).0)
    }

    /// `C_S` in training mode: dropout active, source features only.
    pub fn classify_train(
        &self,
        shared: &Array2<f64>,
        domain: Domain,
        rng: &mut ChaCha12Rng,
    ) -> Result<(Array2<f64>, ClassifierCache)> {
        if domain == Domain::Target {
            return Err(ArnError::Usage(
                "the classifier is supervised by source identities; \
                 training it on target features is not allowed"
                    .into(),
            ));
        }
        self.check_latent(shared)?;
        self.counters.bump(Component::Classifier);
        Ok(self.classifier.forward(shared, true, Some(rng)))
    }

    /// Gradient of the training classifier pass with respect to its input.
    pub fn classifier_backward(
        &mut self,
        cache: &ClassifierCache,
        gprobs: &Array2<f64>,
    ) -> Array2<f64> {
        self.classifier.backward(cache, gprobs)
    }

    fn check_latent(&self, latent: &Array2<f64>) -> Result<()> {
        if latent.ncols() != self.config.latent_dim {
            return Err(ArnError::Shape(format!(
                "latent width {} does not match latent_dim {}",
                latent.ncols(),
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    /// Full train-mode pass for one domain's half batch: backbone, shared
    /// and private encoders, and the decoder, with caches for backward.
    pub fn forward_domain(&self, images: &Array4<f64>, domain: Domain) -> Result<DomainPass> {
        self.check_image_batch(images)?;
        let (feature_maps, backbone_cache) = self.backbone.forward(images);
        let (shared_raw, shared_cache) = self.shared_encoder.forward(&feature_maps);
        let shared = flatten_latent(&shared_raw);
        let encoder = match domain {
            Domain::Source => &self.source_encoder,
            Domain::Target => &self.target_encoder,
        };
        let (private, private_cache) = match encoder {
            Some(net) => {
                let (out, cache) = net.forward(&feature_maps);
                (flatten_latent(&out), Some(cache))
            }
            None => (
                Array2::zeros((images.dim().0, self.config.latent_dim)),
                None,
            ),
        };
        let latent = concat_latent(&shared, &private);
        let (reconstruction, decoder_cache) = self.decoder.forward(&latent);
        Ok(DomainPass {
            feature_maps,
            shared,
            private,
            reconstruction,
            domain,
            backbone_cache,
            shared_cache,
            private_cache,
            decoder_cache,
        })
    }

    /// Backward through one domain's pass, accumulating parameter gradients.
    /// The backbone is skipped when `train_backbone` is false (its
    /// parameters receive no gradient and no input gradient is needed).
    pub fn backward_domain(
        &mut self,
        pass: &DomainPass,
        grads: &DomainGrads,
        train_backbone: bool,
    ) {
        let n = pass.shared.nrows();
        let d = self.config.latent_dim;

        // Decoder pulls gradient back onto both latent halves.
        let g_latent = self
            .decoder
            .backward(&pass.decoder_cache, &grads.reconstruction);
        let g_latent = flatten_latent_wide(&g_latent); // [n, 2d]
        let g_shared_total = &grads.shared + &g_latent.slice(s![.., ..d]);
        let g_private_total = &grads.private + &g_latent.slice(s![.., d..]);

        // Shared encoder.
        let g_shared_maps = self
            .shared_encoder
            .backward(&pass.shared_cache, &unflatten_latent(&g_shared_total, n, d));

        // Private encoder of this pass's domain, if present.
        let g_private_maps = match (&pass.private_cache, pass.domain) {
            (Some(cache), Domain::Source) => Some(
                self.source_encoder
                    .as_mut()
                    .expect("cache implies encoder")
                    .backward(cache, &unflatten_latent(&g_private_total, n, d)),
            ),
            (Some(cache), Domain::Target) => Some(
                self.target_encoder
                    .as_mut()
                    .expect("cache implies encoder")
                    .backward(cache, &unflatten_latent(&g_private_total, n, d)),
            ),
            (None, _) => None,
        };

        if train_backbone {
            let mut g_maps = &g_shared_maps + &grads.feature_maps;
            if let Some(gp) = g_private_maps {
                g_maps += &gp;
            }
            self.backbone.backward(&pass.backbone_cache, &g_maps);
        }
    }

    fn nets(&self) -> [(Component, Option<&ConvNet>); 5] {
        [
            (Component::Backbone, Some(&self.backbone)),
            (Component::SharedEncoder, Some(&self.shared_encoder)),
            (Component::SourceEncoder, self.source_encoder.as_ref()),
            (Component::TargetEncoder, self.target_encoder.as_ref()),
            (Component::Decoder, Some(&self.decoder)),
        ]
    }

    /// Visit every trainable parameter with its owning component.
    pub fn visit_params_mut(&mut self, mut visit: impl FnMut(Component, &mut Param)) {
        let nets: [(Component, Option<&mut ConvNet>); 5] = [
            (Component::Backbone, Some(&mut self.backbone)),
            (Component::SharedEncoder, Some(&mut self.shared_encoder)),
            (Component::SourceEncoder, self.source_encoder.as_mut()),
            (Component::TargetEncoder, self.target_encoder.as_mut()),
            (Component::Decoder, Some(&mut self.decoder)),
        ];
        for (component, net) in nets {
            if let Some(net) = net {
                for p in net.params_mut() {
                    visit(component, p);
                }
            }
        }
        visit(Component::Classifier, &mut self.classifier.dense.weight);
        visit(Component::Classifier, &mut self.classifier.dense.bias);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(|_, p| p.zero_grad());
    }

    /// One SGD update with per-component learning rates. A rate of exactly 0
    /// leaves the component untouched (including its momentum state).
    pub fn sgd_step(&mut self, rate_for: impl Fn(Component) -> f64, momentum: f64) {
        self.visit_params_mut(|component, p| {
            let lr = rate_for(component);
            if lr != 0.0 {
                p.sgd_step(lr, momentum);
            }
        });
    }

    /// Exactly six groups, one per component; the union covers every
    /// trainable parameter and the groups are pairwise disjoint. Ablated
    /// private encoders yield empty groups.
    pub fn parameter_groups(&self) -> Vec<ParameterGroup> {
        let mut groups: Vec<ParameterGroup> = self
            .nets()
            .into_iter()
            .map(|(component, net)| ParameterGroup {
                component,
                parameters: net
                    .map(|n| n.params().into_iter().map(|p| p.value.clone()).collect())
                    .unwrap_or_default(),
            })
            .collect();
        groups.push(ParameterGroup {
            component: Component::Classifier,
            parameters: vec![
                self.classifier.dense.weight.value.clone(),
                self.classifier.dense.bias.value.clone(),
            ],
        });
        groups
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_groups()
            .iter()
            .map(|g| g.parameter_count())
            .sum()
    }

    // -- Checkpointing ------------------------------------------------------

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut components = Vec::new();
        for group in self.parameter_groups() {
            let arrays = group
                .parameters
                .iter()
                .map(|p| CheckpointArray {
                    shape: p.shape().to_vec(),
                    data: p.iter().cloned().collect(),
                })
                .collect();
            components.push(CheckpointComponent {
                component: group.component.label().to_string(),
                arrays,
            });
        }
        Checkpoint {
            config: self.config.clone(),
            flags: self.flags,
            components,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = ArnModel::new(&ckpt.config, ckpt.flags, 0)?;
        let stored: std::collections::BTreeMap<&str, &CheckpointComponent> = ckpt
            .components
            .iter()
            .map(|c| (c.component.as_str(), c))
            .collect();
        let mut error: Option<ArnError> = None;
        let mut cursors: std::collections::BTreeMap<&'static str, usize> = Default::default();
        model.visit_params_mut(|component, param| {
            if error.is_some() {
                return;
            }
            let label = component.label();
            let Some(stored_component) = stored.get(label) else {
                error = Some(ArnError::Data(format!(
                    "checkpoint is missing component {label}"
                )));
                return;
            };
            let idx = cursors.entry(label).or_insert(0);
            let Some(array) = stored_component.arrays.get(*idx) else {
                error = Some(ArnError::Data(format!(
                    "checkpoint component {label} has too few arrays"
                )));
                return;
            };
            if array.shape != param.value.shape() {
                error = Some(ArnError::Shape(format!(
                    "checkpoint {label}[{idx}] has shape {:?}, model wants {:?}",
                    array.shape,
                    param.value.shape()
                )));
                return;
            }
            param.value = ArrayD::from_shape_vec(IxDyn(&array.shape), array.data.clone())
                .expect("length checked via shape");
            *idx += 1;
        });
        if let Some(err) = error {
            return Err(err);
        }
        // Every stored array must have been consumed.
        for (label, component) in stored.iter() {
            let used = cursors.get(label).copied().unwrap_or(0);
            if used != component.arrays.len() {
                return Err(ArnError::Data(format!(
                    "checkpoint component {label} has {} arrays, model consumed {used}",
                    component.arrays.len()
                )));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Serialized model: per-component parameter arrays keyed by component name
/// plus the configuration that shaped them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub flags: AblationFlags,
    pub components: Vec<CheckpointComponent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointComponent {
    pub component: String,
    pub arrays: Vec<CheckpointArray>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// `[n, d, 1, 1]` to `[n, d]`.
fn flatten_latent(out: &Array4<f64>) -> Array2<f64> {
    let (n, d, h, w) = out.dim();
    debug_assert_eq!((h, w), (1, 1), "latent maps must be 1x1");
    out.view()
        .into_shape_with_order((n, d))
        .expect("1x1 map flattens to a row")
        .to_owned()
}

/// Same as [`flatten_latent`] but for the `2d`-wide decoder input gradient.
fn flatten_latent_wide(out: &Array4<f64>) -> Array2<f64> {
    flatten_latent(out)
}

fn unflatten_latent(latent: &Array2<f64>, n: usize, d: usize) -> Array4<f64> {
    latent
        .view()
        .into_shape_with_order((n, d, 1, 1))
        .expect("row unflattens to a 1x1 map")
        .to_owned()
}

/// `[n, d] + [n, d]` to the decoder input `[n, 2d, 1, 1]`.
fn concat_latent(shared: &Array2<f64>, private: &Array2<f64>) -> Array4<f64> {
    let stacked = ndarray::concatenate(Axis(1), &[shared.view(), private.view()])
        .expect("matching row counts");
    let (n, dd) = stacked.dim();
    stacked
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((n, dd, 1, 1))
        .expect("contiguous after concatenate")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AblationVariant;
    use crate::rng::derive_stream;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            image_shape: (8, 8, 2),
            feature_map_shape: (2, 2, 6),
            latent_dim: 5,
            num_classes: 4,
            encoder_channels: [6, 6, 5],
            dropout_rate: 0.5,
        }
    }

    fn random_images(n: usize, config: &ModelConfig, seed: i64) -> Array4<f64> {
        let (h, w, c) = config.image_shape;
        let mut rng = derive_stream(seed, "images");
        Array4::from_shape_fn((n, c, h, w), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn feature_map_and_latent_shapes() {
        let config = ModelConfig::default();
        let model = ArnModel::new(&config, AblationFlags::default(), 1).unwrap();
        let images = random_images(8, &config, 0);
        let maps = model.extract_feature_map(&images).unwrap();
        assert_eq!(maps.dim(), (8, 64, 4, 4));
        let shared = model.encode_shared(&maps).unwrap();
        assert_eq!(shared.dim(), (8, 64));
        let private = model.encode_private(&maps, Domain::Source).unwrap();
        assert_eq!(private.dim(), (8, 64));
        let recon = model.decode(&shared, &private).unwrap();
        assert_eq!(recon.dim(), maps.dim());
    }

    #[test]
    fn batch_of_one_works() {
        let config = small_config();
        let model = ArnModel::new(&config, AblationFlags::default(), 1).unwrap();
        let images = random_images(1, &config, 0);
        let maps = model.extract_feature_map(&images).unwrap();
        assert_eq!(maps.dim().0, 1);
    }

    #[test]
    fn backbone_is_deterministic_at_inference() {
        let config = small_config();
        let model = ArnModel::new(&config, AblationFlags::default(), 1).unwrap();
        let one = random_images(1, &config, 0);
        let mut two = Array4::zeros((2, 2, 8, 8));
        two.slice_mut(s![0, .., .., ..])
            .assign(&one.slice(s![0, .., .., ..]));
        two.slice_mut(s![1, .., .., ..])
            .assign(&one.slice(s![0, .., .., ..]));
        let maps = model.extract_feature_map(&two).unwrap();
        let a = maps.slice(s![0, .., .., ..]);
        let b = maps.slice(s![1, .., .., ..]);
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_a_configuration_error() {
        let config = small_config();
        let model = ArnModel::new(&config, AblationFlags::default(), 1).unwrap();
        let wrong = Array4::<f64>::zeros((2, 2, 9, 9));
        assert!(matches!(
            model.extract_feature_map(&wrong),
            Err(ArnError::Shape(_))
        ));
    }

    #[test]
    fn shared_encoder_ignores_domain() {
        // Same weights serve both domains: identical maps give identical
        // latents no matter which domain produced them.
        let config = small_config();
        let model = ArnModel::new(&config, AblationFlags::default(), 1).unwrap();
        let images = random_images(3, &config, 2);
        let maps = model.extract_feature_map(&images).unwrap();
        let a = model.encode_shared(&maps).unwrap();
        let b = model.encode_shared(&maps).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn private_encoders_differ_between_domains() {
        let config = small_config();
        let model = ArnModel::new(&config, AblationFlags::default(), 1).unwrap();
        let images = random_images(3, &config, 3);
        let maps = model.extract_feature_map(&images).unwrap();
        let source = model.encode_private(&maps, Domain::Source).unwrap();
        let target = model.encode_private(&maps, Domain::Target).unwrap();
        assert_ne!(source, target);
    }

    #[test]
    fn zero_maps_with_zero_bias_give_zero_latents() {
        let config = small_config();
        let model = ArnModel::new(&config, AblationFlags::default(), 1).unwrap();
        let zeros = Array4::zeros((2, 6, 2, 2));
        let shared = model.encode_shared(&zeros).unwrap();
        assert!(shared.iter().all(|&v| v == 0.0));
        // And a zero latent pair decodes to a zero map.
        let z = Array2::zeros((2, 5));
        let recon = model.decode(&z, &z).unwrap();
        assert!(recon.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ablated_private_encoder_returns_zeros() {
        let config = small_config();
        let model = ArnModel::new(&config, AblationVariant::NoPrivate.flags(), 1).unwrap();
        let images = random_images(2, &config, 4);
        let maps = model.extract_feature_map(&images).unwrap();
        let private = model.encode_private(&maps, Domain::Target).unwrap();
        assert_eq!(private.dim(), (2, 5));
        assert!(private.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classifier_rows_sum_to_one_and_dropout_rules() {
        let config = small_config();
        let model = ArnModel::new(&config, AblationFlags::default(), 1).unwrap();
        let shared = Array2::from_shape_fn((6, 5), |(i, j)| (i as f64 - j as f64) / 7.0);
        let probs = model.classify_infer(&shared).unwrap();
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        // Inference is deterministic.
        assert_eq!(probs, model.classify_infer(&shared).unwrap());
        // Training on target features is a usage error.
        let mut rng = derive_stream(0, "drop");
        assert!(matches!(
            model.classify_train(&shared, Domain::Target, &mut rng),
            Err(ArnError::Usage(_))
        ));
        // dropout_rate = 0 makes training mode match inference mode.
        let mut no_drop_config = small_config();
        no_drop_config.dropout_rate = 0.0;
        let model = ArnModel::new(&no_drop_config, AblationFlags::default(), 1).unwrap();
        let (train_probs, _) = model
            .classify_train(&shared, Domain::Source, &mut rng)
            .unwrap();
        assert_eq!(train_probs, model.classify_infer(&shared).unwrap());
    }

    #[test]
    fn six_groups_partition_all_parameters() {
        let config = small_config();
        let model = ArnModel::new(&config, AblationFlags::default(), 1).unwrap();
        let groups = model.parameter_groups();
        assert_eq!(groups.len(), 6);
        let total: usize = groups.iter().map(|g| g.parameter_count()).sum();
        assert_eq!(total, model.parameter_count());
        assert!(groups.iter().all(|g| g.parameter_count() > 0));
        // Visiting parameters reaches the same total exactly once each.
        let mut model = model;
        let mut visited = 0usize;
        model.visit_params_mut(|_, p| visited += p.len());
        assert_eq!(visited, total);
    }

    #[test]
    fn no_private_ablation_empties_those_groups() {
        let config = small_config();
        let model = ArnModel::new(&config, AblationVariant::NoPrivate.flags(), 1).unwrap();
        for group in model.parameter_groups() {
            let expect_empty = matches!(
                group.component,
                Component::SourceEncoder | Component::TargetEncoder
            );
            assert_eq!(group.parameter_count() == 0, expect_empty);
        }
    }

    #[test]
    fn routing_is_exclusive_between_private_encoders() {
        // A source-only backward pass must leave E_T untouched.
        let config = small_config();
        let mut model = ArnModel::new(&config, AblationFlags::default(), 1).unwrap();
        let before: Vec<ArrayD<f64>> = model
            .parameter_groups()
            .into_iter()
            .find(|g| g.component == Component::TargetEncoder)
            .unwrap()
            .parameters;
        let images = random_images(3, &config, 5);
        let pass = model.forward_domain(&images, Domain::Source).unwrap();
        model.zero_grads();
        let grads = DomainGrads {
            shared: Array2::ones(pass.shared.raw_dim()),
            private: Array2::ones(pass.private.raw_dim()),
            reconstruction: Array4::ones(pass.reconstruction.raw_dim()),
            feature_maps: Array4::zeros(pass.feature_maps.raw_dim()),
        };
        model.backward_domain(&pass, &grads, true);
        // E_T gradient is zero everywhere; E_S gradient is not.
        let mut target_grad = 0.0;
        let mut source_grad = 0.0;
        model.visit_params_mut(|c, p| match c {
            Component::TargetEncoder => target_grad += p.grad.iter().map(|g| g.abs()).sum::<f64>(),
            Component::SourceEncoder => source_grad += p.grad.iter().map(|g| g.abs()).sum::<f64>(),
            _ => {}
        });
        assert_eq!(target_grad, 0.0);
        assert!(source_grad > 0.0);
        // And an SGD step changes nothing in E_T.
        model.sgd_step(|_| 0.1, 0.0);
        let after: Vec<ArrayD<f64>> = model
            .parameter_groups()
            .into_iter()
            .find(|g| g.component == Component::TargetEncoder)
            .unwrap()
            .parameters;
        assert_eq!(before, after);
    }

    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        // Probe scalar: sum of (random weights * outputs) over every head of
        // a full two-domain pass, checked against central differences on a
        // subsample of each component's parameters.
        let config = small_config();
        let flags = AblationFlags::default();
        let model = ArnModel::new(&config, flags, 7).unwrap();
        let src = random_images(2, &config, 8);
        let tgt = random_images(2, &config, 9);

        let probe_shared = Array2::from_shape_fn((2, 5), |(i, j)| ((i + 2 * j) as f64).sin());
        let probe_private = Array2::from_shape_fn((2, 5), |(i, j)| ((i * j) as f64 + 0.3).cos());
        let probe_recon = Array4::from_shape_fn((2, 6, 2, 2), |(a, b, c, d)| {
            ((a + b + c + d) as f64 * 0.7).sin()
        });
        let probe_maps = Array4::from_shape_fn((2, 6, 2, 2), |(a, b, c, d)| {
            ((a + 2 * b + c) as f64 - d as f64) * 0.1
        });

        let scalar = |m: &ArnModel| -> f64 {
            let mut total = 0.0;
            for (images, domain) in [(&src, Domain::Source), (&tgt, Domain::Target)] {
                let pass = m.forward_domain(images, domain).unwrap();
                total += (&pass.shared * &probe_shared).sum()
                    + (&pass.private * &probe_private).sum()
                    + (&pass.reconstruction * &probe_recon).sum()
                    + (&pass.feature_maps * &probe_maps).sum();
            }
            total
        };

        let mut with_grads = model.clone();
        with_grads.zero_grads();
        for (images, domain) in [(&src, Domain::Source), (&tgt, Domain::Target)] {
            let pass = with_grads.forward_domain(images, domain).unwrap();
            let grads = DomainGrads {
                shared: probe_shared.clone(),
                private: probe_private.clone(),
                reconstruction: probe_recon.clone(),
                feature_maps: probe_maps.clone(),
            };
            with_grads.backward_domain(&pass, &grads, true);
        }

        // Flatten analytic grads in visit order.
        let mut analytic: Vec<(Component, usize, usize, f64)> = Vec::new();
        {
            let mut param_index = 0usize;
            with_grads.visit_params_mut(|c, p| {
                for (i, g) in p.grad.iter().enumerate() {
                    analytic.push((c, param_index, i, *g));
                }
                param_index += 1;
            });
        }
        // Subsample coordinates spread over all components.
        let mut rng = derive_stream(10, "subsample");
        let eps = 1e-5;
        for _ in 0..60 {
            let pick = rng.gen_range(0..analytic.len());
            let (component, param_index, coord, g) = analytic[pick];
            let mut plus = model.clone();
            let mut minus = model.clone();
            for (m, sign) in [(&mut plus, 1.0), (&mut minus, -1.0)] {
                let mut idx = 0usize;
                m.visit_params_mut(|c, p| {
                    if c == component && idx == param_index {
                        let flat = p.value.as_slice_mut().unwrap();
                        flat[coord] += sign * eps;
                    }
                    idx += 1;
                });
            }
            let numeric = (scalar(&plus) - scalar(&minus)) / (2.0 * eps);
            let denom = (numeric.abs() + g.abs()).max(1e-8);
            let rel = (numeric - g).abs() / denom;
            assert!(
                rel < 1e-4,
                "{component:?} param {param_index} coord {coord}: numeric {numeric:.8e} vs analytic {g:.8e}"
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let config = small_config();
        let model = ArnModel::new(&config, AblationFlags::default(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = ArnModel::load(&path).unwrap();
        let images = random_images(2, &config, 12);
        let a = model.extract_feature_map(&images).unwrap();
        let b = loaded.extract_feature_map(&images).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let config = small_config();
        let model = ArnModel::new(&config, AblationFlags::default(), 11).unwrap();
        let mut ckpt = model.to_checkpoint();
        // Claim a different latent width than the stored arrays have.
        ckpt.config.latent_dim = 4;
        ckpt.config.encoder_channels = [6, 6, 4];
        assert!(matches!(
            ArnModel::from_checkpoint(&ckpt),
            Err(ArnError::Shape(_))
        ));
    }

    #[test]
    fn encoder_plans_cover_supported_sizes() {
        for (size, expect) in [
            (1, true),
            (2, true),
            (4, true),
            (7, true),
            (8, true),
            (16, false),
        ] {
            assert_eq!(encoder_spatial_plan(size).is_some(), expect, "size {size}");
        }
        let plan = encoder_spatial_plan(7).unwrap();
        assert_eq!(plan[0].out_size, 3);
        assert_eq!(plan[1].out_size, 1);
        assert_eq!(plan[2].kernel, 1);
    }
}
