//! Batch sampling and the end-to-end optimization loop.
//!
//! Batches are half source, half target. The source half is composed as P
//! identities x K images so the contrastive term always sees positive and
//! negative pairs; the target half is uniform random with identity labels
//! stripped. One step runs both domain passes, assembles the weighted
//! four-term objective, backpropagates, and applies per-component SGD
//! learning rates. The backbone trains only during the warm-up epochs (and
//! only when a source supervision term exists to train it), frozen
//! afterwards unless configured otherwise.

use crate::config::{AblationFlags, AblationVariant, LossWeights, ModelConfig, TrainConfig};
use crate::error::{ArnError, Result};
use crate::evaluator::{embed, evaluate, Metrics, Protocol};
use crate::losses::{
    classification_loss, classification_loss_grad, contrastive_loss, contrastive_loss_grad,
    difference_loss, difference_loss_grad, reconstruction_loss, reconstruction_loss_grad,
    total_loss, BatchEmbeddings, LossReport, PairBatch,
};
use crate::network::{ArnModel, Component, DomainGrads};
use crate::nn::{normalize_rows, normalize_rows_backward};
use crate::rng::derive_stream;
use crate::samples::{DatasetSplit, Domain, LabeledSample};
use ndarray::{s, Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;

/// One training batch: labeled source half, label-stripped target half, and
/// the enumerated source pair list.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub source: Vec<LabeledSample>,
    /// Identity labels are masked; reading one panics.
    pub target: Vec<LabeledSample>,
    /// `(i, j, same_identity)` over the source half, `i < j`.
    pub pairs: Vec<(usize, usize, bool)>,
}

/// Draw one batch: P identities x K images from the source set, a uniform
/// random target half, and every source pair flagged by identity equality.
pub fn sample_batch(
    split: &DatasetSplit,
    config: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<TrainBatch> {
    let p = config.identities_per_batch;
    let k = config.images_per_identity;
    let half = config.batch_size / 2;

    let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, sample) in split.train_source.iter().enumerate() {
        by_identity.entry(sample.identity()).or_default().push(i);
    }
    if by_identity.len() < p {
        return Err(ArnError::Data(format!(
            "source set has {} identities, batch needs {p}",
            by_identity.len()
        )));
    }
    if split.train_target.is_empty() {
        return Err(ArnError::Data("target training set is empty".into()));
    }

    let mut identities: Vec<u32> = by_identity.keys().cloned().collect();
    identities.shuffle(rng);
    identities.truncate(p);

    let mut source = Vec::with_capacity(half);
    for id in identities {
        let pool = &by_identity[&id];
        if pool.len() >= k {
            let mut picks = pool.clone();
            picks.shuffle(rng);
            for &idx in picks.iter().take(k) {
                source.push(split.train_source[idx].clone());
            }
        } else {
            // Too few images: sample with replacement.
            for _ in 0..k {
                let idx = pool[rng.gen_range(0..pool.len())];
                source.push(split.train_source[idx].clone());
            }
        }
    }

    let target: Vec<LabeledSample> = (0..half)
        .map(|_| {
            let idx = rng.gen_range(0..split.train_target.len());
            split.train_target[idx].strip_label()
        })
        .collect();

    let labels: Vec<u32> = source.iter().map(|s| s.identity()).collect();
    let mut pairs = Vec::with_capacity(half * (half - 1) / 2);
    for i in 0..half {
        for j in (i + 1)..half {
            pairs.push((i, j, labels[i] == labels[j]));
        }
    }
    Ok(TrainBatch {
        source,
        target,
        pairs,
    })
}

/// Per-component learning rates in effect for one step. The encoder rate
/// covers `E_C`, `E_S`, `E_T`, and `D_C`.
#[derive(Debug, Clone, Copy)]
pub struct GroupRates {
    pub backbone: f64,
    pub encoders: f64,
    pub classifier: f64,
}

impl GroupRates {
    fn rate_for(&self, component: Component) -> f64 {
        match component {
            Component::Backbone => self.backbone,
            Component::Classifier => self.classifier,
            _ => self.encoders,
        }
    }
}

fn stack_images(samples: &[LabeledSample]) -> Array4<f64> {
    let (h, w, c) = samples[0].image_shape();
    let mut batch = Array4::zeros((samples.len(), c, h, w));
    for (i, sample) in samples.iter().enumerate() {
        batch.slice_mut(s![i, .., .., ..]).assign(&sample.image);
    }
    batch
}

/// One optimization step: forward both domains, evaluate the active loss
/// terms, backpropagate, and update per-group. Returns the pre-update loss
/// report. Aborts with a diagnostic naming the term if any loss goes
/// non-finite.
pub fn train_step(
    model: &mut ArnModel,
    batch: &TrainBatch,
    weights: &LossWeights,
    flags: &AblationFlags,
    rates: GroupRates,
    momentum: f64,
    dropout_rng: &mut ChaCha12Rng,
) -> Result<LossReport> {
    if flags.use_private != model.flags().use_private {
        return Err(ArnError::Usage(
            "ablation flags disagree with the model's private-encoder layout".into(),
        ));
    }
    let source_images = stack_images(&batch.source);
    let target_images = stack_images(&batch.target);
    let source_pass = model.forward_domain(&source_images, Domain::Source)?;
    let target_pass = model.forward_domain(&target_images, Domain::Target)?;

    let n_src = batch.source.len();
    let n_tgt = batch.target.len();
    let d = model.config().latent_dim;
    let mut g_shared_src = Array2::zeros((n_src, d));
    let mut g_private_src = Array2::zeros((n_src, d));
    let mut g_shared_tgt = Array2::zeros((n_tgt, d));
    let mut g_private_tgt = Array2::zeros((n_tgt, d));

    // Classification (source only).
    let mut class = 0.0;
    let mut classifier_head = None;
    if flags.use_class {
        let labels: Vec<usize> = batch.source.iter().map(|s| s.identity() as usize).collect();
        let (probs, cache) =
            model.classify_train(&source_pass.shared, Domain::Source, dropout_rng)?;
        class = classification_loss(&probs, &labels);
        let gprobs = classification_loss_grad(&probs, &labels);
        classifier_head = Some((cache, gprobs));
    }

    // Contrastive on L2-normalized source shared embeddings.
    let mut ctrs = 0.0;
    if flags.use_ctrs {
        let (normalized, norms) = normalize_rows(&source_pass.shared);
        let pair_batch = PairBatch {
            embeddings: normalized,
            pairs: batch.pairs.clone(),
        };
        ctrs = contrastive_loss(&pair_batch, weights.margin);
        if weights.alpha != 0.0 {
            let g_norm = contrastive_loss_grad(&pair_batch, weights.margin) * weights.alpha;
            g_shared_src += &normalize_rows_backward(&pair_batch.embeddings, &norms, &g_norm);
        }
    }

    // Reconstruction over both domains.
    let mut rec = 0.0;
    let (mut g_rec_s, mut g_rec_t, mut g_maps_s, mut g_maps_t) = (
        Array4::zeros(source_pass.reconstruction.raw_dim()),
        Array4::zeros(target_pass.reconstruction.raw_dim()),
        Array4::zeros(source_pass.feature_maps.raw_dim()),
        Array4::zeros(target_pass.feature_maps.raw_dim()),
    );
    if flags.use_rec {
        rec = reconstruction_loss(
            &source_pass.feature_maps,
            &source_pass.reconstruction,
            &target_pass.feature_maps,
            &target_pass.reconstruction,
        )?;
        if weights.beta != 0.0 {
            let (gs, gsh, gt, gth) = reconstruction_loss_grad(
                &source_pass.feature_maps,
                &source_pass.reconstruction,
                &target_pass.feature_maps,
                &target_pass.reconstruction,
            );
            g_rec_s = gsh * weights.beta;
            g_rec_t = gth * weights.beta;
            g_maps_s = gs * weights.beta;
            g_maps_t = gt * weights.beta;
        }
    }

    // Orthogonality between shared and private rows, both domains.
    let mut diff = 0.0;
    if flags.diff_active() {
        let emb = BatchEmbeddings {
            shared_source: source_pass.shared.clone(),
            private_source: source_pass.private.clone(),
            shared_target: target_pass.shared.clone(),
            private_target: target_pass.private.clone(),
        };
        diff = difference_loss(&emb);
        if weights.gamma != 0.0 {
            let g = difference_loss_grad(&emb);
            g_shared_src += &(g.shared_source * weights.gamma);
            g_private_src += &(g.private_source * weights.gamma);
            g_shared_tgt += &(g.shared_target * weights.gamma);
            g_private_tgt += &(g.private_target * weights.gamma);
        }
    }

    let report = total_loss(class, ctrs, rec, diff, weights, flags);
    if let Some(term) = report.non_finite_term() {
        return Err(ArnError::Numeric(format!(
            "loss term '{term}' became non-finite at a training step"
        )));
    }

    // Backward.
    model.zero_grads();
    if let Some((cache, gprobs)) = &classifier_head {
        g_shared_src += &model.classifier_backward(cache, gprobs);
    }
    let train_backbone = rates.backbone != 0.0;
    model.backward_domain(
        &source_pass,
        &DomainGrads {
            shared: g_shared_src,
            private: g_private_src,
            reconstruction: g_rec_s,
            feature_maps: g_maps_s,
        },
        train_backbone,
    );
    model.backward_domain(
        &target_pass,
        &DomainGrads {
            shared: g_shared_tgt,
            private: g_private_tgt,
            reconstruction: g_rec_t,
            feature_maps: g_maps_t,
        },
        train_backbone,
    );
    model.sgd_step(|c| rates.rate_for(c), momentum);
    Ok(report)
}

/// One step's logged losses.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

/// One epoch's evaluation snapshot.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Full training history.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// `(epoch, mAP)` of the best evaluated epoch, when evaluation ran.
    pub best: Option<(usize, f64)>,
}

/// Knobs of [`fit`] beyond the core configs.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions<'a> {
    /// Write `last.json` per epoch (and `best.json` on mAP improvement) here.
    pub checkpoint_dir: Option<&'a Path>,
    /// Evaluate on query/gallery after every epoch.
    pub eval_each_epoch: bool,
    pub protocol: Protocol,
}

impl Default for FitOptions<'_> {
    fn default() -> Self {
        Self {
            checkpoint_dir: None,
            eval_each_epoch: false,
            protocol: Protocol::CrossCamera,
        }
    }
}

/// A trained model with its history.
pub struct FitOutcome {
    pub model: ArnModel,
    /// Best-by-target-mAP snapshot, when per-epoch evaluation ran.
    pub best_model: Option<ArnModel>,
    pub log: TrainingLog,
}

/// Train for `epochs x steps_per_epoch` steps, where `steps_per_epoch =
/// floor(min(N_s, N_t) / (batch/2))`. The backbone trains at `lr_backbone`
/// only while `epoch < backbone_warmup_epochs` (and only if a supervision
/// term is active); afterwards it is frozen unless
/// `freeze_backbone_after_warmup` is off.
pub fn fit(
    split: &DatasetSplit,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    weights: &LossWeights,
    options: &FitOptions,
) -> Result<FitOutcome> {
    let violations = crate::config::validate_config(model_config, train_config, weights);
    if !violations.is_empty() {
        return Err(ArnError::Config(violations.join("; ")));
    }
    let half = train_config.batch_size / 2;
    let steps_per_epoch = split.train_source.len().min(split.train_target.len()) / half;
    if steps_per_epoch == 0 {
        return Err(ArnError::Config(
            "batch_size/2 exceeds the smaller training set; no full batch fits".into(),
        ));
    }

    // The trainer only ever touches a label-stripped target set.
    let masked_split = DatasetSplit {
        train_source: split.train_source.clone(),
        train_target: split.masked_train_target(),
        query: Vec::new(),
        gallery: Vec::new(),
    };

    let flags = train_config.ablation;
    let mut model = ArnModel::new(model_config, flags, train_config.seed)?;
    let mut sampler_rng = derive_stream(train_config.seed, "sampler");
    let mut dropout_rng = derive_stream(train_config.seed, "dropout");

    let mut log = TrainingLog::default();
    let mut best_model: Option<ArnModel> = None;
    let mut best_map = f64::NEG_INFINITY;
    let mut step = 0usize;

    for epoch in 0..train_config.epochs {
        let warm = epoch < train_config.backbone_warmup_epochs;
        let backbone_active = flags.backbone_tunable()
            && (warm || !train_config.freeze_backbone_after_warmup);
        let rates = GroupRates {
            backbone: if backbone_active {
                train_config.lr_backbone
            } else {
                0.0
            },
            encoders: train_config.lr_encoders,
            classifier: train_config.lr_classifier,
        };
        for _ in 0..steps_per_epoch {
            let batch = sample_batch(&masked_split, train_config, &mut sampler_rng)?;
            let report = train_step(
                &mut model,
                &batch,
                weights,
                &flags,
                rates,
                train_config.momentum,
                &mut dropout_rng,
            )?;
            log.steps.push(StepRecord { step, report });
            step += 1;
        }

        if options.eval_each_epoch && !split.query.is_empty() && !split.gallery.is_empty() {
            let queries = embed(&split.query, &model)?;
            let gallery = embed(&split.gallery, &model)?;
            let (metrics, _) = evaluate(&queries, &gallery, options.protocol, 20)?;
            if metrics.map > best_map {
                best_map = metrics.map;
                best_model = Some(model.clone());
                if let Some(dir) = options.checkpoint_dir {
                    model.save(&dir.join("best.json"))?;
                }
            }
            log.epochs.push(EpochRecord { epoch, metrics });
            log.best = Some((
                log.epochs
                    .iter()
                    .max_by(|a, b| a.metrics.map.partial_cmp(&b.metrics.map).unwrap())
                    .unwrap()
                    .epoch,
                best_map,
            ));
        }
        if let Some(dir) = options.checkpoint_dir {
            model.save(&dir.join("last.json"))?;
        }
    }

    Ok(FitOutcome {
        model,
        best_model,
        log,
    })
}

/// One row of the variant comparison table.
#[derive(Debug, Clone, Serialize)]
pub struct VariantMetrics {
    pub variant: AblationVariant,
    pub label: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Train the four studied variants from the same seed and initialization
/// scheme, evaluate each on the target query/gallery, and return one metric
/// row per variant (table order: reconstruction-only first, full model
/// last). Variants without source supervision never tune the backbone.
pub fn run_ablation_suite(
    split: &DatasetSplit,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    weights: &LossWeights,
    protocol: Protocol,
) -> Result<Vec<VariantMetrics>> {
    AblationVariant::ALL
        .into_par_iter()
        .map(|variant| {
            let config = TrainConfig {
                ablation: variant.flags(),
                ..train_config.clone()
            };
            let outcome = fit(split, model_config, &config, weights, &FitOptions::default())?;
            let queries = embed(&split.query, &outcome.model)?;
            let gallery = embed(&split.gallery, &outcome.model)?;
            let (metrics, _) = evaluate(&queries, &gallery, protocol, 20)?;
            Ok(VariantMetrics {
                variant,
                label: variant.label().to_string(),
                metrics,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use ndarray::ArrayD;

    fn tiny_synth() -> SynthConfig {
        SynthConfig {
            num_source_ids: 4,
            num_target_ids: 4,
            images_per_id: 4,
            image_shape: (8, 8, 3),
            style_strength: 0.6,
            noise_std: 0.05,
            seed: 1,
        }
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_shape: (8, 8, 3),
            feature_map_shape: (2, 2, 8),
            latent_dim: 6,
            num_classes: 4,
            encoder_channels: [8, 8, 6],
            dropout_rate: 0.5,
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            identities_per_batch: 2,
            images_per_identity: 2,
            lr_backbone: 1e-3,
            lr_encoders: 1e-2,
            lr_classifier: 2e-2,
            backbone_warmup_epochs: 1,
            freeze_backbone_after_warmup: true,
            momentum: 0.0,
            seed: 5,
            ablation: AblationFlags::default(),
        }
    }

    fn params_snapshot(model: &mut ArnModel) -> Vec<(Component, ArrayD<f64>)> {
        let mut out = Vec::new();
        model.visit_params_mut(|c, p| out.push((c, p.value.clone())));
        out
    }

    #[test]
    fn batch_composition_and_pair_counts() {
        let split = generate_synthetic(&tiny_synth()).unwrap();
        let config = tiny_train();
        let mut rng = derive_stream(0, "sampler");
        let batch = sample_batch(&split, &config, &mut rng).unwrap();
        assert_eq!(batch.source.len(), 4);
        assert_eq!(batch.target.len(), 4);
        assert_eq!(batch.pairs.len(), 6);
        // Enumeration oracle: count same-identity pairs directly.
        let labels: Vec<u32> = batch.source.iter().map(|s| s.identity()).collect();
        let mut positives = 0;
        for i in 0..labels.len() {
            for j in (i + 1)..labels.len() {
                if labels[i] == labels[j] {
                    positives += 1;
                }
            }
        }
        let reported = batch.pairs.iter().filter(|&&(_, _, same)| same).count();
        assert_eq!(reported, positives);
        assert_eq!(positives, 2); // 2 identities x C(2,2) each
        assert!(batch.pairs.iter().any(|&(_, _, same)| !same));
        // Target labels are masked.
        assert!(batch.target.iter().all(|s| !s.is_labeled()));
    }

    #[test]
    fn larger_batch_pair_counts() {
        // P=4, K=2: 28 pairs, 4 positives, 24 negatives.
        let synth = SynthConfig {
            num_source_ids: 6,
            ..tiny_synth()
        };
        let split = generate_synthetic(&synth).unwrap();
        let config = TrainConfig {
            batch_size: 16,
            identities_per_batch: 4,
            images_per_identity: 2,
            ..tiny_train()
        };
        let mut rng = derive_stream(1, "sampler");
        let batch = sample_batch(&split, &config, &mut rng).unwrap();
        assert_eq!(batch.pairs.len(), 28);
        assert_eq!(batch.pairs.iter().filter(|&&(_, _, s)| s).count(), 4);
    }

    #[test]
    fn sampler_is_deterministic_and_errors_on_few_identities() {
        let split = generate_synthetic(&tiny_synth()).unwrap();
        let config = tiny_train();
        let a = sample_batch(&split, &config, &mut derive_stream(3, "s")).unwrap();
        let b = sample_batch(&split, &config, &mut derive_stream(3, "s")).unwrap();
        let ids = |batch: &TrainBatch| -> Vec<u32> {
            batch.source.iter().map(|s| s.identity()).collect::<Vec<_>>()
        };
        assert_eq!(ids(&a), ids(&b));
        assert_eq!(a.source[0].image, b.source[0].image);

        let too_many = TrainConfig {
            identities_per_batch: 99,
            images_per_identity: 2,
            batch_size: 396,
            ..tiny_train()
        };
        assert!(sample_batch(&split, &too_many, &mut derive_stream(3, "s")).is_err());
    }

    #[test]
    fn zero_learning_rates_leave_parameters_unchanged() {
        let split = generate_synthetic(&tiny_synth()).unwrap();
        let mut model = ArnModel::new(&tiny_model(), AblationFlags::default(), 0).unwrap();
        let before = params_snapshot(&mut model);
        let batch = sample_batch(&split, &tiny_train(), &mut derive_stream(0, "s")).unwrap();
        let report = train_step(
            &mut model,
            &batch,
            &LossWeights::default(),
            &AblationFlags::default(),
            GroupRates {
                backbone: 0.0,
                encoders: 0.0,
                classifier: 0.0,
            },
            0.0,
            &mut derive_stream(0, "d"),
        )
        .unwrap();
        assert!(report.total.is_finite());
        assert!(report.class_loss > 0.0);
        let after = params_snapshot(&mut model);
        assert_eq!(before, after);
    }

    #[test]
    fn reconstruction_only_updates_encoders_and_decoder() {
        // Supervision off, private on, backbone frozen: gradients reach
        // E_C, E_S, E_T, D_C only; C_S and E_I stay put.
        let split = generate_synthetic(&tiny_synth()).unwrap();
        let flags = AblationFlags {
            use_class: false,
            use_ctrs: false,
            use_private: true,
            use_rec: true,
            use_diff: false,
        };
        let mut model = ArnModel::new(&tiny_model(), flags, 0).unwrap();
        let before = params_snapshot(&mut model);
        let batch = sample_batch(&split, &tiny_train(), &mut derive_stream(0, "s")).unwrap();
        train_step(
            &mut model,
            &batch,
            &LossWeights::default(),
            &flags,
            GroupRates {
                backbone: 0.0,
                encoders: 1e-2,
                classifier: 1e-2,
            },
            0.0,
            &mut derive_stream(0, "d"),
        )
        .unwrap();
        let after = params_snapshot(&mut model);
        for ((component, a), (_, b)) in before.iter().zip(after.iter()) {
            let changed = a != b;
            let expect_change = matches!(
                component,
                Component::SharedEncoder
                    | Component::SourceEncoder
                    | Component::TargetEncoder
                    | Component::Decoder
            );
            assert_eq!(changed, expect_change, "{component:?}");
        }
    }

    #[test]
    fn diff_flag_off_equals_zero_gamma_bitwise() {
        let split = generate_synthetic(&tiny_synth()).unwrap();
        let run = |flags: AblationFlags, weights: LossWeights| -> Vec<(Component, ArrayD<f64>)> {
            let mut model = ArnModel::new(&tiny_model(), flags, 0).unwrap();
            let batch = sample_batch(&split, &tiny_train(), &mut derive_stream(0, "s")).unwrap();
            train_step(
                &mut model,
                &batch,
                &weights,
                &flags,
                GroupRates {
                    backbone: 1e-3,
                    encoders: 1e-2,
                    classifier: 2e-2,
                },
                0.0,
                &mut derive_stream(0, "d"),
            )
            .unwrap();
            params_snapshot(&mut model)
        };
        let flag_off = AblationFlags {
            use_diff: false,
            ..AblationFlags::default()
        };
        let a = run(flag_off, LossWeights::default());
        let b = run(
            AblationFlags::default(),
            LossWeights {
                gamma: 0.0,
                ..LossWeights::default()
            },
        );
        assert_eq!(a, b);
        // Sanity: an active difference term changes the outcome.
        let c = run(AblationFlags::default(), LossWeights::default());
        assert_ne!(a, c);
    }

    #[test]
    fn fit_completes_with_masked_target_labels_and_is_deterministic() {
        let split = generate_synthetic(&tiny_synth()).unwrap();
        let train = TrainConfig {
            epochs: 2,
            ..tiny_train()
        };
        let options = FitOptions {
            eval_each_epoch: true,
            ..FitOptions::default()
        };
        let a = fit(&split, &tiny_model(), &train, &LossWeights::default(), &options).unwrap();
        let b = fit(&split, &tiny_model(), &train, &LossWeights::default(), &options).unwrap();
        assert_eq!(a.log.steps.len(), b.log.steps.len());
        for (x, y) in a.log.steps.iter().zip(b.log.steps.iter()) {
            assert_eq!(x.report, y.report);
        }
        assert_eq!(a.log.epochs.len(), 2);
        for (x, y) in a.log.epochs.iter().zip(b.log.epochs.iter()) {
            assert_eq!(x.metrics, y.metrics);
        }
        assert!(a.best_model.is_some());
    }

    #[test]
    fn zero_warmup_never_updates_backbone() {
        let split = generate_synthetic(&tiny_synth()).unwrap();
        let train = TrainConfig {
            backbone_warmup_epochs: 0,
            epochs: 2,
            ..tiny_train()
        };
        let outcome = fit(
            &split,
            &tiny_model(),
            &train,
            &LossWeights::default(),
            &FitOptions::default(),
        )
        .unwrap();
        let mut trained = outcome.model;
        let fresh = ArnModel::new(&tiny_model(), train.ablation, train.seed).unwrap();
        let mut fresh = fresh;
        let trained_params = params_snapshot(&mut trained);
        let fresh_params = params_snapshot(&mut fresh);
        for ((component, a), (_, b)) in trained_params.iter().zip(fresh_params.iter()) {
            if *component == Component::Backbone {
                assert_eq!(a, b, "backbone must stay at initialization");
            }
        }
    }

    #[test]
    fn unsupervised_variants_never_tune_backbone_even_with_warmup() {
        let split = generate_synthetic(&tiny_synth()).unwrap();
        let train = TrainConfig {
            backbone_warmup_epochs: 5,
            epochs: 1,
            ablation: AblationVariant::NoSupervised.flags(),
            ..tiny_train()
        };
        let outcome = fit(
            &split,
            &tiny_model(),
            &train,
            &LossWeights::default(),
            &FitOptions::default(),
        )
        .unwrap();
        let mut trained = outcome.model;
        let mut fresh = ArnModel::new(&tiny_model(), train.ablation, train.seed).unwrap();
        let trained_params = params_snapshot(&mut trained);
        let fresh_params = params_snapshot(&mut fresh);
        for ((component, a), (_, b)) in trained_params.iter().zip(fresh_params.iter()) {
            if *component == Component::Backbone {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn one_epoch_on_default_synthetic_reduces_loss() {
        // Committed-seed check: the mean total loss over the last 10 steps of
        // the first epoch sits below the mean over the first 10 steps.
        let split = generate_synthetic(&SynthConfig::default()).unwrap();
        let train = TrainConfig {
            epochs: 1,
            seed: 0,
            ..TrainConfig::default()
        };
        let outcome = fit(
            &split,
            &ModelConfig::default(),
            &train,
            &LossWeights::default(),
            &FitOptions::default(),
        )
        .unwrap();
        let totals: Vec<f64> = outcome.log.steps.iter().map(|s| s.report.total).collect();
        assert!(totals.len() >= 20, "expected at least 20 steps, got {}", totals.len());
        let head: f64 = totals[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = totals[totals.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < head,
            "loss did not descend within one epoch: first-10 mean {head}, last-10 mean {tail}"
        );
    }

    #[test]
    fn ablation_suite_returns_four_labeled_rows() {
        let split = generate_synthetic(&tiny_synth()).unwrap();
        let rows = run_ablation_suite(
            &split,
            &tiny_model(),
            &tiny_train(),
            &LossWeights::default(),
            Protocol::CrossCamera,
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(
            labels,
            vec![
                "Ours w/o L_ctrs, L_class, E_S, E_T",
                "Ours w/o L_ctrs, L_class",
                "Ours w/o E_S, E_T",
                "Ours",
            ]
        );
        for row in &rows {
            assert!((0.0..=1.0).contains(&row.metrics.rank1));
            assert!((0.0..=1.0).contains(&row.metrics.map));
        }
    }

    #[test]
    fn validated_configs_train_one_epoch() {
        // Any configuration that validates cleanly must survive one epoch.
        let candidates = [
            (tiny_model(), tiny_train()),
            (
                ModelConfig {
                    latent_dim: 4,
                    encoder_channels: [5, 7, 4],
                    dropout_rate: 0.0,
                    ..tiny_model()
                },
                TrainConfig {
                    momentum: 0.5,
                    ..tiny_train()
                },
            ),
            (
                ModelConfig {
                    image_shape: (16, 16, 3),
                    feature_map_shape: (4, 4, 5),
                    latent_dim: 3,
                    encoder_channels: [4, 4, 3],
                    ..tiny_model()
                },
                TrainConfig {
                    batch_size: 12,
                    identities_per_batch: 3,
                    images_per_identity: 2,
                    ablation: AblationVariant::NoPrivate.flags(),
                    ..tiny_train()
                },
            ),
        ];
        for (model_config, train_config) in candidates {
            let violations =
                crate::config::validate_config(&model_config, &train_config, &LossWeights::default());
            assert!(violations.is_empty(), "{violations:?}");
            let synth = SynthConfig {
                image_shape: model_config.image_shape,
                ..tiny_synth()
            };
            let split = generate_synthetic(&synth).unwrap();
            fit(
                &split,
                &model_config,
                &train_config,
                &LossWeights::default(),
                &FitOptions::default(),
            )
            .unwrap();
        }
    }
}
