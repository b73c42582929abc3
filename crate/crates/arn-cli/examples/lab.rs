// Scratch experiment harness (not part of the deliverable).
use arn::config::{AblationVariant, LossWeights, ModelConfig, TrainConfig};
use arn::data::{generate_synthetic, target_holdout, SynthConfig};
use arn::evaluator::{embed, evaluate, Protocol};
use arn::network::ArnModel;
use arn::samples::Domain;
use arn::trainer::{fit, FitOptions};
use ndarray::{s, Array4};
use rayon::prelude::*;

fn getenv<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

// mean |cos(shared, private)| over samples
fn mean_abs_cos(model: &ArnModel, samples: &[arn::samples::LabeledSample]) -> f64 {
    let (h, w, c) = model.config().image_shape;
    let mut batch = Array4::zeros((samples.len(), c, h, w));
    for (i, smp) in samples.iter().enumerate() {
        batch.slice_mut(s![i, .., .., ..]).assign(&smp.image);
    }
    let maps = model.extract_feature_map(&batch).unwrap();
    let shared = model.encode_shared(&maps).unwrap();
    let private = model.encode_private(&maps, Domain::Target).unwrap();
    let mut total = 0.0;
    for i in 0..shared.nrows() {
        let a = shared.row(i);
        let b = private.row(i);
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += (dot / (na * nb).max(1e-12)).abs();
    }
    total / shared.nrows() as f64
}

fn main() {
    let epochs: usize = getenv("EPOCHS", 12);
    let alpha: f64 = getenv("ALPHA", 0.01);
    let beta: f64 = getenv("BETA", 2.0);
    let gamma: f64 = getenv("GAMMA", 1500.0);
    let lr_enc: f64 = getenv("LR_ENC", 1e-3);
    let lr_cls: f64 = getenv("LR_CLS", 2e-3);
    let lr_bb: f64 = getenv("LR_BB", 1e-3);
    let warmup: usize = getenv("WARMUP", 5);
    let noise: f64 = getenv("NOISE", 0.05);
    let style: f64 = getenv("STYLE", 0.6);
    let dropout: f64 = getenv("DROPOUT", 0.5);
    let momentum: f64 = getenv("MOMENTUM", 0.0);
    let seeds: usize = getenv("SEEDS", 1);
    let ids: usize = getenv("IDS", 20);
    let images: usize = getenv("IMAGES", 10);
    let batch: usize = getenv("BATCH", 16);
    let kimg: usize = getenv("KIMG", 2);
    let latent: usize = getenv("LATENT", 64);
    let texture: f64 = getenv("TEXTURE", -1.0); // unused marker
    let _ = texture;

    let weights = LossWeights { alpha, beta, gamma, margin: 1.0 };
    println!("epochs {epochs} alpha {alpha} beta {beta} gamma {gamma} lr_enc {lr_enc} lr_cls {lr_cls} lr_bb {lr_bb} warmup {warmup} noise {noise} style {style} dropout {dropout} mom {momentum}");

    let results: Vec<(i64, Vec<(String, f64, f64)>, f64, f64)> = (0..seeds as i64).into_par_iter().map(|seed| {
        let synth = SynthConfig { noise_std: noise, style_strength: style, seed,
            num_source_ids: ids, num_target_ids: ids, images_per_id: images, ..SynthConfig::default() };
        let split = generate_synthetic(&synth).unwrap();
        let holdout = target_holdout(&synth, 4).unwrap();
        let mut model_config = ModelConfig { dropout_rate: dropout, ..ModelConfig::default() };
        model_config.latent_dim = latent;
        model_config.encoder_channels = [48, 48, latent];

        let mut rows = Vec::new();
        // untrained baseline
        let model = ArnModel::new(&model_config, AblationVariant::Full.flags(), seed).unwrap();
        let q = embed(&split.query, &model).unwrap();
        let g = embed(&split.gallery, &model).unwrap();
        let (m, _) = evaluate(&q, &g, Protocol::CrossCamera, 20).unwrap();
        rows.push(("untrained".to_string(), m.rank1, m.map));

        let mut cos_full = f64::NAN;
        let mut cos_nodiff = f64::NAN;
        let selected: Vec<String> = std::env::var("VARIANTS").map(|v| v.split(',').map(|s| s.to_string()).collect()).unwrap_or_default();
        for variant in AblationVariant::ALL {
            if !selected.is_empty() && !selected.iter().any(|s| s == variant.key()) { continue; }
            let train = TrainConfig {
                ablation: variant.flags(), epochs, seed,
                lr_backbone: lr_bb, lr_encoders: lr_enc, lr_classifier: lr_cls,
                backbone_warmup_epochs: warmup, momentum,
                batch_size: batch, identities_per_batch: batch / 2 / kimg, images_per_identity: kimg,
                ..TrainConfig::default()
            };
            let out = fit(&split, &model_config, &train, &weights, &FitOptions::default()).unwrap();
            let q = embed(&split.query, &out.model).unwrap();
            let g = embed(&split.gallery, &out.model).unwrap();
            let (m, _) = evaluate(&q, &g, Protocol::CrossCamera, 20).unwrap();
            // source-domain retrieval probe: first image per source id = query, rest gallery
            let mut sq = Vec::new();
            let mut sg = Vec::new();
            for (i, smp) in split.train_source.iter().enumerate() {
                if i % images == 0 { sq.push(smp.clone()); } else { sg.push(smp.clone()); }
            }
            let sqe = embed(&sq, &out.model).unwrap();
            let sge = embed(&sg, &out.model).unwrap();
            let (sm, _) = evaluate(&sqe, &sge, Protocol::CrossCamera, 20).unwrap();
            let tail = &out.log.steps[out.log.steps.len().saturating_sub(25)..];
            let mc = tail.iter().map(|s| s.report.class_loss).sum::<f64>() / tail.len() as f64;
            let mx = tail.iter().map(|s| s.report.ctrs_loss).sum::<f64>() / tail.len() as f64;
            let mr = tail.iter().map(|s| s.report.rec_loss).sum::<f64>() / tail.len() as f64;
            eprintln!("  seed {seed} {:<14} tgtR1 {:.3} srcR1 {:.3} | class {mc:.3} ctrs {mx:.3} rec {mr:.4}", variant.key(), m.rank1, sm.rank1);
            rows.push((variant.key().to_string(), m.rank1, m.map));
            if variant == AblationVariant::Full && std::env::var("SKIP_COS").is_err() {
                cos_full = mean_abs_cos(&out.model, &holdout);
                // gamma = 0 twin
                let w0 = LossWeights { gamma: 0.0, ..weights };
                let out0 = fit(&split, &model_config, &train, &w0, &FitOptions::default()).unwrap();
                cos_nodiff = mean_abs_cos(&out0.model, &holdout);
            }
        }
        (seed, rows, cos_full, cos_nodiff)
    }).collect();

    // per-seed rows
    for (seed, rows, cf, cn) in &results {
        let line: Vec<String> = rows.iter().map(|(k, r1, map)| format!("{k} R1 {r1:.3} mAP {map:.3}")).collect();
        println!("seed {seed}: {}  |cos| full {cf:.3} vs gamma0 {cn:.3}", line.join(" | "));
    }
    // medians across seeds
    if seeds > 1 {
        let keys: Vec<String> = results[0].1.iter().map(|(k, _, _)| k.clone()).collect();
        print!("MEDIAN R1: ");
        for (i, k) in keys.iter().enumerate() {
            let mut vals: Vec<f64> = results.iter().map(|(_, rows, _, _)| rows[i].1).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            print!("{k} {:.3}  ", vals[vals.len() / 2]);
        }
        println!();
    }
}
