//! Command implementations behind the `arn` binary: dataset generation,
//! training, the four-variant comparison suite, evaluation, and loss
//! gradient self-checks.
//!
//! Every command is reproducible: the tuple (command, config file, seed)
//! determines all emitted numbers. Each run directory holds a manifest
//! sufficient to re-execute the run. Exit codes: 0 ok, 2 configuration,
//! 3 data, 4 numeric breakdown, 5 failed gradient check.

use arn::config::{AblationVariant, FileConfig, LossWeights, ModelConfig, TrainConfig};
use arn::data::{dataset_stats, export_split, generate_synthetic, load_split, SynthConfig};
use arn::evaluator::{embed, evaluate, Metrics, Protocol};
use arn::losses::run_loss_gradient_checks;
use arn::network::ArnModel;
use arn::samples::DatasetSplit;
use arn::trainer::{fit, run_ablation_suite, FitOptions, VariantMetrics};
use arn::{ArnError, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub mod plot;

/// Map an error to the documented process exit code.
pub fn exit_code(err: &ArnError) -> i32 {
    match err {
        ArnError::Config(_) | ArnError::Shape(_) | ArnError::Usage(_) => 2,
        ArnError::Data(_) | ArnError::Io(_) | ArnError::Serde(_) => 3,
        ArnError::Numeric(_) => 4,
    }
}

/// Everything a run directory needs to be re-executed.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_path: String,
    pub seed: i64,
    pub config: FileConfig,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub loss_weights: LossWeights,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: Option<f64>,
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &serde_json::to_string_pretty(value)?)
}

/// The resolved pieces of one run's configuration.
pub struct ResolvedConfig {
    pub file: FileConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub seed: i64,
}

/// Load a config file and apply command-line overrides.
pub fn resolve_config(
    config_path: &Path,
    seed_override: Option<i64>,
    ablation: Option<AblationVariant>,
) -> Result<ResolvedConfig> {
    let file = FileConfig::load(config_path)?;
    let model = file.model_config();
    let mut train = file.train_config();
    if let Some(seed) = seed_override {
        train.seed = seed;
    }
    if let Some(variant) = ablation {
        train.ablation = variant.flags();
    }
    let weights = file.loss_weights();
    Ok(ResolvedConfig {
        seed: train.seed,
        file,
        model,
        train,
        weights,
    })
}

fn synth_config(resolved: &ResolvedConfig) -> SynthConfig {
    let d = SynthConfig::default();
    let f = &resolved.file;
    SynthConfig {
        num_source_ids: f.num_source_ids.unwrap_or(d.num_source_ids),
        num_target_ids: f.num_target_ids.unwrap_or(d.num_target_ids),
        images_per_id: f.images_per_id.unwrap_or(d.images_per_id),
        image_shape: resolved.model.image_shape,
        style_strength: f.style_strength.unwrap_or(d.style_strength),
        noise_std: f.noise_std.unwrap_or(d.noise_std),
        seed: resolved.seed,
    }
}

/// Build the dataset named by the config: synthetic (default) or a
/// directory-format split.
pub fn build_split(resolved: &ResolvedConfig) -> Result<DatasetSplit> {
    match resolved.file.dataset_kind.as_deref().unwrap_or("synthetic") {
        "synthetic" => generate_synthetic(&synth_config(resolved)),
        "directory" => {
            let dir = resolved.file.dataset_dir.as_deref().ok_or_else(|| {
                ArnError::Config("dataset_kind = \"directory\" needs dataset_dir".into())
            })?;
            load_split(Path::new(dir))
        }
        other => Err(ArnError::Config(format!(
            "dataset_kind: unknown value {other:?} (expected \"synthetic\" or \"directory\")"
        ))),
    }
}

/// Infer `num_classes` from the split when the config does not pin it.
fn finalize_model_config(resolved: &mut ResolvedConfig, split: &DatasetSplit) {
    if resolved.file.num_classes.is_none() {
        resolved.model.num_classes = split.source_identities().len();
    }
}

fn validate_or_fail(resolved: &ResolvedConfig) -> Result<()> {
    let violations =
        arn::config::validate_config(&resolved.model, &resolved.train, &resolved.weights);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(ArnError::Config(violations.join("; ")))
    }
}

fn manifest_skeleton(
    command: &str,
    config_path: &Path,
    resolved: &ResolvedConfig,
    outputs: Vec<String>,
) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_path: config_path.display().to_string(),
        seed: resolved.seed,
        config: resolved.file.clone(),
        model_config: resolved.model.clone(),
        train_config: resolved.train.clone(),
        loss_weights: resolved.weights,
        outputs,
        wall_clock_seconds: None,
    }
}

fn write_cmc_csv(path: &Path, curve: &[f64]) -> Result<()> {
    let mut text = String::from("rank,accuracy\n");
    for (i, acc) in curve.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, acc));
    }
    write_atomic(path, &text)
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(config_path: &Path, out: &Path, seed_override: Option<i64>) -> Result<()> {
    let resolved = resolve_config(config_path, seed_override, None)?;
    let synth = synth_config(&resolved);
    let split = generate_synthetic(&synth)?;
    std::fs::create_dir_all(out)?;
    export_split(&split, out)?;
    let stats = dataset_stats(&split);
    write_json_atomic(&out.join("stats.json"), &stats)?;
    println!(
        "wrote {} source + {} target train images, {} queries, {} gallery images to {}",
        stats.train_source.images,
        stats.train_target.images,
        stats.query.images,
        stats.gallery.images,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainOutputs {
    pub metrics: Metrics,
    pub run_dir: PathBuf,
}

pub fn cmd_train(
    config_path: &Path,
    out: &Path,
    seed_override: Option<i64>,
    ablation: Option<AblationVariant>,
    protocol: Protocol,
    render_plot: bool,
) -> Result<TrainOutputs> {
    let started = Instant::now();
    let mut resolved = resolve_config(config_path, seed_override, ablation)?;
    let split = build_split(&resolved)?;
    finalize_model_config(&mut resolved, &split);
    validate_or_fail(&resolved)?;

    std::fs::create_dir_all(out)?;
    let checkpoint_dir = out.join("checkpoints");
    std::fs::create_dir_all(&checkpoint_dir)?;
    let mut outputs = vec![
        "manifest.json".to_string(),
        "train_log.jsonl".to_string(),
        "metrics.json".to_string(),
        "cmc.csv".to_string(),
        "checkpoints/last.json".to_string(),
    ];
    if render_plot {
        outputs.push("cmc.png".to_string());
    }
    let mut manifest = manifest_skeleton("train", config_path, &resolved, outputs);
    write_json_atomic(&out.join("manifest.json"), &manifest)?;

    let options = FitOptions {
        checkpoint_dir: Some(&checkpoint_dir),
        eval_each_epoch: true,
        protocol,
    };
    let outcome = fit(&split, &resolved.model, &resolved.train, &resolved.weights, &options)?;

    // Training log: step records interleaved with per-epoch evaluations.
    let steps_per_epoch = outcome.log.steps.len() / resolved.train.epochs;
    let mut log_text = String::new();
    for (epoch, chunk) in outcome.log.steps.chunks(steps_per_epoch).enumerate() {
        for record in chunk {
            log_text.push_str(&serde_json::to_string(record)?);
            log_text.push('\n');
        }
        if let Some(eval) = outcome.log.epochs.iter().find(|e| e.epoch == epoch) {
            log_text.push_str(&serde_json::to_string(eval)?);
            log_text.push('\n');
        }
    }
    write_atomic(&out.join("train_log.jsonl"), &log_text)?;

    // Final metrics on the final model.
    let queries = embed(&split.query, &outcome.model)?;
    let gallery = embed(&split.gallery, &outcome.model)?;
    let (metrics, curve) = evaluate(&queries, &gallery, protocol, 20)?;
    write_json_atomic(&out.join("metrics.json"), &metrics)?;
    write_cmc_csv(&out.join("cmc.csv"), &curve)?;
    if render_plot {
        plot::render_cmc(&curve, &out.join("cmc.png"))?;
    }

    manifest.wall_clock_seconds = Some(started.elapsed().as_secs_f64());
    write_json_atomic(&out.join("manifest.json"), &manifest)?;
    println!(
        "rank1 {:.4}  rank5 {:.4}  mAP {:.4}  ({} queries, {} protocol)",
        metrics.rank1, metrics.rank5, metrics.map, metrics.num_queries, metrics.protocol
    );
    Ok(TrainOutputs {
        metrics,
        run_dir: out.to_path_buf(),
    })
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

/// Fixed-width text rendering of the variant table; numbers are printed with
/// six decimals so they read back equal to the JSON values.
pub fn render_variant_table(rows: &[VariantMetrics]) -> String {
    let mut text = format!(
        "{:<38} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "Method", "R1", "R5", "R10", "R20", "mAP"
    );
    for row in rows {
        text.push_str(&format!(
            "{:<38} {:>9.6} {:>9.6} {:>9.6} {:>9.6} {:>9.6}\n",
            row.label,
            row.metrics.rank1,
            row.metrics.rank5,
            row.metrics.rank10,
            row.metrics.rank20,
            row.metrics.map
        ));
    }
    text
}

pub fn cmd_ablate(
    config_path: &Path,
    out: &Path,
    seed_override: Option<i64>,
    protocol: Protocol,
) -> Result<Vec<VariantMetrics>> {
    let started = Instant::now();
    let mut resolved = resolve_config(config_path, seed_override, None)?;
    let split = build_split(&resolved)?;
    finalize_model_config(&mut resolved, &split);
    validate_or_fail(&resolved)?;

    std::fs::create_dir_all(out)?;
    let mut manifest = manifest_skeleton(
        "ablate",
        config_path,
        &resolved,
        vec![
            "manifest.json".to_string(),
            "ablation.json".to_string(),
            "ablation.txt".to_string(),
        ],
    );
    write_json_atomic(&out.join("manifest.json"), &manifest)?;

    let rows = run_ablation_suite(&split, &resolved.model, &resolved.train, &resolved.weights, protocol)?;
    write_json_atomic(&out.join("ablation.json"), &rows)?;
    let table = render_variant_table(&rows);
    write_atomic(&out.join("ablation.txt"), &table)?;
    print!("{table}");

    manifest.wall_clock_seconds = Some(started.elapsed().as_secs_f64());
    write_json_atomic(&out.join("manifest.json"), &manifest)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn cmd_eval(
    checkpoint: &Path,
    config_path: &Path,
    out: &Path,
    protocol: Protocol,
    render_plot: bool,
) -> Result<Metrics> {
    let resolved = resolve_config(config_path, None, None)?;
    let split = build_split(&resolved)?;
    let model = ArnModel::load(checkpoint)?;

    let (eh, ew, ec) = model.config().image_shape;
    if let Some(sample) = split.query.first() {
        let (h, w, c) = sample.image_shape();
        if (h, w, c) != (eh, ew, ec) {
            return Err(ArnError::Shape(format!(
                "checkpoint expects {eh}x{ew}x{ec} images, dataset provides {h}x{w}x{c}"
            )));
        }
    }

    // Camera-less data makes the cross-camera rule exclude every match;
    // fall back to the plain protocol with a warning.
    let mut protocol = protocol;
    if protocol == Protocol::CrossCamera {
        let mut cameras = split
            .query
            .iter()
            .chain(split.gallery.iter())
            .map(|s| s.camera);
        if let Some(first) = cameras.next() {
            if cameras.all(|c| c == first) {
                eprintln!(
                    "warning: all samples share camera {first}; cross_camera would exclude \
                     every correct match, falling back to plain"
                );
                protocol = Protocol::Plain;
            }
        }
    }

    let queries = embed(&split.query, &model)?;
    let gallery = embed(&split.gallery, &model)?;
    let (metrics, curve) = evaluate(&queries, &gallery, protocol, 20)?;

    std::fs::create_dir_all(out)?;
    write_json_atomic(&out.join("metrics.json"), &metrics)?;
    write_cmc_csv(&out.join("cmc.csv"), &curve)?;
    if render_plot {
        plot::render_cmc(&curve, &out.join("cmc.png"))?;
    }
    println!(
        "rank1 {:.4}  rank5 {:.4}  mAP {:.4}  ({} queries, {} protocol)",
        metrics.rank1, metrics.rank5, metrics.map, metrics.num_queries, metrics.protocol
    );
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// check-grads
// ---------------------------------------------------------------------------

/// Runs the finite-difference check for all four losses. Returns the name of
/// the first failing loss, if any. `corrupt` is a test hook that perturbs the
/// named loss's analytic gradient to exercise the failure path.
pub fn cmd_check_grads(seed: i64, corrupt: Option<&str>) -> Result<Option<String>> {
    let checks = run_loss_gradient_checks(seed, corrupt)?;
    let mut failed = None;
    for check in &checks {
        let r = &check.report;
        println!(
            "{:<6} max_rel_error {:.3e}  epsilon {:.1e}  coords {}  tolerance {:.1e}  {}",
            check.loss,
            r.max_rel_error,
            r.epsilon,
            r.coords_checked,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
        if !r.passed && failed.is_none() {
            failed = Some(check.loss.clone());
        }
    }
    Ok(failed)
}
